#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "cope/common.hpp"
#include "cope/mdp_model.hpp"

namespace cope {

// ---------------------------------------------------------------------------
// Random Fourier features
// ---------------------------------------------------------------------------

/// phi(x) = sqrt(2/D) cos(W x + b), approximating the Gaussian kernel with
/// bandwidth sigma_b.
class FourierFeatureMap {
public:
    FourierFeatureMap() = default;
    FourierFeatureMap(Eigen::MatrixXd frequencies, Eigen::VectorXd phases, double bandwidth)
        : w_(std::move(frequencies)), b_(std::move(phases)), bandwidth_(bandwidth) {}

    int n_features() const { return static_cast<int>(w_.rows()); }
    int input_dim() const { return static_cast<int>(w_.cols()); }
    double bandwidth() const { return bandwidth_; }
    const Eigen::MatrixXd& frequencies() const { return w_; }
    const Eigen::VectorXd& phases() const { return b_; }

    void transform(StateView x, double* out) const {
        const double scale = std::sqrt(2.0 / static_cast<double>(n_features()));
        for (int k = 0; k < n_features(); ++k) {
            double z = b_[k];
            for (int j = 0; j < input_dim(); ++j) z += w_(k, j) * x[static_cast<std::size_t>(j)];
            out[k] = scale * std::cos(z);
        }
    }

    Eigen::VectorXd operator()(StateView x) const {
        Eigen::VectorXd out(n_features());
        transform(x, out.data());
        return out;
    }

private:
    Eigen::MatrixXd w_;
    Eigen::VectorXd b_;
    double bandwidth_ = 1.0;
};

/// Median pairwise Euclidean distance between rows.
inline double median_pairwise_distance(const Eigen::MatrixXd& rows) {
    std::vector<double> dist;
    dist.reserve(static_cast<std::size_t>(rows.rows() * (rows.rows() - 1) / 2));
    for (Eigen::Index i = 0; i < rows.rows(); ++i)
        for (Eigen::Index j = i + 1; j < rows.rows(); ++j) dist.push_back((rows.row(i) - rows.row(j)).norm());
    if (dist.empty()) throw DegenerateSample("need at least two inputs for the median heuristic");
    if (*std::max_element(dist.begin(), dist.end()) == 0.0)
        throw DegenerateSample("all pairwise distances are zero");
    auto median = [](std::vector<double> v) {
        const std::size_t n = v.size();
        std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2), v.end());
        double hi = v[n / 2];
        if (n % 2 == 1) return hi;
        const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2));
        return 0.5 * (lo + hi);
    };
    double med = median(dist);
    if (med == 0.0) {
        // many tied inputs: fall back to the median over distinct pairs
        std::erase(dist, 0.0);
        med = median(dist);
    }
    return med;
}

/**
 * Fits a Fourier feature map to sample inputs (rows of `inputs`).
 * Bandwidth is the median pairwise distance over at most 1000 subsampled
 * rows; frequencies are N(0, 1/sigma_b^2) per coordinate, phases U[0, 2pi).
 */
inline FourierFeatureMap fit_fourier_map(const Eigen::MatrixXd& inputs, int n_features, std::uint64_t seed,
                                         int max_subsample = 1000) {
    if (n_features < 1) throw std::invalid_argument("fit_fourier_map: n_features must be >= 1");
    if (inputs.rows() < 2) throw DegenerateSample("need at least two inputs for the median heuristic");
    Rng rng = make_rng(seed, 0x5ab5);
    Eigen::MatrixXd sub;
    if (inputs.rows() > max_subsample) {
        std::vector<Eigen::Index> order(static_cast<std::size_t>(inputs.rows()));
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        // partial Fisher-Yates with our own uniforms for reproducibility
        for (int k = 0; k < max_subsample; ++k) {
            const auto remaining = static_cast<double>(order.size() - static_cast<std::size_t>(k));
            const auto j = static_cast<std::size_t>(k) + static_cast<std::size_t>(uniform01(rng) * remaining);
            std::swap(order[static_cast<std::size_t>(k)], order[j]);
        }
        sub.resize(max_subsample, inputs.cols());
        for (int k = 0; k < max_subsample; ++k) sub.row(k) = inputs.row(order[static_cast<std::size_t>(k)]);
    } else {
        sub = inputs;
    }
    const double sigma = median_pairwise_distance(sub);
    Rng draw = make_rng(seed, 0xf0f0);
    Eigen::MatrixXd w(n_features, inputs.cols());
    for (Eigen::Index k = 0; k < w.rows(); ++k)
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(k, j) = standard_normal(draw) / sigma;
    Eigen::VectorXd b(n_features);
    for (Eigen::Index k = 0; k < b.size(); ++k) b[k] = 2.0 * M_PI * uniform01(draw);
    return FourierFeatureMap(std::move(w), std::move(b), sigma);
}

// ---------------------------------------------------------------------------
// State bases
// ---------------------------------------------------------------------------

/// Feature vector xi(s) over states: one-hot indicators for tabular spaces,
/// optionally intercept-augmented Fourier features for continuous ones, or a
/// single constant.
class Basis {
public:
    struct Indicator { int n_states; };
    struct Fourier { FourierFeatureMap map; bool intercept; };
    struct Constant {};

    static Basis indicator(int n_states) { return Basis(Indicator{n_states}); }
    static Basis fourier(FourierFeatureMap map, bool intercept = true) {
        return Basis(Fourier{std::move(map), intercept});
    }
    static Basis constant() { return Basis(Constant{}); }

    bool is_indicator() const { return std::holds_alternative<Indicator>(impl_); }

    int dim() const {
        return std::visit(
            [](const auto& b) -> int {
                using B = std::decay_t<decltype(b)>;
                if constexpr (std::is_same_v<B, Indicator>) return b.n_states;
                else if constexpr (std::is_same_v<B, Fourier>) return b.map.n_features() + (b.intercept ? 1 : 0);
                else return 1;
            },
            impl_);
    }

    void transform(StateView s, double* out) const {
        std::visit(
            [&](const auto& b) {
                using B = std::decay_t<decltype(b)>;
                if constexpr (std::is_same_v<B, Indicator>) {
                    const int idx = state_index(s);
                    if (idx < 0 || idx >= b.n_states) throw IndexOutOfRange("indicator basis: state out of range");
                    std::fill(out, out + b.n_states, 0.0);
                    out[idx] = 1.0;
                } else if constexpr (std::is_same_v<B, Fourier>) {
                    if (b.intercept) *out++ = 1.0;
                    b.map.transform(s, out);
                } else {
                    out[0] = 1.0;
                }
            },
            impl_);
    }

    Eigen::VectorXd operator()(StateView s) const {
        Eigen::VectorXd v(dim());
        transform(s, v.data());
        return v;
    }

    json to_json() const {
        return std::visit(
            [](const auto& b) -> json {
                using B = std::decay_t<decltype(b)>;
                if constexpr (std::is_same_v<B, Indicator>) {
                    return {{"type", "indicator"}, {"n_states", b.n_states}};
                } else if constexpr (std::is_same_v<B, Fourier>) {
                    const auto& w = b.map.frequencies();
                    std::vector<double> flat(w.data(), w.data() + w.size());  // column-major
                    const auto& ph = b.map.phases();
                    return {{"type", "fourier"},
                            {"intercept", b.intercept},
                            {"n_features", b.map.n_features()},
                            {"input_dim", b.map.input_dim()},
                            {"bandwidth", b.map.bandwidth()},
                            {"frequencies_colmajor", flat},
                            {"phases", std::vector<double>(ph.data(), ph.data() + ph.size())}};
                } else {
                    return {{"type", "constant"}};
                }
            },
            impl_);
    }

    static Basis from_json(const json& j) {
        const auto type = j.at("type").get<std::string>();
        if (type == "indicator") return indicator(j.at("n_states").get<int>());
        if (type == "constant") return constant();
        if (type != "fourier") throw InvalidSpec("unknown basis type '" + type + "'");
        const int d = j.at("n_features").get<int>(), in = j.at("input_dim").get<int>();
        const auto flat = j.at("frequencies_colmajor").get<std::vector<double>>();
        const auto ph = j.at("phases").get<std::vector<double>>();
        Eigen::MatrixXd w = Eigen::Map<const Eigen::MatrixXd>(flat.data(), d, in);
        Eigen::VectorXd b = Eigen::Map<const Eigen::VectorXd>(ph.data(), d);
        return fourier(FourierFeatureMap(std::move(w), std::move(b), j.at("bandwidth").get<double>()),
                       j.at("intercept").get<bool>());
    }

private:
    explicit Basis(std::variant<Indicator, Fourier, Constant> impl) : impl_(std::move(impl)) {}
    std::variant<Indicator, Fourier, Constant> impl_;
};

// ---------------------------------------------------------------------------
// Penalized linear fits
// ---------------------------------------------------------------------------

struct LinearModel {
    Eigen::VectorXd weights;
    double lambda = 0.0;

    double predict(const Eigen::Ref<const Eigen::VectorXd>& x) const { return weights.dot(x); }
};

/// Factorizes (X^T X + lambda I) once so that many right-hand sides can be
/// solved against the same design. X must outlive the solver.
class RidgeSolver {
public:
    RidgeSolver(const Eigen::MatrixXd& x, double lambda) : x_(&x), lambda_(lambda) {
        if (lambda < 0.0) throw std::invalid_argument("ridge penalty must be nonnegative");
        Eigen::MatrixXd gram = x.transpose() * x;
        gram.diagonal().array() += lambda;
        if (lambda > 0.0) {
            llt_.compute(gram);
            use_llt_ = llt_.info() == Eigen::Success;
        }
        if (!use_llt_) {
            qr_.compute(gram);
            if (qr_.rank() < gram.rows()) throw SingularSystem("ridge system is singular (lambda = 0?)");
        }
    }

    Eigen::VectorXd solve(const Eigen::Ref<const Eigen::VectorXd>& y) const {
        const Eigen::VectorXd rhs = x_->transpose() * y;
        return use_llt_ ? Eigen::VectorXd(llt_.solve(rhs)) : Eigen::VectorXd(qr_.solve(rhs));
    }

    /// Solves for several targets at once (one per column).
    Eigen::MatrixXd solve_many(const Eigen::MatrixXd& ys) const {
        const Eigen::MatrixXd rhs = x_->transpose() * ys;
        return use_llt_ ? Eigen::MatrixXd(llt_.solve(rhs)) : Eigen::MatrixXd(qr_.solve(rhs));
    }

    double lambda() const { return lambda_; }

private:
    const Eigen::MatrixXd* x_;
    double lambda_;
    bool use_llt_ = false;
    Eigen::LLT<Eigen::MatrixXd> llt_;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_;
};

/// Solves (X^T X + lambda I) w = X^T y.
inline LinearModel ridge_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda) {
    if (x.rows() != y.size()) throw std::invalid_argument("ridge_fit: rows(X) != len(y)");
    RidgeSolver solver(x, lambda);
    return {solver.solve(y), lambda};
}

/// Ridge-penalized multinomial logistic regression (softmax over all
/// classes, one weight column per class).
struct MultinomialLogit {
    Eigen::MatrixXd weights;  // features x classes
    double lambda = 0.0;
    int iterations = 0;
    double gradient_norm = 0.0;
    bool converged = false;

    int n_classes() const { return static_cast<int>(weights.cols()); }

    void predict_proba(const double* x, double* out) const {
        const Eigen::Map<const Eigen::VectorXd> xv(x, weights.rows());
        Eigen::VectorXd z = weights.transpose() * xv;
        const double zmax = z.maxCoeff();
        double total = 0.0;
        for (Eigen::Index k = 0; k < z.size(); ++k) {
            out[k] = std::exp(z[k] - zmax);
            total += out[k];
        }
        for (Eigen::Index k = 0; k < z.size(); ++k) out[k] /= total;
    }

    Eigen::VectorXd predict_proba(const Eigen::VectorXd& x) const {
        Eigen::VectorXd out(n_classes());
        predict_proba(x.data(), out.data());
        return out;
    }

    json to_json() const {
        std::vector<double> flat(weights.data(), weights.data() + weights.size());
        return {{"rows", weights.rows()}, {"cols", weights.cols()}, {"weights_colmajor", flat},
                {"lambda", lambda}, {"iterations", iterations}, {"gradient_norm", gradient_norm},
                {"converged", converged}};
    }
    static MultinomialLogit from_json(const json& j) {
        MultinomialLogit m;
        const auto flat = j.at("weights_colmajor").get<std::vector<double>>();
        m.weights = Eigen::Map<const Eigen::MatrixXd>(flat.data(), j.at("rows").get<Eigen::Index>(),
                                                      j.at("cols").get<Eigen::Index>());
        m.lambda = j.at("lambda").get<double>();
        m.iterations = j.value("iterations", 0);
        m.gradient_norm = j.value("gradient_norm", 0.0);
        m.converged = j.value("converged", true);
        return m;
    }
};

/**
 * Maximizes sum_i log p(y_i|x_i) - (lambda/2)||W||^2 by damped Newton steps.
 * Stops when the per-sample gradient norm drops below `tol`; a fit that hits
 * `max_iter` is still returned with `converged == false`.
 */
inline MultinomialLogit logit_fit(const Eigen::MatrixXd& x, const std::vector<int>& labels, int n_classes,
                                  double lambda, int max_iter = 500, double tol = 1e-8) {
    const Eigen::Index n = x.rows(), p = x.cols();
    if (static_cast<std::size_t>(n) != labels.size()) throw std::invalid_argument("logit_fit: rows(X) != len(labels)");
    if (!(lambda > 0.0)) throw std::invalid_argument("logit_fit: lambda must be positive");
    std::vector<int> counts(static_cast<std::size_t>(n_classes), 0);
    for (int y : labels) {
        if (y < 0 || y >= n_classes) throw IndexOutOfRange("logit_fit: label out of range");
        ++counts[static_cast<std::size_t>(y)];
    }
    if (std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; }) < 2)
        throw std::invalid_argument("logit_fit: need at least two classes present");

    const int K = n_classes;
    MultinomialLogit model;
    model.lambda = lambda;
    model.weights = Eigen::MatrixXd::Zero(p, K);
    Eigen::MatrixXd y_onehot = Eigen::MatrixXd::Zero(n, K);
    for (Eigen::Index i = 0; i < n; ++i) y_onehot(i, labels[static_cast<std::size_t>(i)]) = 1.0;

    auto probabilities = [&](const Eigen::MatrixXd& w) {
        Eigen::MatrixXd z = x * w;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double zmax = z.row(i).maxCoeff();
            z.row(i) = (z.row(i).array() - zmax).exp();
            z.row(i) /= z.row(i).sum();
        }
        return z;
    };
    auto objective = [&](const Eigen::MatrixXd& w, const Eigen::MatrixXd& prob) {
        double ll = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) ll += std::log(std::max(prob(i, labels[static_cast<std::size_t>(i)]), 1e-300));
        return ll - 0.5 * lambda * w.squaredNorm();
    };

    Eigen::MatrixXd prob = probabilities(model.weights);
    double obj = objective(model.weights, prob);
    const double scale = 1.0 / static_cast<double>(n);
    for (int it = 0; it < max_iter; ++it) {
        const Eigen::MatrixXd grad = x.transpose() * (y_onehot - prob) - lambda * model.weights;
        model.gradient_norm = grad.norm() * scale;
        model.iterations = it;
        if (model.gradient_norm < tol) {
            model.converged = true;
            break;
        }
        // negative Hessian, blocks (k,l) = X^T diag(p_k (delta_kl - p_l)) X + lambda I
        Eigen::MatrixXd h = Eigen::MatrixXd::Zero(p * K, p * K);
        for (int k = 0; k < K; ++k) {
            for (int l = k; l < K; ++l) {
                Eigen::VectorXd wts = -prob.col(k).cwiseProduct(prob.col(l));
                if (k == l) wts += prob.col(k);
                const Eigen::MatrixXd block = x.transpose() * wts.asDiagonal() * x;
                h.block(k * p, l * p, p, p) = block;
                if (k != l) h.block(l * p, k * p, p, p) = block.transpose();
            }
        }
        h.diagonal().array() += lambda;
        const Eigen::VectorXd g = Eigen::Map<const Eigen::VectorXd>(grad.data(), grad.size());
        const Eigen::VectorXd step_vec = h.ldlt().solve(g);
        const Eigen::MatrixXd step = Eigen::Map<const Eigen::MatrixXd>(step_vec.data(), p, K);
        double t = 1.0;
        bool accepted = false;
        for (int ls = 0; ls < 40; ++ls) {
            const Eigen::MatrixXd trial = model.weights + t * step;
            const Eigen::MatrixXd trial_prob = probabilities(trial);
            const double trial_obj = objective(trial, trial_prob);
            if (trial_obj >= obj - 1e-12 * std::abs(obj)) {
                model.weights = trial;
                prob = trial_prob;
                obj = trial_obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) break;  // no ascent possible at machine precision
        model.iterations = it + 1;
    }
    if (!model.converged) {
        const Eigen::MatrixXd grad = x.transpose() * (y_onehot - prob) - lambda * model.weights;
        model.gradient_norm = grad.norm() * scale;
        model.converged = model.gradient_norm < tol;
    }
    return model;
}

}  // namespace cope
