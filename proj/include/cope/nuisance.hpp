#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "cope/common.hpp"
#include "cope/features.hpp"
#include "cope/mdp_model.hpp"

namespace cope {

struct NuisanceConfig {
    int n_features = 100;
    double ridge = 1e-3;        // fitted-Q ridge penalty
    double logit_ridge = 1.0;   // penalty for the conditional pmf models
    double clip = 1e-3;         // floor on every estimated probability
    double smoothing = 0.5;     // Laplace pseudo-count in tabular mode
    double fqe_tol = 1e-6;
    int fqe_max_iter = 500;
    double omega_ridge = 1e-6;
    double logit_tol = 1e-8;
    int logit_max_iter = 500;
    std::uint64_t feature_seed = 0;

    json to_json() const {
        return {{"n_features", n_features}, {"ridge", ridge},         {"logit_ridge", logit_ridge},
                {"clip", clip},             {"smoothing", smoothing}, {"fqe_tol", fqe_tol},
                {"fqe_max_iter", fqe_max_iter}, {"omega_ridge", omega_ridge}, {"logit_tol", logit_tol},
                {"logit_max_iter", logit_max_iter}, {"feature_seed", feature_seed}};
    }

    static NuisanceConfig from_json(const json& j) {
        NuisanceConfig c;
        c.n_features = j.value("n_features", c.n_features);
        c.ridge = j.value("ridge", c.ridge);
        c.logit_ridge = j.value("logit_ridge", c.logit_ridge);
        c.clip = j.value("clip", c.clip);
        c.smoothing = j.value("smoothing", c.smoothing);
        c.fqe_tol = j.value("fqe_tol", c.fqe_tol);
        c.fqe_max_iter = j.value("fqe_max_iter", c.fqe_max_iter);
        c.omega_ridge = j.value("omega_ridge", c.omega_ridge);
        c.logit_tol = j.value("logit_tol", c.logit_tol);
        c.logit_max_iter = j.value("logit_max_iter", c.logit_max_iter);
        c.feature_seed = j.value("feature_seed", c.feature_seed);
        if (c.n_features < 1 || c.ridge < 0 || !(c.logit_ridge > 0) || !(c.clip > 0 && c.clip < 1) ||
            c.smoothing < 0 || !(c.fqe_tol > 0) || c.fqe_max_iter < 1 || c.omega_ridge < 0)
            throw ConfigError("invalid nuisance configuration");
        return c;
    }
};

// ---------------------------------------------------------------------------
// Flattened view of a dataset
// ---------------------------------------------------------------------------

/// Every logged state (S_{i,0..T_i}) in one pool, plus transition records
/// pointing into it. Estimators evaluate nuisances once per pooled state.
struct FlatData {
    int dim = 1;
    std::vector<double> coords;
    std::vector<std::size_t> traj_offset;  // pool index of S_{i,0}
    std::vector<std::size_t> state, next;  // per transition
    std::vector<int> action, mediator, traj;
    std::vector<double> reward;

    explicit FlatData(const Dataset& data) : dim(data.state_dim) {
        data.validate();
        std::size_t pool = 0;
        for (std::size_t i = 0; i < data.trajectories.size(); ++i) {
            const auto& tr = data.trajectories[i];
            traj_offset.push_back(pool);
            coords.insert(coords.end(), tr.states.begin(), tr.states.end());
            for (int t = 0; t < tr.length(); ++t) {
                state.push_back(pool + static_cast<std::size_t>(t));
                next.push_back(pool + static_cast<std::size_t>(t) + 1);
                action.push_back(tr.actions[t]);
                mediator.push_back(tr.mediators[t]);
                traj.push_back(static_cast<int>(i));
                reward.push_back(tr.rewards[t]);
            }
            pool += static_cast<std::size_t>(tr.length()) + 1;
        }
    }

    std::size_t pool_size() const { return coords.size() / static_cast<std::size_t>(dim); }
    std::size_t n_transitions() const { return state.size(); }
    StateView pool_state(std::size_t k) const {
        return {coords.data() + k * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }

    /// Basis features of every pooled state, one row each.
    Eigen::MatrixXd features(const Basis& basis) const {
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> out(
            static_cast<Eigen::Index>(pool_size()), basis.dim());
        for (std::size_t k = 0; k < pool_size(); ++k) basis.transform(pool_state(k), out.row(static_cast<Eigen::Index>(k)).data());
        return out;
    }
};

// ---------------------------------------------------------------------------
// Conditional pmfs
// ---------------------------------------------------------------------------

/**
 * p(outcome | given, s) over a finite outcome set, with a clip floor.
 * `given` is the conditioning action for p_m and unused (0) for p_a*.
 * Backed by a count table, per-given multinomial logits on a state basis,
 * or an arbitrary callable. Raw outputs sum to one; clipped outputs are
 * max(raw, clip).
 */
class CondPmf {
public:
    using Function = std::function<void(StateView, int, std::span<double>)>;

    struct Table {
        int n_states;
        std::vector<double> values;  // [s][given][outcome]
    };
    struct Logit {
        Basis basis;
        std::vector<MultinomialLogit> models;      // per given; unused where `fixed` is set
        std::vector<std::vector<double>> fixed;    // per given; non-empty -> constant pmf
    };

    CondPmf() = default;

    static CondPmf table(int n_states, int n_given, int n_outcomes, std::vector<double> values, double clip) {
        if (values.size() != static_cast<std::size_t>(n_states) * n_given * n_outcomes)
            throw InvalidSpec("conditional pmf table has the wrong size");
        CondPmf p(n_given, n_outcomes, clip);
        p.impl_ = std::make_shared<const Impl>(Table{n_states, std::move(values)});
        p.check_table();
        return p;
    }

    static CondPmf logit(int n_given, int n_outcomes, Logit model, double clip) {
        CondPmf p(n_given, n_outcomes, clip);
        p.impl_ = std::make_shared<const Impl>(std::move(model));
        return p;
    }

    static CondPmf function(int n_given, int n_outcomes, Function fn, double clip) {
        CondPmf p(n_given, n_outcomes, clip);
        p.impl_ = std::make_shared<const Impl>(std::move(fn));
        return p;
    }

    int n_given() const { return n_given_; }
    int n_outcomes() const { return n_outcomes_; }
    double clip() const { return clip_; }

    /// Pre-clip pmf for one conditioning value.
    void raw(StateView s, int given, std::span<double> out) const {
        std::visit(
            [&](const auto& b) {
                using B = std::decay_t<decltype(b)>;
                if constexpr (std::is_same_v<B, Table>) {
                    const int row = state_index(s);
                    if (row < 0 || row >= b.n_states) throw IndexOutOfRange("pmf table: state out of range");
                    const auto off = (static_cast<std::size_t>(row) * n_given_ + given) * n_outcomes_;
                    std::copy_n(b.values.begin() + static_cast<std::ptrdiff_t>(off), n_outcomes_, out.begin());
                } else if constexpr (std::is_same_v<B, Logit>) {
                    const auto& fixed = b.fixed[static_cast<std::size_t>(given)];
                    if (!fixed.empty()) {
                        std::copy(fixed.begin(), fixed.end(), out.begin());
                    } else {
                        const Eigen::VectorXd x = b.basis(s);
                        b.models[static_cast<std::size_t>(given)].predict_proba(x.data(), out.data());
                    }
                } else {
                    b(s, given, out);
                }
            },
            *impl_);
    }

    std::vector<double> raw(StateView s, int given = 0) const {
        std::vector<double> out(static_cast<std::size_t>(n_outcomes_));
        raw(s, given, out);
        return out;
    }

    /// Clipped pmf for every conditioning value, laid out [given][outcome].
    void evaluate_all(StateView s, std::span<double> out) const {
        if (const auto* lg = std::get_if<Logit>(impl_.get())) {
            const Eigen::VectorXd x = lg->basis(s);
            for (int g = 0; g < n_given_; ++g) {
                auto dst = out.subspan(static_cast<std::size_t>(g) * n_outcomes_, static_cast<std::size_t>(n_outcomes_));
                const auto& fixed = lg->fixed[static_cast<std::size_t>(g)];
                if (!fixed.empty()) std::copy(fixed.begin(), fixed.end(), dst.begin());
                else lg->models[static_cast<std::size_t>(g)].predict_proba(x.data(), dst.data());
            }
        } else {
            for (int g = 0; g < n_given_; ++g)
                raw(s, g, out.subspan(static_cast<std::size_t>(g) * n_outcomes_, static_cast<std::size_t>(n_outcomes_)));
        }
        for (double& p : out) p = std::max(p, clip_);
    }

    double operator()(int outcome, StateView s, int given = 0) const {
        std::vector<double> tmp(static_cast<std::size_t>(n_outcomes_));
        raw(s, given, tmp);
        return std::max(tmp[static_cast<std::size_t>(outcome)], clip_);
    }

    json to_json() const {
        json j{{"n_given", n_given_}, {"n_outcomes", n_outcomes_}, {"clip", clip_}};
        std::visit(
            [&](const auto& b) {
                using B = std::decay_t<decltype(b)>;
                if constexpr (std::is_same_v<B, Table>) {
                    j["type"] = "table";
                    j["n_states"] = b.n_states;
                    j["values"] = b.values;
                } else if constexpr (std::is_same_v<B, Logit>) {
                    j["type"] = "logit";
                    j["basis"] = b.basis.to_json();
                    json models = json::array();
                    for (std::size_t g = 0; g < b.models.size(); ++g)
                        models.push_back(b.fixed[g].empty() ? json{{"logit", b.models[g].to_json()}}
                                                            : json{{"fixed", b.fixed[g]}});
                    j["models"] = models;
                } else {
                    throw Error("callable-backed pmfs cannot be serialized");
                }
            },
            *impl_);
        return j;
    }

    static CondPmf from_json(const json& j) {
        const int n_given = j.at("n_given").get<int>(), n_out = j.at("n_outcomes").get<int>();
        const double clip = j.at("clip").get<double>();
        const auto type = j.at("type").get<std::string>();
        if (type == "table")
            return table(j.at("n_states").get<int>(), n_given, n_out, j.at("values").get<std::vector<double>>(), clip);
        if (type != "logit") throw InvalidSpec("unknown pmf type '" + type + "'");
        Logit lg{Basis::from_json(j.at("basis")), {}, {}};
        for (const auto& m : j.at("models")) {
            if (m.contains("fixed")) {
                lg.models.emplace_back();
                lg.fixed.push_back(m.at("fixed").get<std::vector<double>>());
            } else {
                lg.models.push_back(MultinomialLogit::from_json(m.at("logit")));
                lg.fixed.emplace_back();
            }
        }
        return logit(n_given, n_out, std::move(lg), clip);
    }

private:
    using Impl = std::variant<Table, Logit, Function>;

    CondPmf(int n_given, int n_outcomes, double clip) : n_given_(n_given), n_outcomes_(n_outcomes), clip_(clip) {
        if (n_given < 1 || n_outcomes < 1) throw InvalidSpec("conditional pmf needs positive dimensions");
        if (!(clip >= 0.0 && clip < 1.0)) throw InvalidSpec("clip floor must lie in [0,1)");
    }

    void check_table() const {
        const auto& t = std::get<Table>(*impl_);
        for (std::size_t row = 0; row < t.values.size() / static_cast<std::size_t>(n_outcomes_); ++row) {
            double sum = 0.0;
            for (int k = 0; k < n_outcomes_; ++k) {
                const double p = t.values[row * static_cast<std::size_t>(n_outcomes_) + static_cast<std::size_t>(k)];
                if (!(p >= 0.0)) throw InvalidSpec("conditional pmf entry is negative");
                sum += p;
            }
            if (std::abs(sum - 1.0) > 1e-9) throw InvalidSpec("conditional pmf row does not sum to one");
        }
    }

    int n_given_ = 1;
    int n_outcomes_ = 1;
    double clip_ = 0.0;
    std::shared_ptr<const Impl> impl_;
};

// ---------------------------------------------------------------------------
// Q-function, ratio function, initial distribution
// ---------------------------------------------------------------------------

/// Q(m, a, s) over cells c = a * n_mediators + m. Mediator-free baselines use
/// n_mediators = 1.
class QFunction {
public:
    struct Table { int n_states; std::vector<double> values; };  // [s][a][m]
    struct Linear { Basis basis; Eigen::MatrixXd weights; };     // basis dim x cells

    static QFunction table(int n_states, int n_actions, int n_mediators, std::vector<double> values) {
        if (values.size() != static_cast<std::size_t>(n_states) * n_actions * n_mediators)
            throw InvalidSpec("Q table has the wrong size");
        QFunction q(n_actions, n_mediators);
        q.impl_ = std::make_shared<const Impl>(Table{n_states, std::move(values)});
        return q;
    }
    static QFunction linear(Basis basis, int n_actions, int n_mediators, Eigen::MatrixXd weights) {
        if (weights.rows() != basis.dim() || weights.cols() != n_actions * n_mediators)
            throw InvalidSpec("Q weights have the wrong shape");
        QFunction q(n_actions, n_mediators);
        q.impl_ = std::make_shared<const Impl>(Linear{std::move(basis), std::move(weights)});
        return q;
    }
    static QFunction constant(int n_actions, int n_mediators, double c) {
        return linear(Basis::constant(), n_actions, n_mediators,
                      Eigen::MatrixXd::Constant(1, n_actions * n_mediators, c));
    }

    int n_actions() const { return n_actions_; }
    int n_mediators() const { return n_mediators_; }
    int n_cells() const { return n_actions_ * n_mediators_; }

    /// Q at every cell for one state, laid out [a][m].
    void values(StateView s, std::span<double> out) const {
        std::visit(
            [&](const auto& b) {
                using B = std::decay_t<decltype(b)>;
                if constexpr (std::is_same_v<B, Table>) {
                    const int row = state_index(s);
                    if (row < 0 || row >= b.n_states) throw IndexOutOfRange("Q table: state out of range");
                    std::copy_n(b.values.begin() + static_cast<std::ptrdiff_t>(row) * n_cells(), n_cells(), out.begin());
                } else {
                    const Eigen::VectorXd x = b.basis(s);
                    Eigen::Map<Eigen::VectorXd>(out.data(), n_cells()) = b.weights.transpose() * x;
                }
            },
            *impl_);
    }

    double operator()(int m, int a, StateView s) const {
        std::vector<double> tmp(static_cast<std::size_t>(n_cells()));
        values(s, tmp);
        return tmp[static_cast<std::size_t>(a * n_mediators_ + m)];
    }

    int iterations = 0;
    double final_change = 0.0;
    bool converged = true;

    json to_json() const {
        json j{{"n_actions", n_actions_}, {"n_mediators", n_mediators_}, {"iterations", iterations},
               {"final_change", final_change}, {"converged", converged}};
        std::visit(
            [&](const auto& b) {
                using B = std::decay_t<decltype(b)>;
                if constexpr (std::is_same_v<B, Table>) {
                    j["type"] = "table";
                    j["n_states"] = b.n_states;
                    j["values"] = b.values;
                } else {
                    j["type"] = "linear";
                    j["basis"] = b.basis.to_json();
                    j["weights_colmajor"] = std::vector<double>(b.weights.data(), b.weights.data() + b.weights.size());
                }
            },
            *impl_);
        return j;
    }

    static QFunction from_json(const json& j) {
        const int na = j.at("n_actions").get<int>(), nm = j.at("n_mediators").get<int>();
        QFunction q = [&] {
            if (j.at("type") == "table")
                return table(j.at("n_states").get<int>(), na, nm, j.at("values").get<std::vector<double>>());
            Basis basis = Basis::from_json(j.at("basis"));
            const auto flat = j.at("weights_colmajor").get<std::vector<double>>();
            Eigen::MatrixXd w = Eigen::Map<const Eigen::MatrixXd>(flat.data(), basis.dim(), na * nm);
            return linear(std::move(basis), na, nm, std::move(w));
        }();
        q.iterations = j.value("iterations", 0);
        q.final_change = j.value("final_change", 0.0);
        q.converged = j.value("converged", true);
        return q;
    }

private:
    using Impl = std::variant<Table, Linear>;
    QFunction(int n_actions, int n_mediators) : n_actions_(n_actions), n_mediators_(n_mediators) {}

    int n_actions_;
    int n_mediators_;
    std::shared_ptr<const Impl> impl_;
};

/// omega(s) = xi(s)^T beta
struct RatioFunction {
    Basis basis = Basis::constant();
    Eigen::VectorXd beta = Eigen::VectorXd::Ones(1);

    double operator()(StateView s) const { return basis(s).dot(beta); }

    static RatioFunction constant(double c) { return {Basis::constant(), Eigen::VectorXd::Constant(1, c)}; }
    static RatioFunction tabular(const std::vector<double>& values) {
        return {Basis::indicator(static_cast<int>(values.size())),
                Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()))};
    }

    json to_json() const {
        return {{"basis", basis.to_json()}, {"beta", std::vector<double>(beta.data(), beta.data() + beta.size())}};
    }
    static RatioFunction from_json(const json& j) {
        const auto b = j.at("beta").get<std::vector<double>>();
        return {Basis::from_json(j.at("basis")),
                Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()))};
    }
};

/// Weighted point masses over states: the empirical law of {S_{i,0}} or an
/// explicit tabular pmf.
struct InitialDistribution {
    int dim = 1;
    std::vector<double> states;   // atoms, row-major
    std::vector<double> weights;
    bool empirical = false;  // true when the atoms are the logged S_{i,0}

    std::size_t size() const { return weights.size(); }
    StateView atom(std::size_t k) const {
        return {states.data() + k * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }

    static InitialDistribution tabular(const std::vector<double>& pmf) {
        InitialDistribution d;
        for (std::size_t s = 0; s < pmf.size(); ++s) {
            d.states.push_back(static_cast<double>(s));
            d.weights.push_back(pmf[s]);
        }
        return d;
    }

    /// Aggregated pmf over n_states (tabular atoms only).
    std::vector<double> pmf(int n_states) const {
        std::vector<double> out(static_cast<std::size_t>(n_states), 0.0);
        for (std::size_t k = 0; k < size(); ++k) out[static_cast<std::size_t>(state_index(atom(k)))] += weights[k];
        return out;
    }

    json to_json() const {
        return {{"dim", dim}, {"states", states}, {"weights", weights}, {"empirical", empirical}};
    }
    static InitialDistribution from_json(const json& j) {
        return {j.at("dim").get<int>(), j.at("states").get<std::vector<double>>(),
                j.at("weights").get<std::vector<double>>(), j.value("empirical", false)};
    }
};

/// Everything the estimators consume.
struct NuisanceSet {
    QFunction q;
    RatioFunction omega;
    CondPmf pa_star;
    CondPmf pm;
    InitialDistribution nu;

    json to_json() const {
        return {{"q", q.to_json()}, {"omega", omega.to_json()}, {"pa_star", pa_star.to_json()},
                {"pm", pm.to_json()}, {"nu", nu.to_json()}};
    }
    static NuisanceSet from_json(const json& j) {
        return {QFunction::from_json(j.at("q")), RatioFunction::from_json(j.at("omega")),
                CondPmf::from_json(j.at("pa_star")), CondPmf::from_json(j.at("pm")),
                InitialDistribution::from_json(j.at("nu"))};
    }
};

// ---------------------------------------------------------------------------
// Estimation
// ---------------------------------------------------------------------------

/// Indicator basis for tabular data; intercept plus Fourier features fitted
/// on all logged states otherwise.
inline Basis default_basis(const Dataset& data, const NuisanceConfig& cfg) {
    if (data.tabular()) return Basis::indicator(data.n_states);
    const FlatData flat(data);
    Eigen::MatrixXd inputs(static_cast<Eigen::Index>(flat.pool_size()), flat.dim);
    for (std::size_t k = 0; k < flat.pool_size(); ++k)
        for (int j = 0; j < flat.dim; ++j) inputs(static_cast<Eigen::Index>(k), j) = flat.pool_state(k)[static_cast<std::size_t>(j)];
    return Basis::fourier(fit_fourier_map(inputs, cfg.n_features, cfg.feature_seed), true);
}

namespace detail {

/// Smoothed frequency table p(outcome | given, s) from tabular transitions.
inline CondPmf count_table(const FlatData& fd, int n_states, int n_given, int n_outcomes,
                           const std::vector<int>& given, const std::vector<int>& outcome, double alpha, double clip) {
    std::vector<double> counts(static_cast<std::size_t>(n_states) * n_given * n_outcomes, 0.0);
    for (std::size_t k = 0; k < fd.n_transitions(); ++k) {
        const int s = state_index(fd.pool_state(fd.state[k]));
        counts[(static_cast<std::size_t>(s) * n_given + given[k]) * n_outcomes + outcome[k]] += 1.0;
    }
    for (std::size_t row = 0; row < counts.size() / static_cast<std::size_t>(n_outcomes); ++row) {
        double total = 0.0;
        for (int o = 0; o < n_outcomes; ++o) total += counts[row * n_outcomes + o];
        const double denom = total + alpha * n_outcomes;
        for (int o = 0; o < n_outcomes; ++o) {
            double& c = counts[row * n_outcomes + o];
            c = denom > 0.0 ? (c + alpha) / denom : 1.0 / n_outcomes;
        }
    }
    return CondPmf::table(n_states, n_given, n_outcomes, std::move(counts), clip);
}

/// Per-given multinomial logits of `outcome` on basis features of S.
inline CondPmf logit_models(const FlatData& fd, const Basis& basis, int n_given, int n_outcomes,
                            const std::vector<int>& given, const std::vector<int>& outcome, const NuisanceConfig& cfg) {
    const Eigen::MatrixXd pool_x = fd.features(basis);
    CondPmf::Logit lg{basis, std::vector<MultinomialLogit>(static_cast<std::size_t>(n_given)),
                      std::vector<std::vector<double>>(static_cast<std::size_t>(n_given))};
    for (int g = 0; g < n_given; ++g) {
        std::vector<std::size_t> rows;
        std::vector<int> labels;
        std::vector<double> freq(static_cast<std::size_t>(n_outcomes), 0.0);
        for (std::size_t k = 0; k < fd.n_transitions(); ++k) {
            if (given[k] != g) continue;
            rows.push_back(fd.state[k]);
            labels.push_back(outcome[k]);
            freq[static_cast<std::size_t>(outcome[k])] += 1.0;
        }
        const auto present = std::count_if(freq.begin(), freq.end(), [](double c) { return c > 0; });
        if (present < 2) {
            // one class (or none) observed: smoothed constant pmf
            const double denom = static_cast<double>(rows.size()) + cfg.smoothing * n_outcomes;
            for (double& f : freq) f = denom > 0 ? (f + cfg.smoothing) / denom : 1.0 / n_outcomes;
            lg.fixed[static_cast<std::size_t>(g)] = freq;
            continue;
        }
        Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), pool_x.cols());
        for (std::size_t r = 0; r < rows.size(); ++r) x.row(static_cast<Eigen::Index>(r)) = pool_x.row(static_cast<Eigen::Index>(rows[r]));
        lg.models[static_cast<std::size_t>(g)] =
            logit_fit(x, labels, n_outcomes, cfg.logit_ridge, cfg.logit_max_iter, cfg.logit_tol);
    }
    return CondPmf::logit(n_given, n_outcomes, std::move(lg), cfg.clip);
}

/// Fitted-Q iteration over cells c = a * n_m + m.
///   cell[k]          cell of transition k
///   next_weights     (transitions x cells): V(S'_k) = sum_c next_weights(k,c) Q(c, S'_k)
inline QFunction fitted_q(const FlatData& fd, const Basis& basis, bool tabular, int n_states, int n_actions,
                          int n_mediators, const std::vector<int>& cell, const Eigen::MatrixXd& next_weights,
                          double gamma, double ridge, double tol, int max_iter) {
    const int n_cells = n_actions * n_mediators;
    const auto n = static_cast<Eigen::Index>(fd.n_transitions());
    const Eigen::Map<const Eigen::VectorXd> reward(fd.reward.data(), n);

    if (tabular) {
        std::vector<double> q(static_cast<std::size_t>(n_states) * n_cells, 0.0), fresh(q.size());
        std::vector<double> count(q.size(), 0.0);
        std::vector<std::size_t> slot(static_cast<std::size_t>(n)), next_row(static_cast<std::size_t>(n));
        for (Eigen::Index k = 0; k < n; ++k) {
            const auto s = static_cast<std::size_t>(state_index(fd.pool_state(fd.state[static_cast<std::size_t>(k)])));
            slot[static_cast<std::size_t>(k)] = s * n_cells + static_cast<std::size_t>(cell[static_cast<std::size_t>(k)]);
            next_row[static_cast<std::size_t>(k)] =
                static_cast<std::size_t>(state_index(fd.pool_state(fd.next[static_cast<std::size_t>(k)]))) * n_cells;
            count[slot[static_cast<std::size_t>(k)]] += 1.0;
        }
        int it = 0;
        double change = 0.0;
        bool converged = false;
        for (it = 1; it <= max_iter; ++it) {
            std::fill(fresh.begin(), fresh.end(), 0.0);
            for (Eigen::Index k = 0; k < n; ++k) {
                double v = 0.0;
                const std::size_t base = next_row[static_cast<std::size_t>(k)];
                for (int c = 0; c < n_cells; ++c) v += next_weights(k, c) * q[base + static_cast<std::size_t>(c)];
                fresh[slot[static_cast<std::size_t>(k)]] += reward[k] + gamma * v;
            }
            change = 0.0;
            for (std::size_t j = 0; j < q.size(); ++j) {
                if (count[j] > 0.0) {
                    fresh[j] /= count[j];
                    change = std::max(change, std::abs(fresh[j] - q[j]));
                }
            }
            q.swap(fresh);
            if (change < tol) {
                converged = true;
                break;
            }
        }
        QFunction out = QFunction::table(n_states, n_actions, n_mediators, std::move(q));
        out.iterations = std::min(it, max_iter);
        out.final_change = change;
        out.converged = converged;
        return out;
    }

    const Eigen::MatrixXd pool_x = fd.features(basis);
    const Eigen::Index p = pool_x.cols();
    Eigen::MatrixXd x_now(n, p), x_next(n, p);
    for (Eigen::Index k = 0; k < n; ++k) {
        x_now.row(k) = pool_x.row(static_cast<Eigen::Index>(fd.state[static_cast<std::size_t>(k)]));
        x_next.row(k) = pool_x.row(static_cast<Eigen::Index>(fd.next[static_cast<std::size_t>(k)]));
    }
    std::vector<std::vector<Eigen::Index>> rows(static_cast<std::size_t>(n_cells));
    for (Eigen::Index k = 0; k < n; ++k) rows[static_cast<std::size_t>(cell[static_cast<std::size_t>(k)])].push_back(k);
    std::vector<Eigen::MatrixXd> designs(static_cast<std::size_t>(n_cells));
    std::vector<std::unique_ptr<RidgeSolver>> solvers(static_cast<std::size_t>(n_cells));
    for (int c = 0; c < n_cells; ++c) {
        const auto& r = rows[static_cast<std::size_t>(c)];
        if (r.empty()) continue;
        auto& xc = designs[static_cast<std::size_t>(c)];
        xc.resize(static_cast<Eigen::Index>(r.size()), p);
        for (std::size_t j = 0; j < r.size(); ++j) xc.row(static_cast<Eigen::Index>(j)) = x_now.row(r[j]);
        solvers[static_cast<std::size_t>(c)] = std::make_unique<RidgeSolver>(xc, ridge);
    }
    Eigen::MatrixXd theta = Eigen::MatrixXd::Zero(p, n_cells);
    Eigen::VectorXd fitted_old = Eigen::VectorXd::Zero(n), fitted_new(n);
    int it = 0;
    double change = 0.0;
    bool converged = false;
    for (it = 1; it <= max_iter; ++it) {
        const Eigen::VectorXd v_next = (x_next * theta).cwiseProduct(next_weights).rowwise().sum();
        const Eigen::VectorXd target = reward + gamma * v_next;
        for (int c = 0; c < n_cells; ++c) {
            const auto& r = rows[static_cast<std::size_t>(c)];
            if (r.empty()) continue;
            Eigen::VectorXd y(static_cast<Eigen::Index>(r.size()));
            for (std::size_t j = 0; j < r.size(); ++j) y[static_cast<Eigen::Index>(j)] = target[r[j]];
            theta.col(c) = solvers[static_cast<std::size_t>(c)]->solve(y);
            const Eigen::VectorXd f = designs[static_cast<std::size_t>(c)] * theta.col(c);
            for (std::size_t j = 0; j < r.size(); ++j) fitted_new[r[j]] = f[static_cast<Eigen::Index>(j)];
        }
        change = (fitted_new - fitted_old).cwiseAbs().maxCoeff();
        fitted_old = fitted_new;
        if (!std::isfinite(change)) break;
        if (change < tol) {
            converged = true;
            break;
        }
    }
    QFunction out = QFunction::linear(basis, n_actions, n_mediators, std::move(theta));
    out.iterations = std::min(it, max_iter);
    out.final_change = change;
    out.converged = converged;
    return out;
}

/// Closed-form linear ratio: solves sum_k {xi(S_k) - gamma w_k xi(S'_k)} xi(S_k)^T beta / n
/// + lambda beta = (1 - gamma) E_nu xi, i.e. L(xi^T beta, xi_j) = 0 for every j
/// when lambda = 0.
inline RatioFunction solve_ratio(const FlatData& fd, const Basis& basis, const std::vector<double>& transition_weight,
                                 const InitialDistribution& nu, double gamma, double lambda) {
    const Eigen::MatrixXd pool_x = fd.features(basis);
    const Eigen::Index p = pool_x.cols();
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(p, p);
    const auto n = fd.n_transitions();
    Eigen::MatrixXd lhs(p, static_cast<Eigen::Index>(n)), rhs(p, static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < n; ++k) {
        const auto now = pool_x.row(static_cast<Eigen::Index>(fd.state[k]));
        const auto nxt = pool_x.row(static_cast<Eigen::Index>(fd.next[k]));
        lhs.col(static_cast<Eigen::Index>(k)) = (now - gamma * transition_weight[k] * nxt).transpose();
        rhs.col(static_cast<Eigen::Index>(k)) = now.transpose();
    }
    m = lhs * rhs.transpose() / static_cast<double>(n);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
    for (std::size_t k = 0; k < nu.size(); ++k) b += nu.weights[k] * basis(nu.atom(k));
    b *= (1.0 - gamma);
    m.diagonal().array() += lambda;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(m);
    if (!lu.isInvertible()) throw SingularSystem("ratio system is singular; increase the omega ridge");
    return {basis, lu.solve(b)};
}

}  // namespace detail

/// p_a*(a|s): smoothed counts (tabular) or a multinomial logit on basis
/// features of S (continuous).
inline CondPmf estimate_pa_star(const Dataset& data, const Basis& basis, const NuisanceConfig& cfg) {
    const FlatData fd(data);
    const std::vector<int> none(fd.n_transitions(), 0);
    if (data.tabular())
        return detail::count_table(fd, data.n_states, 1, data.n_actions, none, fd.action, cfg.smoothing, cfg.clip);
    return detail::logit_models(fd, basis, 1, data.n_actions, none, fd.action, cfg);
}

/// p_m(m|a,s), conditioning on (A, S).
inline CondPmf estimate_pm(const Dataset& data, const Basis& basis, const NuisanceConfig& cfg) {
    const FlatData fd(data);
    if (data.tabular())
        return detail::count_table(fd, data.n_states, data.n_actions, data.n_mediators, fd.action, fd.mediator,
                                   cfg.smoothing, cfg.clip);
    return detail::logit_models(fd, basis, data.n_actions, data.n_mediators, fd.action, fd.mediator, cfg);
}

/// Empirical law of {S_{i,0}}; aggregated into a pmf for tabular data.
inline InitialDistribution estimate_nu(const Dataset& data) {
    if (data.trajectories.empty()) throw EmptyDataset("dataset has no trajectories");
    const double w = 1.0 / static_cast<double>(data.size());
    if (data.tabular()) {
        std::vector<double> pmf(static_cast<std::size_t>(data.n_states), 0.0);
        for (const auto& tr : data.trajectories) pmf[static_cast<std::size_t>(state_index(tr.state(0)))] += w;
        auto d = InitialDistribution::tabular(pmf);
        d.empirical = true;
        return d;
    }
    InitialDistribution d;
    d.dim = data.state_dim;
    d.empirical = true;
    for (const auto& tr : data.trajectories) {
        const auto s = tr.state(0);
        d.states.insert(d.states.end(), s.begin(), s.end());
        d.weights.push_back(w);
    }
    return d;
}

/// Per-pooled-state evaluation of pi, clipped p_m and clipped p_a*.
struct PooledPmfs {
    int n_actions = 0, n_mediators = 0;
    std::vector<double> pi;  // [k][a]
    std::vector<double> pm;  // [k][a][m]
    std::vector<double> pa;  // [k][a]

    PooledPmfs(const FlatData& fd, const Policy& policy, const CondPmf* pm_model, const CondPmf* pa_model, int n_a,
               int n_m)
        : n_actions(n_a), n_mediators(n_m) {
        const std::size_t n = fd.pool_size();
        pi.resize(n * n_a);
        if (pm_model) pm.resize(n * n_a * n_m);
        if (pa_model) pa.resize(n * n_a);
        for (std::size_t k = 0; k < n; ++k) {
            const auto s = fd.pool_state(k);
            policy.pmf(s, {pi.data() + k * n_a, static_cast<std::size_t>(n_a)});
            if (pm_model) pm_model->evaluate_all(s, {pm.data() + k * n_a * n_m, static_cast<std::size_t>(n_a * n_m)});
            if (pa_model) pa_model->evaluate_all(s, {pa.data() + k * n_a, static_cast<std::size_t>(n_a)});
        }
    }

    double pi_at(std::size_t k, int a) const { return pi[k * n_actions + a]; }
    double pm_at(std::size_t k, int a, int m) const { return pm[(k * n_actions + a) * n_mediators + m]; }
    double pa_at(std::size_t k, int a) const { return pa[k * n_actions + a]; }
    /// sum_a pi(a|s) p_m(m|a,s)
    double mediator_under_pi(std::size_t k, int m) const {
        double v = 0.0;
        for (int a = 0; a < n_actions; ++a) v += pi_at(k, a) * pm_at(k, a, m);
        return v;
    }
    /// rho(m, a, s)
    double rho(std::size_t k, int m, int a) const { return mediator_under_pi(k, m) / pm_at(k, a, m); }
};

/**
 * Fitted-Q evaluation of the mediated Bellman equation:
 *   Q_{l+1} = argmin sum {R + gamma V_l(S') - Q(M,A,S)}^2,
 *   V_l(s') = sum_{m,a,a*} Q_l(m,a,s') p_m(m|a*,s') p_a*(a|s') pi(a*|s').
 * Starts from Q = 0; per-cell means in tabular mode, per-(m,a) ridge
 * regressions on the basis otherwise.
 */
inline QFunction fitted_q_evaluation(const Dataset& data, const Policy& pi, const CondPmf& pm, const CondPmf& pa_star,
                                     double gamma, const Basis& basis, const NuisanceConfig& cfg) {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in [0,1)");
    const FlatData fd(data);
    const int na = data.n_actions, nm = data.n_mediators;
    const PooledPmfs pmfs(fd, pi, &pm, &pa_star, na, nm);
    const auto n = fd.n_transitions();
    Eigen::MatrixXd next_w(static_cast<Eigen::Index>(n), na * nm);
    std::vector<int> cell(n);
    for (std::size_t k = 0; k < n; ++k) {
        const auto s1 = fd.next[k];
        for (int a = 0; a < na; ++a)
            for (int m = 0; m < nm; ++m)
                next_w(static_cast<Eigen::Index>(k), a * nm + m) = pmfs.pa_at(s1, a) * pmfs.mediator_under_pi(s1, m);
        cell[k] = fd.action[k] * nm + fd.mediator[k];
    }
    return detail::fitted_q(fd, basis, data.tabular(), data.n_states, na, nm, cell, next_w, gamma,
                            data.tabular() ? 0.0 : cfg.ridge, cfg.fqe_tol, cfg.fqe_max_iter);
}

/// Linear-class solution of the ratio minimax problem with
/// rho_hat = sum_a pi(a|S) p_m(M|a,S) / p_m(M|A,S).
inline RatioFunction estimate_omega(const Dataset& data, const Policy& pi, const CondPmf& pm,
                                    const InitialDistribution& nu, double gamma, const Basis& basis,
                                    const NuisanceConfig& cfg) {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in [0,1)");
    const FlatData fd(data);
    const PooledPmfs pmfs(fd, pi, &pm, nullptr, data.n_actions, data.n_mediators);
    std::vector<double> w(fd.n_transitions());
    for (std::size_t k = 0; k < w.size(); ++k) w[k] = pmfs.rho(fd.state[k], fd.mediator[k], fd.action[k]);
    return detail::solve_ratio(fd, basis, w, nu, gamma, cfg.omega_ridge);
}

/// Empirical L(omega, f) =
///   mean_{i,t} omega(S){f(S) - gamma rho_hat f(S')} - (1 - gamma) E_nu f.
inline double evaluate_L(const std::function<double(StateView)>& omega, const std::function<double(StateView)>& f,
                         const Dataset& data, const Policy& pi, const CondPmf& pm, const InitialDistribution& nu,
                         double gamma) {
    const FlatData fd(data);
    const PooledPmfs pmfs(fd, pi, &pm, nullptr, data.n_actions, data.n_mediators);
    double total = 0.0;
    for (std::size_t k = 0; k < fd.n_transitions(); ++k) {
        const auto s = fd.pool_state(fd.state[k]);
        const double rho = pmfs.rho(fd.state[k], fd.mediator[k], fd.action[k]);
        total += omega(s) * (f(s) - gamma * rho * f(fd.pool_state(fd.next[k])));
    }
    double nu_term = 0.0;
    for (std::size_t k = 0; k < nu.size(); ++k) nu_term += nu.weights[k] * f(nu.atom(k));
    return total / static_cast<double>(fd.n_transitions()) - (1.0 - gamma) * nu_term;
}

/// Fits every nuisance: p_a*, p_m, nu, then Q and omega.
inline NuisanceSet fit_nuisances(const Dataset& data, const Policy& pi, double gamma, const NuisanceConfig& cfg) {
    const Basis basis = default_basis(data, cfg);
    CondPmf pa = estimate_pa_star(data, basis, cfg);
    CondPmf pm = estimate_pm(data, basis, cfg);
    InitialDistribution nu = estimate_nu(data);
    QFunction q = fitted_q_evaluation(data, pi, pm, pa, gamma, basis, cfg);
    RatioFunction omega = estimate_omega(data, pi, pm, nu, gamma, basis, cfg);
    return {std::move(q), std::move(omega), std::move(pa), std::move(pm), std::move(nu)};
}

}  // namespace cope
