#pragma once

#include <array>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "cope/common.hpp"
#include "cope/estimators.hpp"
#include "cope/mdp_model.hpp"
#include "cope/nuisance.hpp"

namespace cope {

namespace detail {

inline std::vector<double> policy_table(const TabularCmdpwm& spec, const Policy& pi) {
    if (pi.n_actions() != spec.n_actions()) throw InvalidSpec("policy and model disagree on the action count");
    std::vector<double> out(static_cast<std::size_t>(spec.n_states() * spec.n_actions()));
    for (int s = 0; s < spec.n_states(); ++s) {
        const double x = s;
        pi.pmf(StateView(&x, 1), {out.data() + s * spec.n_actions(), static_cast<std::size_t>(spec.n_actions())});
    }
    return out;
}

/// Confounder-marginalized quantities per (s, a, m).
struct Marginals {
    int ns, na, nm;
    std::vector<double> pa_star;  // [s][a]
    std::vector<double> rbar;     // [s][a][m]  E[R | m, a, s] under the front-door marginal
    std::vector<double> next;     // [s][a][m][s']

    explicit Marginals(const TabularCmdpwm& spec)
        : ns(spec.n_states()), na(spec.n_actions()), nm(spec.n_mediators()) {
        const int nr = spec.n_reward_levels();
        pa_star.resize(static_cast<std::size_t>(ns * na));
        rbar.assign(static_cast<std::size_t>(ns * na * nm), 0.0);
        next.assign(static_cast<std::size_t>(ns * na * nm * ns), 0.0);
        for (int s = 0; s < ns; ++s) {
            const auto pa = marginal_behavior_policy(spec, s);
            std::copy(pa.begin(), pa.end(), pa_star.begin() + s * na);
            for (int a = 0; a < na; ++a)
                for (int m = 0; m < nm; ++m) {
                    const auto sr = marginal_transition(spec, m, a, s);
                    const std::size_t cell = static_cast<std::size_t>((s * na + a) * nm + m);
                    for (int s1 = 0; s1 < ns; ++s1)
                        for (int r = 0; r < nr; ++r) {
                            const double p = sr[static_cast<std::size_t>(s1 * nr + r)];
                            rbar[cell] += p * spec.reward(r);
                            next[cell * ns + static_cast<std::size_t>(s1)] += p;
                        }
                }
        }
    }
};

/// weight[s][a][m] = sum_{a*} pi(a*|s) p_m(m|a*,s) p_a*(a|s)
inline std::vector<double> front_door_weights(const TabularCmdpwm& spec, const Marginals& mg,
                                              const std::vector<double>& pi) {
    std::vector<double> w(static_cast<std::size_t>(mg.ns * mg.na * mg.nm), 0.0);
    for (int s = 0; s < mg.ns; ++s)
        for (int m = 0; m < mg.nm; ++m) {
            double mpi = 0.0;
            for (int a2 = 0; a2 < mg.na; ++a2) mpi += pi[static_cast<std::size_t>(s * mg.na + a2)] * spec.p_m(m, a2, s);
            for (int a = 0; a < mg.na; ++a)
                w[static_cast<std::size_t>((s * mg.na + a) * mg.nm + m)] = mpi * mg.pa_star[static_cast<std::size_t>(s * mg.na + a)];
        }
    return w;
}

}  // namespace detail

struct ExactQ {
    std::vector<double> q;  // [s][a][m]
    std::vector<double> v;  // [s]
    int iterations = 0;
    double residual = 0.0;
};

/// Fixed point of Q = rbar* + gamma sum_{s'} p*(s'|m,a,s) V(s') with V from the
/// front-door identity.
inline ExactQ exact_q(const TabularCmdpwm& spec, const Policy& pi, double gamma, double tol = 1e-12,
                      int max_iter = 100000) {
    detail::check_gamma(gamma);
    const detail::Marginals mg(spec);
    const auto w = detail::front_door_weights(spec, mg, detail::policy_table(spec, pi));
    const std::size_t cells = static_cast<std::size_t>(mg.na * mg.nm);
    ExactQ out;
    out.q.assign(static_cast<std::size_t>(mg.ns) * cells, 0.0);
    out.v.assign(static_cast<std::size_t>(mg.ns), 0.0);
    std::vector<double> fresh(out.q.size());
    for (int it = 1; it <= max_iter; ++it) {
        double change = 0.0;
        for (std::size_t c = 0; c < out.q.size(); ++c) {
            double x = mg.rbar[c];
            for (int s1 = 0; s1 < mg.ns; ++s1) x += gamma * mg.next[c * mg.ns + static_cast<std::size_t>(s1)] * out.v[static_cast<std::size_t>(s1)];
            fresh[c] = x;
            change = std::max(change, std::abs(x - out.q[c]));
        }
        out.q.swap(fresh);
        for (int s = 0; s < mg.ns; ++s) {
            double v = 0.0;
            for (std::size_t c = 0; c < cells; ++c) v += w[s * cells + c] * out.q[s * cells + c];
            out.v[static_cast<std::size_t>(s)] = v;
        }
        out.iterations = it;
        out.residual = change;
        if (change < tol) break;
    }
    return out;
}

inline double exact_value(const TabularCmdpwm& spec, const Policy& pi, double gamma) {
    const auto eq = exact_q(spec, pi, gamma);
    double eta = 0.0;
    for (int s = 0; s < spec.n_states(); ++s) eta += spec.nu(s) * eq.v[static_cast<std::size_t>(s)];
    return eta;
}

/// Target-policy state kernel P[s][s'] through the front-door marginals.
inline Eigen::MatrixXd target_kernel(const TabularCmdpwm& spec, const Policy& pi) {
    const detail::Marginals mg(spec);
    const auto w = detail::front_door_weights(spec, mg, detail::policy_table(spec, pi));
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(mg.ns, mg.ns);
    const std::size_t cells = static_cast<std::size_t>(mg.na * mg.nm);
    for (int s = 0; s < mg.ns; ++s)
        for (std::size_t c = 0; c < cells; ++c)
            for (int s1 = 0; s1 < mg.ns; ++s1)
                p(s, s1) += w[s * cells + c] * mg.next[(s * cells + c) * mg.ns + static_cast<std::size_t>(s1)];
    return p;
}

/// Behavior state kernel with u, a, m, r marginalized.
inline Eigen::MatrixXd behavior_kernel(const TabularCmdpwm& spec) {
    const int ns = spec.n_states(), nr = spec.n_reward_levels();
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(ns, ns);
    for (int s = 0; s < ns; ++s)
        for (int u = 0; u < spec.n_confounders(); ++u)
            for (int a = 0; a < spec.n_actions(); ++a)
                for (int m = 0; m < spec.n_mediators(); ++m) {
                    const double w = spec.p_u(u, s) * spec.p_a(a, s, u) * spec.p_m(m, a, s);
                    for (int s1 = 0; s1 < ns; ++s1)
                        for (int r = 0; r < nr; ++r) p(s, s1) += w * spec.p_sr(s1, r, m, a, s, u);
                }
    return p;
}

struct TruncatedValue {
    double value = 0.0;
    double tail_bound = 0.0;  // gamma^h R_max / (1 - gamma)
    int horizon = 0;
};

/// Forward evaluation of sum_{t<h} gamma^t E[R_t] under do(A ~ pi), using the
/// front-door marginals step by step.
inline TruncatedValue truncated_front_door_value(const TabularCmdpwm& spec, const Policy& pi, double gamma,
                                                 int horizon) {
    detail::check_gamma(gamma);
    const detail::Marginals mg(spec);
    const auto w = detail::front_door_weights(spec, mg, detail::policy_table(spec, pi));
    const std::size_t cells = static_cast<std::size_t>(mg.na * mg.nm);
    std::vector<double> d(spec.initial_distribution()), nd(d.size());
    TruncatedValue out;
    out.horizon = horizon;
    double disc = 1.0;
    for (int t = 0; t < horizon; ++t) {
        std::fill(nd.begin(), nd.end(), 0.0);
        double er = 0.0;
        for (int s = 0; s < mg.ns; ++s)
            for (std::size_t c = 0; c < cells; ++c) {
                const double p = d[static_cast<std::size_t>(s)] * w[s * cells + c];
                er += p * mg.rbar[s * cells + c];
                for (int s1 = 0; s1 < mg.ns; ++s1) nd[static_cast<std::size_t>(s1)] += p * mg.next[(s * cells + c) * mg.ns + static_cast<std::size_t>(s1)];
            }
        out.value += disc * er;
        disc *= gamma;
        d.swap(nd);
    }
    out.tail_bound = disc * spec.reward_bound() / (1.0 - gamma);
    return out;
}

/// Stationary law of a row-stochastic kernel; NotErgodic unless its 64th
/// power is entrywise positive.
inline std::vector<double> stationary_distribution(const Eigen::MatrixXd& kernel, double tol = 1e-12,
                                                   int max_iter = 1000000) {
    Eigen::MatrixXd power = kernel;
    for (int k = 0; k < 6; ++k) power = power * power;
    if ((power.array() <= 0.0).any()) throw NotErgodic("state kernel is not irreducible and aperiodic");
    const auto n = kernel.rows();
    Eigen::RowVectorXd p = Eigen::RowVectorXd::Constant(n, 1.0 / static_cast<double>(n));
    for (int it = 0; it < max_iter; ++it) {
        Eigen::RowVectorXd q = p * kernel;
        q /= q.sum();
        const double diff = (q - p).cwiseAbs().sum();
        p = q;
        if (diff < tol) break;
    }
    return {p.data(), p.data() + n};
}

inline std::vector<double> stationary_distribution(const TabularCmdpwm& spec) {
    return stationary_distribution(behavior_kernel(spec));
}

/// omega = d / p_inf with d = (1 - gamma) nu + gamma P^T d.
inline std::vector<double> exact_omega(const TabularCmdpwm& spec, const Policy& pi, double gamma,
                                       const std::vector<double>& nu) {
    detail::check_gamma(gamma);
    const int ns = spec.n_states();
    if (static_cast<int>(nu.size()) != ns) throw InvalidSpec("initial distribution has the wrong size");
    const auto p_inf = stationary_distribution(spec);
    const Eigen::MatrixXd p = target_kernel(spec, pi);
    const Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(ns, ns) - gamma * p.transpose();
    const Eigen::VectorXd rhs = (1.0 - gamma) * Eigen::Map<const Eigen::VectorXd>(nu.data(), ns);
    const Eigen::VectorXd d = lhs.partialPivLu().solve(rhs);
    std::vector<double> omega(static_cast<std::size_t>(ns));
    for (int s = 0; s < ns; ++s) omega[static_cast<std::size_t>(s)] = d[s] / p_inf[static_cast<std::size_t>(s)];
    return omega;
}

inline std::vector<double> exact_omega(const TabularCmdpwm& spec, const Policy& pi, double gamma) {
    return exact_omega(spec, pi, gamma, spec.initial_distribution());
}

/// Exact tables packaged as a NuisanceSet (clip 0). `nu` defaults to the
/// model's initial law; omega is computed for the same law.
inline NuisanceSet oracle_nuisances(const TabularCmdpwm& spec, const Policy& pi, double gamma,
                                    std::vector<double> nu = {}) {
    if (nu.empty()) nu = spec.initial_distribution();
    const detail::Marginals mg(spec);
    const auto eq = exact_q(spec, pi, gamma);
    auto q = QFunction::table(mg.ns, mg.na, mg.nm, eq.q);
    q.iterations = eq.iterations;
    q.final_change = eq.residual;
    return {std::move(q), RatioFunction::tabular(exact_omega(spec, pi, gamma, nu)),
            CondPmf::table(mg.ns, 1, mg.na, mg.pa_star, 0.0),
            CondPmf::table(mg.ns, mg.na, mg.nm, spec.raw_p_m(), 0.0), InitialDistribution::tabular(nu)};
}

/// Expectations of (psi1, psi2, psi3) under the one-step law
/// w(s) p_u(u|s) p_a(a|s,u) p_m(m|a,s) p_sr(s',r|m,a,s,u), summed exactly.
/// `state_weights` defaults to the behavior stationary law.
inline std::array<double, 3> exact_psi_mean(const TabularCmdpwm& spec, const Policy& pi, double gamma,
                                            const NuisanceSet& nuis, std::vector<double> state_weights = {}) {
    detail::check_gamma(gamma);
    if (state_weights.empty()) state_weights = stationary_distribution(spec);
    const int ns = spec.n_states(), nr = spec.n_reward_levels();
    std::vector<StateTerms> terms;
    for (int s = 0; s < ns; ++s) {
        const double x = s;
        terms.push_back(state_terms(StateView(&x, 1), nuis, pi));
    }
    std::array<double, 3> out{0.0, 0.0, 0.0};
    for (int s = 0; s < ns; ++s)
        for (int u = 0; u < spec.n_confounders(); ++u)
            for (int a = 0; a < spec.n_actions(); ++a)
                for (int m = 0; m < spec.n_mediators(); ++m) {
                    const double w = state_weights[static_cast<std::size_t>(s)] * spec.p_u(u, s) * spec.p_a(a, s, u) *
                                     spec.p_m(m, a, s);
                    if (w == 0.0) continue;
                    for (int s1 = 0; s1 < ns; ++s1)
                        for (int r = 0; r < nr; ++r) {
                            const double p = w * spec.p_sr(s1, r, m, a, s, u);
                            if (p == 0.0) continue;
                            const auto psi = augmentation_terms(terms[static_cast<std::size_t>(s)],
                                                                terms[static_cast<std::size_t>(s1)], a, m,
                                                                spec.reward(r), gamma);
                            for (int j = 0; j < 3; ++j) out[static_cast<std::size_t>(j)] += p * psi[static_cast<std::size_t>(j)];
                        }
                }
    return out;
}

struct OracleResults {
    int n_states = 0, n_actions = 0, n_mediators = 0;
    double gamma = 0.0;
    std::vector<double> pa_star;    // [s][a]
    std::vector<double> pm;         // [s][a][m]
    std::vector<double> p_sr_star;  // [s][a][m][s'][r]
    std::vector<double> q;          // [s][a][m]
    std::vector<double> v;          // [s]
    double eta = 0.0;
    std::vector<double> p_inf;
    std::vector<double> omega;
    int q_iterations = 0;
    double q_residual = 0.0;

    json to_json() const {
        return {{"n_states", n_states}, {"n_actions", n_actions}, {"n_mediators", n_mediators},
                {"gamma", gamma},       {"eta", eta},             {"V", v},
                {"Q", q},               {"omega", omega},         {"p_inf", p_inf},
                {"pa_star", pa_star},   {"pm", pm},               {"p_sr_star", p_sr_star},
                {"convergence", {{"q_iterations", q_iterations}, {"q_residual", q_residual}}}};
    }
};

inline OracleResults compute_oracle(const TabularCmdpwm& spec, const Policy& pi, double gamma) {
    OracleResults r;
    r.n_states = spec.n_states();
    r.n_actions = spec.n_actions();
    r.n_mediators = spec.n_mediators();
    r.gamma = gamma;
    const detail::Marginals mg(spec);
    r.pa_star = mg.pa_star;
    r.pm = spec.raw_p_m();
    for (int s = 0; s < r.n_states; ++s)
        for (int a = 0; a < r.n_actions; ++a)
            for (int m = 0; m < r.n_mediators; ++m) {
                const auto sr = marginal_transition(spec, m, a, s);
                r.p_sr_star.insert(r.p_sr_star.end(), sr.begin(), sr.end());
            }
    const auto eq = exact_q(spec, pi, gamma);
    r.q = eq.q;
    r.v = eq.v;
    r.q_iterations = eq.iterations;
    r.q_residual = eq.residual;
    for (int s = 0; s < r.n_states; ++s) r.eta += spec.nu(s) * r.v[static_cast<std::size_t>(s)];
    r.p_inf = stationary_distribution(spec);
    r.omega = exact_omega(spec, pi, gamma);
    return r;
}

}  // namespace cope
