#pragma once

#include <array>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "cope/common.hpp"
#include "cope/dataset_io.hpp"
#include "cope/mdp_model.hpp"
#include "cope/nuisance.hpp"

namespace cope {

// ---------------------------------------------------------------------------
// Result types
// ---------------------------------------------------------------------------

struct ValueEstimate {
    std::string method;
    double estimate = 0.0;
    std::vector<double> contributions;  // eta_i
    double se = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    double alpha = 0.05;
    double gamma = 0.0;
    int n = 0;
    int t = 0;  // longest trajectory

    static std::string csv_header() { return "method,N,T,gamma,estimate,se,ci_lo,ci_hi"; }
    std::string csv_row() const {
        return method + ',' + std::to_string(n) + ',' + std::to_string(t) + ',' + format_double(gamma) + ',' +
               format_double(estimate) + ',' + format_double(se) + ',' + format_double(ci_lo) + ',' +
               format_double(ci_hi);
    }
    json to_json(bool with_contributions = false) const {
        json j{{"method", method}, {"N", n},         {"T", t},         {"gamma", gamma}, {"alpha", alpha},
               {"estimate", estimate}, {"se", se}, {"ci_lo", ci_lo}, {"ci_hi", ci_hi}};
        if (with_contributions) j["contributions"] = contributions;
        return j;
    }
};

struct DiffEstimate {
    double estimate = 0.0;
    std::vector<double> contributions;  // per-trajectory differences
    double se = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    double alpha = 0.05;
    double gamma = 0.0;
    double delta = 0.0;
    int n = 0;
    int t = 0;

    std::string csv_row() const {
        return std::string("DIFF,") + std::to_string(n) + ',' + std::to_string(t) + ',' + format_double(gamma) + ',' +
               format_double(estimate) + ',' + format_double(se) + ',' + format_double(ci_lo) + ',' +
               format_double(ci_hi);
    }
    json to_json(bool with_contributions = false) const {
        json j{{"method", "DIFF"}, {"N", n},         {"T", t},         {"gamma", gamma}, {"alpha", alpha},
               {"delta", delta},   {"estimate", estimate}, {"se", se}, {"ci_lo", ci_lo}, {"ci_hi", ci_hi}};
        if (with_contributions) j["contributions"] = contributions;
        return j;
    }
};

namespace detail {

inline int longest(const Dataset& data) {
    int t = 0;
    for (const auto& tr : data.trajectories) t = std::max(t, tr.length());
    return t;
}

inline void require_trajectories(const Dataset& data) {
    if (data.size() < 2) throw InsufficientTrajectories("at least two trajectories are needed for a variance");
}

inline void check_gamma(double gamma) {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in [0,1)");
}

/// Wald interval around `point` from per-trajectory contributions.
inline ValueEstimate wald(std::string method, double point, std::vector<double> contributions, const Dataset& data,
                          double gamma, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0,1)");
    ValueEstimate v;
    v.method = std::move(method);
    v.estimate = point;
    v.n = data.size();
    v.t = longest(data);
    v.gamma = gamma;
    v.alpha = alpha;
    v.se = std::sqrt(sample_variance(contributions) / v.n);
    const double z = two_sided_z(alpha);
    v.ci_lo = point - z * v.se;
    v.ci_hi = point + z * v.se;
    v.contributions = std::move(contributions);
    return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// COPE pieces
// ---------------------------------------------------------------------------

inline double rho(const CondPmf& pm, const Policy& pi, int m, int a, StateView s) {
    const auto pi_s = pi.pmf(s);
    double num = 0.0;
    for (int a2 = 0; a2 < pi.n_actions(); ++a2) num += pi_s[static_cast<std::size_t>(a2)] * pm(m, s, a2);
    return num / pm(m, s, a);
}

/// Nuisance values at one state, everything the psi terms need.
struct StateTerms {
    int n_actions = 0, n_mediators = 0;
    std::vector<double> pi, pa, pm, q;  // pm and q laid out [a][m]
    std::vector<double> mpi;            // sum_a' pi(a') p_m(m|a')
    double omega = 0.0;
    double v = 0.0;                     // front-door value

    double pm_at(int a, int m) const { return pm[static_cast<std::size_t>(a * n_mediators + m)]; }
    double q_at(int a, int m) const { return q[static_cast<std::size_t>(a * n_mediators + m)]; }
};

inline StateTerms state_terms(StateView s, const NuisanceSet& nuis, const Policy& pi) {
    StateTerms st;
    const int na = nuis.pm.n_given(), nm = nuis.pm.n_outcomes();
    st.n_actions = na;
    st.n_mediators = nm;
    st.pi.resize(static_cast<std::size_t>(na));
    st.pa.resize(static_cast<std::size_t>(na));
    st.pm.resize(static_cast<std::size_t>(na * nm));
    st.q.resize(static_cast<std::size_t>(na * nm));
    st.mpi.assign(static_cast<std::size_t>(nm), 0.0);
    pi.pmf(s, st.pi);
    nuis.pa_star.evaluate_all(s, st.pa);
    nuis.pm.evaluate_all(s, st.pm);
    nuis.q.values(s, st.q);
    st.omega = nuis.omega(s);
    for (int a = 0; a < na; ++a)
        for (int m = 0; m < nm; ++m) st.mpi[static_cast<std::size_t>(m)] += st.pi[static_cast<std::size_t>(a)] * st.pm_at(a, m);
    for (int m = 0; m < nm; ++m) {
        double inner = 0.0;
        for (int a = 0; a < na; ++a) inner += st.pa[static_cast<std::size_t>(a)] * st.q_at(a, m);
        st.v += st.mpi[static_cast<std::size_t>(m)] * inner;
    }
    return st;
}

/// (psi1, psi2, psi3) for one transition (S, A, M, R, S').
inline std::array<double, 3> augmentation_terms(const StateTerms& now, const StateTerms& next, int a, int m, double r,
                                                double gamma) {
    const double kappa = 1.0 / (1.0 - gamma);
    const auto A = static_cast<std::size_t>(a);
    const double rho_v = now.mpi[static_cast<std::size_t>(m)] / now.pm_at(a, m);
    const double psi1 = kappa * now.omega * rho_v * (r + gamma * next.v - now.q_at(a, m));

    double inner2 = 0.0;
    for (int a2 = 0; a2 < now.n_actions; ++a2) {
        double proj = 0.0;
        for (int m2 = 0; m2 < now.n_mediators; ++m2) proj += now.pm_at(a, m2) * now.q_at(a2, m2);
        inner2 += now.pa[static_cast<std::size_t>(a2)] * (now.q_at(a2, m) - proj);
    }
    const double psi2 = kappa * now.omega * now.pi[A] / now.pa[A] * inner2;

    double inner3 = 0.0;
    for (int m2 = 0; m2 < now.n_mediators; ++m2) {
        double avg = 0.0;
        for (int a2 = 0; a2 < now.n_actions; ++a2) avg += now.q_at(a2, m2) * now.pa[static_cast<std::size_t>(a2)];
        inner3 += now.mpi[static_cast<std::size_t>(m2)] * (now.q_at(a, m2) - avg);
    }
    const double psi3 = kappa * now.omega * inner3;
    return {psi1, psi2, psi3};
}

inline std::array<double, 3> augmentation_terms(StateView s, int a, int m, double r, StateView s_next,
                                                const NuisanceSet& nuis, const Policy& pi, double gamma) {
    return augmentation_terms(state_terms(s, nuis, pi), state_terms(s_next, nuis, pi), a, m, r, gamma);
}

/// Direct estimator: sum over nu-hat of the front-door value.
inline double psi0(const NuisanceSet& nuis, const Policy& pi) {
    double total = 0.0;
    for (std::size_t k = 0; k < nuis.nu.size(); ++k) total += nuis.nu.weights[k] * state_terms(nuis.nu.atom(k), nuis, pi).v;
    return total;
}

namespace detail {

/// Per-pooled-state terms for a whole dataset.
inline std::vector<StateTerms> pooled_terms(const FlatData& fd, const NuisanceSet& nuis, const Policy& pi) {
    std::vector<StateTerms> out;
    out.reserve(fd.pool_size());
    for (std::size_t k = 0; k < fd.pool_size(); ++k) out.push_back(state_terms(fd.pool_state(k), nuis, pi));
    return out;
}

/// Initial-state part of eta_i: psi0 plus the trajectory's deviation from the
/// empirical mean when nu-hat is the empirical law of S_{i,0}.
inline std::vector<double> initial_contributions(const FlatData& fd, const std::vector<StateTerms>& terms,
                                                 const NuisanceSet& nuis, double p0) {
    const std::size_t n = fd.traj_offset.size();
    std::vector<double> out(n, p0);
    if (!nuis.nu.empirical) return out;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += terms[fd.traj_offset[i]].v;
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = p0 + terms[fd.traj_offset[i]].v - mean;
    return out;
}

/// Global-sum point value plus per-trajectory eta_i for a per-transition term.
template <class F>
std::pair<double, std::vector<double>> aggregate(const FlatData& fd, std::vector<double> base, double base_point,
                                                 F&& term) {
    const std::size_t n = fd.traj_offset.size();
    std::vector<double> sums(n, 0.0);
    std::vector<int> counts(n, 0);
    double total = 0.0;
    for (std::size_t k = 0; k < fd.n_transitions(); ++k) {
        const double x = term(k);
        total += x;
        sums[static_cast<std::size_t>(fd.traj[k])] += x;
        ++counts[static_cast<std::size_t>(fd.traj[k])];
    }
    for (std::size_t i = 0; i < n; ++i)
        if (counts[i] > 0) base[i] += sums[i] / counts[i];
    const double point = base_point + (fd.n_transitions() ? total / static_cast<double>(fd.n_transitions()) : 0.0);
    return {point, std::move(base)};
}

}  // namespace detail

/// eta-hat = psi0 + (sum T_i)^{-1} sum_{i,t} (psi1 + psi2 + psi3), Wald CI from eta_i.
inline ValueEstimate cope_estimate(const Dataset& data, const NuisanceSet& nuis, const Policy& pi, double gamma,
                                   double alpha) {
    detail::check_gamma(gamma);
    detail::require_trajectories(data);
    const FlatData fd(data);
    const auto terms = detail::pooled_terms(fd, nuis, pi);
    const double p0 = psi0(nuis, pi);
    auto [point, eta] = detail::aggregate(fd, detail::initial_contributions(fd, terms, nuis, p0), p0, [&](std::size_t k) {
        const auto psi = augmentation_terms(terms[fd.state[k]], terms[fd.next[k]], fd.action[k], fd.mediator[k],
                                            fd.reward[k], gamma);
        return psi[0] + psi[1] + psi[2];
    });
    return detail::wald("COPE", point, std::move(eta), data, gamma, alpha);
}

/// (1 - gamma)^{-1} (sum T_i)^{-1} sum R omega(S) rho(M, A, S).
inline ValueEstimate mis_estimate(const Dataset& data, const RatioFunction& omega, const CondPmf& pm,
                                  const Policy& pi, double gamma, double alpha) {
    detail::check_gamma(gamma);
    detail::require_trajectories(data);
    const FlatData fd(data);
    const PooledPmfs pmfs(fd, pi, &pm, nullptr, data.n_actions, data.n_mediators);
    std::vector<double> w(fd.pool_size());
    for (std::size_t k = 0; k < fd.pool_size(); ++k) w[k] = omega(fd.pool_state(k));
    const double kappa = 1.0 / (1.0 - gamma);
    auto [point, eta] = detail::aggregate(fd, std::vector<double>(fd.traj_offset.size(), 0.0), 0.0, [&](std::size_t k) {
        return kappa * fd.reward[k] * w[fd.state[k]] * pmfs.rho(fd.state[k], fd.mediator[k], fd.action[k]);
    });
    return detail::wald("COPE-IS", point, std::move(eta), data, gamma, alpha);
}

// ---------------------------------------------------------------------------
// Unconfounded baselines
// ---------------------------------------------------------------------------

/// S~_t = (S_t, M_{t-1}) with M_{-1} = 0. Tabular states are re-indexed as
/// s + n_states * m_prev; continuous states gain a trailing coordinate.
inline Dataset mediator_augmented(const Dataset& data) {
    data.validate();
    Dataset out = data;
    const bool tab = data.tabular();
    if (tab) out.n_states = data.n_states * data.n_mediators;
    else out.state_dim = data.state_dim + 1;
    for (std::size_t i = 0; i < data.trajectories.size(); ++i) {
        const auto& src = data.trajectories[i];
        Trajectory tr;
        tr.state_dim = out.state_dim;
        int m_prev = 0;
        auto lift = [&](StateView s) {
            std::vector<double> x(s.begin(), s.end());
            if (tab) x[0] = static_cast<double>(state_index(s) + data.n_states * m_prev);
            else x.push_back(static_cast<double>(m_prev));
            return x;
        };
        for (int t = 0; t < src.length(); ++t) {
            tr.push_step(lift(src.state(t)), src.actions[t], src.mediators[t], src.rewards[t]);
            m_prev = src.mediators[t];
        }
        tr.set_terminal(lift(src.terminal_state()));
        out.trajectories[i] = std::move(tr);
    }
    return out;
}

/// Target policy on the augmented state space, ignoring the mediator part.
inline Policy mediator_augmented_policy(const Policy& pi, const Dataset& original) {
    if (original.tabular()) {
        const int ns = original.n_states;
        return Policy::from_function(pi.n_actions(), [pi, ns](StateView s, std::span<double> out) {
            const double base = static_cast<double>(state_index(s) % ns);
            pi.pmf(StateView(&base, 1), out);
        });
    }
    return Policy::from_function(pi.n_actions(), [pi](StateView s, std::span<double> out) {
        pi.pmf(s.first(s.size() - 1), out);
    });
}

struct BaselineConfig {
    bool reg = true, mis = true, drl = true;
    bool with_mediator_in_state = false;
};

/// Fitted nuisances of the unconfounded model: Q(a, s) and omega with the
/// policy ratio pi / p_a*.
struct UnconfoundedNuisances {
    QFunction q = QFunction::constant(1, 1, 0.0);
    RatioFunction omega;
    CondPmf pa_star;
    InitialDistribution nu;
};

inline UnconfoundedNuisances fit_unconfounded(const Dataset& data, const Policy& pi, double gamma,
                                              const NuisanceConfig& cfg) {
    detail::check_gamma(gamma);
    const Basis basis = default_basis(data, cfg);
    UnconfoundedNuisances u;
    u.pa_star = estimate_pa_star(data, basis, cfg);
    u.nu = estimate_nu(data);
    const FlatData fd(data);
    const int na = data.n_actions;
    const PooledPmfs pmfs(fd, pi, nullptr, &u.pa_star, na, 1);
    const auto n = fd.n_transitions();
    Eigen::MatrixXd next_w(static_cast<Eigen::Index>(n), na);
    std::vector<double> ratio(n);
    for (std::size_t k = 0; k < n; ++k) {
        for (int a = 0; a < na; ++a) next_w(static_cast<Eigen::Index>(k), a) = pmfs.pi_at(fd.next[k], a);
        ratio[k] = pmfs.pi_at(fd.state[k], fd.action[k]) / pmfs.pa_at(fd.state[k], fd.action[k]);
    }
    u.q = detail::fitted_q(fd, basis, data.tabular(), data.n_states, na, 1, fd.action, next_w, gamma,
                           data.tabular() ? 0.0 : cfg.ridge, cfg.fqe_tol, cfg.fqe_max_iter);
    u.omega = detail::solve_ratio(fd, basis, ratio, u.nu, gamma, cfg.omega_ridge);
    return u;
}

/// REG, MIS and DRL under the no-confounding model; -M variants when the
/// mediator is folded into the state.
inline std::vector<ValueEstimate> baseline_estimates(const Dataset& data, const Policy& pi, double gamma, double alpha,
                                                     const NuisanceConfig& cfg, const BaselineConfig& which = {}) {
    detail::check_gamma(gamma);
    detail::require_trajectories(data);
    const Dataset work = which.with_mediator_in_state ? mediator_augmented(data) : data;
    const Policy policy = which.with_mediator_in_state ? mediator_augmented_policy(pi, data) : pi;
    const std::string suffix = which.with_mediator_in_state ? "-M" : "";
    const auto u = fit_unconfounded(work, policy, gamma, cfg);

    const FlatData fd(work);
    const int na = work.n_actions;
    const PooledPmfs pmfs(fd, policy, nullptr, &u.pa_star, na, 1);
    std::vector<double> v(fd.pool_size()), q(fd.pool_size() * na), w(fd.pool_size());
    for (std::size_t k = 0; k < fd.pool_size(); ++k) {
        u.q.values(fd.pool_state(k), {q.data() + k * na, static_cast<std::size_t>(na)});
        for (int a = 0; a < na; ++a) v[k] += pmfs.pi_at(k, a) * q[k * na + a];
        w[k] = u.omega(fd.pool_state(k));
    }
    const std::size_t n = fd.traj_offset.size();
    std::vector<double> reg(n);
    for (std::size_t i = 0; i < n; ++i) reg[i] = v[fd.traj_offset[i]];
    const double reg_point = mean_of(reg);
    const double kappa = 1.0 / (1.0 - gamma);
    auto ratio = [&](std::size_t k) {
        return pmfs.pi_at(fd.state[k], fd.action[k]) / pmfs.pa_at(fd.state[k], fd.action[k]);
    };

    std::vector<ValueEstimate> out;
    if (which.reg) out.push_back(detail::wald("REG" + suffix, reg_point, reg, work, gamma, alpha));
    if (which.mis) {
        auto [point, eta] = detail::aggregate(fd, std::vector<double>(n, 0.0), 0.0, [&](std::size_t k) {
            return kappa * fd.reward[k] * w[fd.state[k]] * ratio(k);
        });
        out.push_back(detail::wald("MIS" + suffix, point, std::move(eta), work, gamma, alpha));
    }
    if (which.drl) {
        auto [point, eta] = detail::aggregate(fd, reg, reg_point, [&](std::size_t k) {
            const double td = fd.reward[k] + gamma * v[fd.next[k]] - q[fd.state[k] * na + static_cast<std::size_t>(fd.action[k])];
            return kappa * w[fd.state[k]] * ratio(k) * td;
        });
        out.push_back(detail::wald("DRL" + suffix, point, std::move(eta), work, gamma, alpha));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Value difference
// ---------------------------------------------------------------------------

/// CI for eta^{pi2} - eta^{pi1} from per-trajectory COPE differences, with
/// the sampling variance floored at delta^2.
inline DiffEstimate value_difference_ci(const Dataset& data, const NuisanceSet& nuis1, const Policy& pi1,
                                        const NuisanceSet& nuis2, const Policy& pi2, double gamma, double alpha,
                                        double delta = 0.0) {
    if (!(delta >= 0.0)) throw ConfigError("variance floor must be non-negative");
    const auto e1 = cope_estimate(data, nuis1, pi1, gamma, alpha);
    const auto e2 = cope_estimate(data, nuis2, pi2, gamma, alpha);
    DiffEstimate d;
    d.n = e1.n;
    d.t = e1.t;
    d.gamma = gamma;
    d.alpha = alpha;
    d.delta = delta;
    d.estimate = e2.estimate - e1.estimate;
    d.contributions.resize(e1.contributions.size());
    for (std::size_t i = 0; i < d.contributions.size(); ++i)
        d.contributions[i] = e2.contributions[i] - e1.contributions[i];
    const double var = std::max(sample_variance(d.contributions), delta * delta);
    d.se = std::sqrt(var / d.n);
    const double z = two_sided_z(alpha);
    d.ci_lo = d.estimate - z * d.se;
    d.ci_hi = d.estimate + z * d.se;
    return d;
}

}  // namespace cope
