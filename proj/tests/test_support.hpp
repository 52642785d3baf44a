#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cope/cope.hpp"

namespace testing_support {

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline std::vector<double> random_pmf(cope::Rng& rng, int n, double floor = 0.05) {
    std::vector<double> p(static_cast<std::size_t>(n));
    double total = 0.0;
    for (double& x : p) {
        x = floor + cope::uniform01(rng);
        total += x;
    }
    for (double& x : p) x /= total;
    return p;
}

inline void append(std::vector<double>& dst, const std::vector<double>& src) { dst.insert(dst.end(), src.begin(), src.end()); }

/// Random fully supported CMDPWM; reward levels 0, 1, ..., nr-1.
inline cope::TabularCmdpwm random_spec(std::uint64_t seed, int ns = 3, int na = 2, int nm = 2, int nu = 2, int nr = 2) {
    cope::Rng rng = cope::make_rng(seed, 0);
    std::vector<double> p_u, p_a, p_m, p_sr, rewards, init;
    for (int s = 0; s < ns; ++s) append(p_u, random_pmf(rng, nu));
    for (int s = 0; s < ns * nu; ++s) append(p_a, random_pmf(rng, na));
    for (int s = 0; s < ns * na; ++s) append(p_m, random_pmf(rng, nm));
    for (int s = 0; s < ns * nu * na * nm; ++s) append(p_sr, random_pmf(rng, ns * nr));
    for (int r = 0; r < nr; ++r) rewards.push_back(r);
    init = random_pmf(rng, ns);
    return cope::TabularCmdpwm({ns, na, nm, nu, nr}, p_u, p_a, p_m, p_sr, rewards, init);
}

inline cope::Policy random_policy(std::uint64_t seed, int ns, int na) {
    cope::Rng rng = cope::make_rng(seed, 7);
    std::vector<double> table;
    for (int s = 0; s < ns; ++s) append(table, random_pmf(rng, na));
    return cope::Policy::tabular(na, table);
}

/// Arbitrary bounded tables shaped like the model's nuisances.
inline cope::NuisanceSet random_nuisances(const cope::TabularCmdpwm& spec, std::uint64_t seed) {
    cope::Rng rng = cope::make_rng(seed, 11);
    const int ns = spec.n_states(), na = spec.n_actions(), nm = spec.n_mediators();
    std::vector<double> q, omega, pa, pm;
    for (int k = 0; k < ns * na * nm; ++k) q.push_back(10.0 * cope::uniform01(rng) - 5.0);
    for (int s = 0; s < ns; ++s) omega.push_back(0.2 + 2.0 * cope::uniform01(rng));
    for (int s = 0; s < ns; ++s) append(pa, random_pmf(rng, na));
    for (int s = 0; s < ns * na; ++s) append(pm, random_pmf(rng, nm));
    return {cope::QFunction::table(ns, na, nm, q), cope::RatioFunction::tabular(omega),
            cope::CondPmf::table(ns, 1, na, pa, 0.0), cope::CondPmf::table(ns, na, nm, pm, 0.0),
            cope::InitialDistribution::tabular(spec.initial_distribution())};
}

inline cope::StateView state_of(const double& s) { return {&s, 1}; }

}  // namespace testing_support
