#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "cope/common.hpp"
#include "cope/dataset_io.hpp"
#include "cope/estimators.hpp"
#include "cope/nuisance.hpp"
#include "cope/oracle.hpp"
#include "cope/simulator.hpp"

namespace cope {

inline const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> m{"COPE", "COPE-IS", "REG", "MIS", "DRL", "REG-M", "MIS-M", "DRL-M"};
    return m;
}

inline const std::vector<std::string>& known_scenarios() {
    static const std::vector<std::string> s{"none", "corrupt-M1", "corrupt-M2", "oracle-nuisances", "oracle-pm"};
    return s;
}

struct ExperimentConfig {
    std::string environment = "toy";  // toy | comparison
    int state_dim = 3;                // comparison only
    std::string policy = "target";    // target | uniform
    double gamma = 0.9;
    std::vector<int> n_grid{100};
    std::vector<int> t_grid{100};
    int n_replications = 10;
    double alpha = 0.05;
    std::vector<std::string> methods{"COPE"};
    std::string scenario = "none";
    NuisanceConfig nuisance;
    std::uint64_t seed = 0;
    int workers = 0;  // 0 -> default_workers()
    int burn_in = 0;
    long truth_rollouts = 1000000;
    int truth_horizon = 0;  // 0 -> from gamma and the reward bound
    bool record_timing = false;

    void validate() const {
        if (environment != "toy" && environment != "comparison")
            throw ConfigError("environment must be 'toy' or 'comparison'");
        if (environment == "comparison" && state_dim < 1) throw ConfigError("state_dim must be >= 1");
        if (policy != "target" && policy != "uniform") throw ConfigError("policy must be 'target' or 'uniform'");
        if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in [0,1)");
        if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0,1)");
        if (n_grid.empty() || t_grid.empty()) throw ConfigError("N and T grids must be nonempty");
        for (int n : n_grid)
            if (n < 2) throw ConfigError("every N must be >= 2");
        for (int t : t_grid)
            if (t < 1) throw ConfigError("every T must be >= 1");
        if (n_replications < 1) throw ConfigError("n_replications must be >= 1");
        if (methods.empty()) throw ConfigError("methods list is empty");
        for (const auto& m : methods)
            if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end())
                throw ConfigError("unknown method '" + m + "'");
        if (std::find(known_scenarios().begin(), known_scenarios().end(), scenario) == known_scenarios().end())
            throw ConfigError("unknown scenario '" + scenario + "'");
        if (scenario != "none" && environment != "toy")
            throw ConfigError("scenario '" + scenario + "' needs the tabular toy environment");
        if (burn_in < 0 || truth_rollouts < 1 || truth_horizon < 0) throw ConfigError("invalid truth or burn-in settings");
    }

    json to_json() const {
        return {{"environment", environment}, {"state_dim", state_dim},         {"policy", policy},
                {"gamma", gamma},             {"N", n_grid},                     {"T", t_grid},
                {"n_replications", n_replications}, {"alpha", alpha},           {"methods", methods},
                {"scenario", scenario},       {"nuisance", nuisance.to_json()}, {"seed", seed},
                {"workers", workers},         {"burn_in", burn_in},             {"truth_rollouts", truth_rollouts},
                {"truth_horizon", truth_horizon}, {"record_timing", record_timing}};
    }

    static ExperimentConfig from_json(const json& j) {
        try {
            ExperimentConfig c;
            if (j.contains("environment")) {
                const auto& e = j.at("environment");
                if (e.is_object()) {
                    c.environment = e.at("name").get<std::string>();
                    c.state_dim = e.value("state_dim", c.state_dim);
                } else {
                    c.environment = e.get<std::string>();
                }
            }
            c.state_dim = j.value("state_dim", c.state_dim);
            c.policy = j.value("policy", c.policy);
            c.gamma = j.value("gamma", c.gamma);
            c.n_grid = j.value("N", c.n_grid);
            c.t_grid = j.value("T", c.t_grid);
            c.n_replications = j.value("n_replications", c.n_replications);
            c.alpha = j.value("alpha", c.alpha);
            c.methods = j.value("methods", c.methods);
            c.scenario = j.value("scenario", c.scenario);
            if (j.contains("nuisance")) c.nuisance = NuisanceConfig::from_json(j.at("nuisance"));
            c.seed = j.value("seed", c.seed);
            c.workers = j.value("workers", c.workers);
            c.burn_in = j.value("burn_in", c.burn_in);
            c.truth_rollouts = j.value("truth_rollouts", c.truth_rollouts);
            c.truth_horizon = j.value("truth_horizon", c.truth_horizon);
            c.record_timing = j.value("record_timing", c.record_timing);
            c.validate();
            return c;
        } catch (const json::exception& e) {
            throw ConfigError(std::string("bad experiment config: ") + e.what());
        }
    }
};

struct ResultRow {
    std::string method, env, scenario;
    int n = 0, t = 0, rep = 0;
    double estimate = std::nan(""), se = std::nan(""), ci_lo = std::nan(""), ci_hi = std::nan("");
    double truth = 0.0;
    bool covered = false;
    std::string status = "ok";
    double wall_ms = 0.0;

    bool ok() const { return status == "ok"; }

    static std::string csv_header(bool timing) {
        return std::string("method,env,scenario,N,T,rep,estimate,se,ci_lo,ci_hi,truth,covered,status") +
               (timing ? ",wall_ms" : "");
    }
    std::string csv_row(bool timing) const {
        std::ostringstream os;
        os << method << ',' << env << ',' << scenario << ',' << n << ',' << t << ',' << rep << ','
           << format_double(estimate) << ',' << format_double(se) << ',' << format_double(ci_lo) << ','
           << format_double(ci_hi) << ',' << format_double(truth) << ',' << (covered ? 1 : 0) << ',' << status;
        if (timing) os << ',' << format_double(wall_ms);
        return os.str();
    }
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct LogMetrics {
    double log_bias = 0.0, log_mse = 0.0;
    double sd_log_bias = 0.0, sd_log_mse = 0.0;
    int n = 0;
    int floored = 0;  // replications with an exact-zero error
};

inline LogMetrics log_metrics(const std::vector<double>& estimates, double truth) {
    if (estimates.empty()) throw EmptyDataset("log_metrics needs at least one estimate");
    constexpr double kFloor = 1e-300;
    std::vector<double> lb, lm;
    LogMetrics out;
    for (double e : estimates) {
        double err = std::abs(e - truth);
        if (err == 0.0) {
            ++out.floored;
            err = kFloor;
        }
        lb.push_back(std::log10(err));
        lm.push_back(std::log10(std::max(err * err, kFloor)));
    }
    out.n = static_cast<int>(estimates.size());
    out.log_bias = mean_of(lb);
    out.log_mse = mean_of(lm);
    if (out.n > 1) {
        out.sd_log_bias = std::sqrt(sample_variance(lb));
        out.sd_log_mse = std::sqrt(sample_variance(lm));
    }
    return out;
}

struct Coverage {
    double rate = 0.0, se = 0.0;
    int n = 0;
};

inline Coverage coverage(const std::vector<ResultRow>& rows) {
    if (rows.empty()) throw EmptyDataset("coverage needs at least one row");
    Coverage c;
    c.n = static_cast<int>(rows.size());
    int hit = 0;
    for (const auto& r : rows) hit += r.covered ? 1 : 0;
    c.rate = static_cast<double>(hit) / c.n;
    c.se = std::sqrt(c.rate * (1.0 - c.rate) / c.n);
    return c;
}

struct SummaryRow {
    std::string method;
    int n = 0, t = 0;
    int replications = 0, failed = 0;
    double truth = 0.0;
    double mean_estimate = 0.0, bias = 0.0, bias_se = 0.0, mean_abs_error = 0.0;
    LogMetrics log;
    Coverage cover;

    static std::string csv_header() {
        return "method,N,T,replications,failed,truth,mean_estimate,bias,bias_se,mean_abs_error,"
               "logBias,logBias_sd,logMSE,logMSE_sd,coverage,coverage_se";
    }
    std::string csv_row() const {
        std::ostringstream os;
        os << method << ',' << n << ',' << t << ',' << replications << ',' << failed << ',' << format_double(truth)
           << ',' << format_double(mean_estimate) << ',' << format_double(bias) << ',' << format_double(bias_se) << ','
           << format_double(mean_abs_error) << ',' << format_double(log.log_bias) << ','
           << format_double(log.sd_log_bias) << ',' << format_double(log.log_mse) << ','
           << format_double(log.sd_log_mse) << ',' << format_double(cover.rate) << ',' << format_double(cover.se);
        return os.str();
    }
};

/// Aggregates per (method, N, T) in first-appearance order.
inline std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows) {
    std::vector<std::tuple<std::string, int, int>> keys;
    std::map<std::tuple<std::string, int, int>, std::vector<const ResultRow*>> groups;
    for (const auto& r : rows) {
        auto key = std::make_tuple(r.method, r.n, r.t);
        if (!groups.count(key)) keys.push_back(key);
        groups[key].push_back(&r);
    }
    std::vector<SummaryRow> out;
    for (const auto& key : keys) {
        const auto& g = groups[key];
        SummaryRow s;
        std::tie(s.method, s.n, s.t) = key;
        s.replications = static_cast<int>(g.size());
        s.truth = g.front()->truth;
        std::vector<double> est, err;
        std::vector<ResultRow> good;
        for (const auto* r : g) {
            if (!r->ok()) {
                ++s.failed;
                continue;
            }
            est.push_back(r->estimate);
            err.push_back(r->estimate - r->truth);
            good.push_back(*r);
        }
        if (!est.empty()) {
            s.mean_estimate = mean_of(est);
            s.bias = mean_of(err);
            s.bias_se = est.size() > 1 ? std::sqrt(sample_variance(err) / static_cast<double>(err.size())) : 0.0;
            double mae = 0.0;
            for (double e : err) mae += std::abs(e);
            s.mean_abs_error = mae / static_cast<double>(err.size());
            s.log = log_metrics(est, s.truth);
            s.cover = coverage(good);
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

/// Dataset seed for one (N, T, replication) cell of the grid.
inline std::uint64_t replication_seed(std::uint64_t master, int n, int t, int rep) {
    std::uint64_t h = splitmix64(master);
    h = splitmix64(h ^ static_cast<std::uint64_t>(n));
    h = splitmix64(h ^ (static_cast<std::uint64_t>(t) << 20));
    return splitmix64(h ^ (static_cast<std::uint64_t>(rep) << 40));
}

inline std::shared_ptr<const GenerativeEnv> make_environment(const ExperimentConfig& cfg) {
    if (cfg.environment == "toy") return build_toy_env();
    return build_comparison_env(cfg.state_dim);
}

inline Policy make_policy(const ExperimentConfig& cfg, const GenerativeEnv& env) {
    return cfg.policy == "target" ? env.target_policy() : Policy::uniform(env.n_actions());
}

/// Exact value for tabular environments; a cached Monte Carlo value otherwise.
inline RolloutResult experiment_truth(const ExperimentConfig& cfg, const GenerativeEnv& env, const Policy& pi) {
    if (const auto* spec = env.tabular()) {
        RolloutResult r;
        r.value = exact_value(*spec, pi, cfg.gamma);
        return r;
    }
    const int horizon = cfg.truth_horizon > 0 ? cfg.truth_horizon : default_truth_horizon(cfg.gamma, env.reward_bound());
    using Key = std::tuple<std::string, std::string, double, long, int>;
    static std::mutex mutex;
    static std::map<Key, RolloutResult> cache;
    const Key key{env.name(), cfg.policy, cfg.gamma, cfg.truth_rollouts, horizon};
    std::lock_guard lock(mutex);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
    // fixed truth stream, independent of the experiment seed
    auto r = rollout_target_value(env, pi, cfg.gamma, cfg.truth_rollouts, horizon, 0x7275746873ULL,
                                  cfg.workers > 0 ? cfg.workers : default_workers());
    cache.emplace(key, r);
    return r;
}

/// Nuisances for COPE under the configured scenario. `rng` drives the
/// corruption noise.
inline NuisanceSet scenario_nuisances(const ExperimentConfig& cfg, const GenerativeEnv& env, const Dataset& data,
                                      const Policy& pi, const NuisanceConfig& ncfg, Rng& rng) {
    if (cfg.scenario == "none") return fit_nuisances(data, pi, cfg.gamma, ncfg);
    const TabularCmdpwm& spec = *env.tabular();
    NuisanceSet oracle = oracle_nuisances(spec, pi, cfg.gamma);
    if (cfg.scenario == "oracle-nuisances") return oracle;
    const int ns = spec.n_states(), na = spec.n_actions(), nm = spec.n_mediators();
    if (cfg.scenario == "oracle-pm") {
        const Basis basis = default_basis(data, ncfg);
        CondPmf pa = estimate_pa_star(data, basis, ncfg);
        InitialDistribution nu = estimate_nu(data);
        QFunction q = fitted_q_evaluation(data, pi, oracle.pm, pa, cfg.gamma, basis, ncfg);
        RatioFunction omega = estimate_omega(data, pi, oracle.pm, nu, cfg.gamma, basis, ncfg);
        return {std::move(q), std::move(omega), std::move(pa), oracle.pm, std::move(nu)};
    }
    const auto eq = exact_q(spec, pi, cfg.gamma);
    const auto omega = exact_omega(spec, pi, cfg.gamma);
    if (cfg.scenario == "corrupt-M2") {
        std::vector<double> shifted = omega;
        for (int s = 0; s < ns; ++s) shifted[static_cast<std::size_t>(s)] += s % 2 == 0 ? 0.5 : -0.5;
        oracle.omega = RatioFunction::tabular(shifted);
        return oracle;
    }
    // corrupt-M1: unit Gaussian noise on every Q cell, uniform(0.75, 1)
    // multipliers on p_a*, renormalized per state
    std::vector<double> q = eq.q;
    for (double& x : q) x += standard_normal(rng);
    detail::Marginals mg(spec);
    std::vector<double> pa = mg.pa_star;
    for (int s = 0; s < ns; ++s) {
        double total = 0.0;
        for (int a = 0; a < na; ++a) {
            double& p = pa[static_cast<std::size_t>(s * na + a)];
            p *= 0.75 + 0.25 * uniform01(rng);
            total += p;
        }
        for (int a = 0; a < na; ++a) pa[static_cast<std::size_t>(s * na + a)] /= total;
    }
    oracle.q = QFunction::table(ns, na, nm, std::move(q));
    oracle.pa_star = CondPmf::table(ns, 1, na, std::move(pa), 0.0);
    return oracle;
}

namespace detail {

inline ResultRow make_row(const ExperimentConfig& cfg, const std::string& env, const std::string& method, int n, int t,
                          int rep, double truth) {
    ResultRow r;
    r.method = method;
    r.env = env;
    r.scenario = cfg.scenario;
    r.n = n;
    r.t = t;
    r.rep = rep;
    r.truth = truth;
    return r;
}

inline void fill_row(ResultRow& row, const ValueEstimate& v) {
    row.estimate = v.estimate;
    row.se = v.se;
    row.ci_lo = v.ci_lo;
    row.ci_hi = v.ci_hi;
    row.covered = v.ci_lo <= row.truth && row.truth <= v.ci_hi;
    if (!std::isfinite(v.estimate) || !std::isfinite(v.se)) {
        row.status = "failed:non-finite";
        row.covered = false;
    }
}

inline std::string failure_status(const std::exception& e) {
    std::string msg = e.what();
    for (char& c : msg)
        if (c == ',' || c == '\n' || c == '\r') c = ';';
    return "failed:" + msg;
}

}  // namespace detail

/// Rows for one dataset, in the order of cfg.methods.
inline std::vector<ResultRow> run_replication(const ExperimentConfig& cfg, const GenerativeEnv& env, const Policy& pi,
                                              double truth, int n, int t, int rep) {
    using clock = std::chrono::steady_clock;
    const std::uint64_t seed = replication_seed(cfg.seed, n, t, rep);
    std::vector<ResultRow> rows;
    for (const auto& m : cfg.methods) rows.push_back(detail::make_row(cfg, env.name(), m, n, t, rep, truth));
    auto mark_all = [&](const std::string& status) {
        for (auto& r : rows)
            if (r.status == "ok" && std::isnan(r.estimate)) r.status = status;
    };
    try {
        SimConfig sim;
        sim.n_trajectories = n;
        sim.horizon = t;
        sim.burn_in = cfg.burn_in;
        sim.seed = seed;
        const Dataset data = generate_dataset(env, sim);
        NuisanceConfig ncfg = cfg.nuisance;
        ncfg.feature_seed = mix_seed(seed, 1);

        auto wants = [&](const std::string& m) {
            return std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end();
        };
        auto row_of = [&](const std::string& m) -> ResultRow& {
            return rows[static_cast<std::size_t>(std::find(cfg.methods.begin(), cfg.methods.end(), m) - cfg.methods.begin())];
        };

        if (wants("COPE") || wants("COPE-IS")) {
            const auto t0 = clock::now();
            try {
                Rng rng = make_rng(seed, 2);
                const NuisanceSet nuis = scenario_nuisances(cfg, env, data, pi, ncfg, rng);
                const double fit_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
                if (wants("COPE")) {
                    const auto t1 = clock::now();
                    detail::fill_row(row_of("COPE"), cope_estimate(data, nuis, pi, cfg.gamma, cfg.alpha));
                    row_of("COPE").wall_ms = fit_ms + std::chrono::duration<double, std::milli>(clock::now() - t1).count();
                }
                if (wants("COPE-IS")) {
                    const auto t1 = clock::now();
                    detail::fill_row(row_of("COPE-IS"), mis_estimate(data, nuis.omega, nuis.pm, pi, cfg.gamma, cfg.alpha));
                    row_of("COPE-IS").wall_ms = fit_ms + std::chrono::duration<double, std::milli>(clock::now() - t1).count();
                }
            } catch (const std::exception& e) {
                for (const char* m : {"COPE", "COPE-IS"})
                    if (wants(m)) row_of(m).status = detail::failure_status(e);
            }
        }
        for (bool with_m : {false, true}) {
            const std::string suf = with_m ? "-M" : "";
            BaselineConfig which;
            which.with_mediator_in_state = with_m;
            which.reg = wants("REG" + suf);
            which.mis = wants("MIS" + suf);
            which.drl = wants("DRL" + suf);
            if (!which.reg && !which.mis && !which.drl) continue;
            const auto t0 = clock::now();
            try {
                const auto est = baseline_estimates(data, pi, cfg.gamma, cfg.alpha, ncfg, which);
                const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
                for (const auto& v : est) {
                    detail::fill_row(row_of(v.method), v);
                    row_of(v.method).wall_ms = ms;
                }
            } catch (const std::exception& e) {
                for (const char* base : {"REG", "MIS", "DRL"})
                    if (wants(base + suf)) row_of(base + suf).status = detail::failure_status(e);
            }
        }
    } catch (const std::exception& e) {
        mark_all(detail::failure_status(e));
    }
    return rows;
}

struct ExperimentResult {
    std::vector<ResultRow> rows;  // ordered by (N, T, rep, method)
    std::vector<SummaryRow> summary;
    double truth = 0.0;
    double truth_se = 0.0;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto env = make_environment(cfg);
    const Policy pi = make_policy(cfg, *env);
    const auto truth = experiment_truth(cfg, *env, pi);

    struct Task { int n, t, rep; };
    std::vector<Task> tasks;
    for (int n : cfg.n_grid)
        for (int t : cfg.t_grid)
            for (int rep = 0; rep < cfg.n_replications; ++rep) tasks.push_back({n, t, rep});
    std::vector<std::vector<ResultRow>> per_task(tasks.size());
    const int workers = cfg.workers > 0 ? cfg.workers : default_workers();
    parallel_for(tasks.size(), workers, [&](std::size_t k) {
        per_task[k] = run_replication(cfg, *env, pi, truth.value, tasks[k].n, tasks[k].t, tasks[k].rep);
    });
    ExperimentResult out;
    out.truth = truth.value;
    out.truth_se = truth.standard_error;
    for (auto& rows : per_task)
        for (auto& r : rows) out.rows.push_back(std::move(r));
    out.summary = summarize(out.rows);
    return out;
}

inline void write_rows_csv(std::ostream& os, const std::vector<ResultRow>& rows, bool timing = false) {
    os << ResultRow::csv_header(timing) << '\n';
    for (const auto& r : rows) os << r.csv_row(timing) << '\n';
}

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
    os << SummaryRow::csv_header() << '\n';
    for (const auto& r : rows) os << r.csv_row() << '\n';
}

}  // namespace cope
