// cope: simulate / oracle / evaluate / experiment
//
//   cope simulate   --config sim.json   --out data.csv
//   cope oracle     --config oracle.json [--summary]
//   cope evaluate   --config eval.json  [--out estimates.json] [--summary]
//   cope experiment --config exp.json   [--out rows.csv] [--summary]
//
// Exit status: 0 ok, 2 bad configuration, 1 runtime failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "cope/cope.hpp"

namespace {

using cope::json;

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    bool summary = false;
};

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw cope::ConfigError("cannot open config file '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw cope::ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
}

/// Writes to --out when given, stdout otherwise.
class Sink {
public:
    explicit Sink(const std::string& path) {
        if (!path.empty()) {
            file_.open(path);
            if (!file_) throw std::runtime_error("cannot open output file '" + path + "'");
        }
    }
    std::ostream& stream() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

private:
    std::ofstream file_;
};

cope::Policy table_policy(int n_actions, const json& table) {
    try {
        return cope::Policy::tabular(n_actions, table.get<std::vector<double>>());
    } catch (const cope::InvalidSpec& e) {
        throw cope::ConfigError(std::string("policy_table: ") + e.what());
    }
}

/// Environment named in a config: "toy", "comparison" (+ state_dim), or an
/// inline/file tabular spec under "spec" / "spec_path".
std::shared_ptr<const cope::GenerativeEnv> environment_from(const json& cfg) {
    if (cfg.contains("spec") || cfg.contains("spec_path")) {
        const json spec_json = cfg.contains("spec") ? cfg.at("spec") : read_json_file(cfg.at("spec_path").get<std::string>());
        cope::TabularCmdpwm spec = [&] {
            try {
                return cope::tabular_from_json(spec_json);
            } catch (const cope::InvalidSpec& e) {
                throw cope::ConfigError(e.what());
            }
        }();
        cope::Policy pi = cfg.contains("policy_table")
                              ? table_policy(spec.n_actions(), cfg.at("policy_table"))
                              : cope::Policy::uniform(spec.n_actions());
        return std::make_shared<const cope::TabularEnv>(std::move(spec), std::move(pi), "custom");
    }
    std::string name = "toy";
    int dim = cfg.value("state_dim", 3);
    if (cfg.contains("environment")) {
        const auto& e = cfg.at("environment");
        if (e.is_object()) {
            name = e.at("name").get<std::string>();
            dim = e.value("state_dim", dim);
        } else {
            name = e.get<std::string>();
        }
    }
    if (name == "toy") return cope::build_toy_env();
    if (name == "comparison") return cope::build_comparison_env(dim);
    throw cope::ConfigError("unknown environment '" + name + "'");
}

cope::Policy policy_from(const json& cfg, const cope::GenerativeEnv& env) {
    if (cfg.contains("policy_table")) return table_policy(env.n_actions(), cfg.at("policy_table"));
    const std::string id = cfg.value("policy", std::string("target"));
    if (id == "target") return env.target_policy();
    if (id == "uniform") return cope::Policy::uniform(env.n_actions());
    throw cope::ConfigError("unknown policy '" + id + "'");
}

int cmd_simulate(const Options& opt) {
    const json cfg = read_json_file(opt.config);
    const auto env = environment_from(cfg);
    cope::SimConfig sim;
    sim.n_trajectories = cfg.value("N", 100);
    sim.horizon = cfg.value("T", 100);
    sim.burn_in = cfg.value("burn_in", 0);
    sim.seed = opt.seed.value_or(cfg.value("seed", std::uint64_t{0}));
    sim.workers = cfg.value("workers", 1);
    sim.validate();
    const auto data = cope::generate_dataset(*env, sim);
    Sink sink(opt.out);
    cope::write_dataset_csv(sink.stream(), data);
    return 0;
}

int cmd_oracle(const Options& opt) {
    const json cfg = read_json_file(opt.config);
    const auto env = environment_from(cfg);
    const auto* spec = env->tabular();
    if (!spec) throw cope::ConfigError("the oracle needs a tabular environment");
    const double gamma = cfg.value("gamma", 0.9);
    if (!(gamma >= 0.0 && gamma < 1.0)) throw cope::ConfigError("gamma must lie in [0,1)");
    const auto res = cope::compute_oracle(*spec, policy_from(cfg, *env), gamma);
    Sink sink(opt.out);
    auto& os = sink.stream();
    if (opt.summary) {
        os << "eta " << cope::format_double(res.eta) << '\n' << "state,V,omega,p_inf\n";
        for (int s = 0; s < res.n_states; ++s)
            os << s << ',' << cope::format_double(res.v[s]) << ',' << cope::format_double(res.omega[s]) << ','
               << cope::format_double(res.p_inf[s]) << '\n';
    } else {
        os << res.to_json().dump(2) << '\n';
    }
    return 0;
}

int cmd_evaluate(const Options& opt) {
    const json cfg = read_json_file(opt.config);
    const auto env = environment_from(cfg);
    const cope::Policy pi = policy_from(cfg, *env);
    const double gamma = cfg.value("gamma", 0.9), alpha = cfg.value("alpha", 0.05);
    if (!(gamma >= 0.0 && gamma < 1.0)) throw cope::ConfigError("gamma must lie in [0,1)");
    if (!(alpha > 0.0 && alpha < 1.0)) throw cope::ConfigError("alpha must lie in (0,1)");
    const auto methods = cfg.value("methods", std::vector<std::string>{"COPE"});
    for (const auto& m : methods)
        if (std::find(cope::known_methods().begin(), cope::known_methods().end(), m) == cope::known_methods().end())
            throw cope::ConfigError("unknown method '" + m + "'");
    cope::NuisanceConfig ncfg = cfg.contains("nuisance") ? cope::NuisanceConfig::from_json(cfg.at("nuisance")) : cope::NuisanceConfig{};
    if (opt.seed) ncfg.feature_seed = *opt.seed;

    if (!cfg.contains("dataset")) throw cope::ConfigError("evaluate needs a 'dataset' CSV path");
    std::ifstream in(cfg.at("dataset").get<std::string>());
    if (!in) throw cope::ConfigError("cannot open dataset '" + cfg.at("dataset").get<std::string>() + "'");
    const auto data = cope::read_dataset_csv(in, env->n_states(), env->n_actions(), env->n_mediators());

    auto wants = [&](const std::string& m) { return std::find(methods.begin(), methods.end(), m) != methods.end(); };
    std::vector<cope::ValueEstimate> est;
    if (wants("COPE") || wants("COPE-IS")) {
        const auto nuis = cope::fit_nuisances(data, pi, gamma, ncfg);
        if (wants("COPE")) est.push_back(cope::cope_estimate(data, nuis, pi, gamma, alpha));
        if (wants("COPE-IS")) est.push_back(cope::mis_estimate(data, nuis.omega, nuis.pm, pi, gamma, alpha));
        if (cfg.contains("nuisances_out")) {
            std::ofstream nf(cfg.at("nuisances_out").get<std::string>());
            if (!nf) throw std::runtime_error("cannot write nuisances file");
            nf << nuis.to_json().dump() << '\n';
        }
    }
    for (bool with_m : {false, true}) {
        const std::string suf = with_m ? "-M" : "";
        cope::BaselineConfig which{wants("REG" + suf), wants("MIS" + suf), wants("DRL" + suf), with_m};
        if (!which.reg && !which.mis && !which.drl) continue;
        for (auto& v : cope::baseline_estimates(data, pi, gamma, alpha, ncfg, which)) est.push_back(std::move(v));
    }
    // keep the requested method order
    std::vector<cope::ValueEstimate> ordered;
    for (const auto& m : methods)
        for (const auto& v : est)
            if (v.method == m) ordered.push_back(v);

    Sink sink(opt.out);
    auto& os = sink.stream();
    if (opt.summary) {
        os << cope::ValueEstimate::csv_header() << '\n';
        for (const auto& v : ordered) os << v.csv_row() << '\n';
    } else {
        json j = json::array();
        for (const auto& v : ordered) j.push_back(v.to_json(cfg.value("contributions", false)));
        os << json{{"estimates", j}}.dump(2) << '\n';
    }
    return 0;
}

int cmd_experiment(const Options& opt) {
    json raw = read_json_file(opt.config);
    if (opt.seed) raw["seed"] = *opt.seed;
    const auto cfg = cope::ExperimentConfig::from_json(raw);
    const auto res = cope::run_experiment(cfg);
    if (opt.summary) {
        if (!opt.out.empty()) {
            Sink sink(opt.out);
            cope::write_rows_csv(sink.stream(), res.rows, cfg.record_timing);
        }
        cope::write_summary_csv(std::cout, res.summary);
    } else {
        Sink sink(opt.out);
        cope::write_rows_csv(sink.stream(), res.rows, cfg.record_timing);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Off-policy evaluation with confounders and mediators"};
    app.require_subcommand(1);
    Options opt;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config, "JSON configuration")->required();
        sub->add_option("--out", opt.out, "output path (stdout when omitted)");
        sub->add_option("--seed", opt.seed, "override the configured seed");
        sub->add_flag("--summary", opt.summary, "emit the aggregated table");
    };
    auto* simulate = app.add_subcommand("simulate", "log behavior trajectories to a dataset CSV");
    auto* oracle = app.add_subcommand("oracle", "exact Q, V, omega and value for a tabular model");
    auto* evaluate = app.add_subcommand("evaluate", "estimate a policy value from one dataset");
    auto* experiment = app.add_subcommand("experiment", "run a replication grid and write result rows");
    for (auto* sub : {simulate, oracle, evaluate, experiment}) add_common(sub);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    try {
        if (simulate->parsed()) return cmd_simulate(opt);
        if (oracle->parsed()) return cmd_oracle(opt);
        if (evaluate->parsed()) return cmd_evaluate(opt);
        return cmd_experiment(opt);
    } catch (const cope::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
