#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "cope/harness.hpp"

using namespace cope;

namespace {

ResultRow row(const std::string& m, double est, double truth, bool covered, const std::string& status = "ok") {
    ResultRow r;
    r.method = m;
    r.n = 10;
    r.t = 5;
    r.estimate = est;
    r.truth = truth;
    r.covered = covered;
    r.status = status;
    return r;
}

ExperimentConfig small_config() {
    ExperimentConfig c;
    c.n_grid = {8};
    c.t_grid = {10};
    c.n_replications = 3;
    c.methods = {"COPE", "DRL"};
    c.seed = 42;
    c.workers = 1;
    return c;
}

}  // namespace

TEST(LogMetrics, SingleEstimate) {
    const auto m = log_metrics({1.1}, 1.0);
    EXPECT_NEAR(m.log_bias, -1.0, 1e-12);
    EXPECT_NEAR(m.log_mse, -2.0, 1e-12);
    EXPECT_EQ(m.floored, 0);
}

TEST(LogMetrics, SymmetricErrorsAgree) {
    const auto m = log_metrics({1.1, 0.9}, 1.0);
    EXPECT_NEAR(m.log_bias, -1.0, 1e-12);
    EXPECT_NEAR(m.log_mse, -2.0, 1e-12);
    EXPECT_NEAR(m.sd_log_bias, 0.0, 1e-12);
}

TEST(LogMetrics, ExactHitIsFloored) {
    const auto m = log_metrics({1.0}, 1.0);
    EXPECT_EQ(m.floored, 1);
    EXPECT_TRUE(std::isfinite(m.log_bias));
    EXPECT_THROW(log_metrics({}, 1.0), EmptyDataset);
}

TEST(Coverage, RateAndStandardError) {
    auto c = coverage({row("COPE", 1, 1, true), row("COPE", 1, 1, true)});
    EXPECT_DOUBLE_EQ(c.rate, 1.0);
    EXPECT_DOUBLE_EQ(c.se, 0.0);
    c = coverage({row("COPE", 1, 1, true), row("COPE", 1, 1, false), row("COPE", 1, 1, true), row("COPE", 1, 1, false)});
    EXPECT_DOUBLE_EQ(c.rate, 0.5);
    EXPECT_DOUBLE_EQ(c.se, 0.25);
}

TEST(Summarize, GroupsAndCountsFailures) {
    std::vector<ResultRow> rows{row("COPE", 1.1, 1.0, true), row("DRL", 2.0, 1.0, false),
                                row("COPE", 0.9, 1.0, true), row("DRL", 0.0, 1.0, false, "failed:boom")};
    const auto s = summarize(rows);
    ASSERT_EQ(s.size(), 2u);
    EXPECT_EQ(s[0].method, "COPE");
    EXPECT_EQ(s[0].replications, 2);
    EXPECT_NEAR(s[0].bias, 0.0, 1e-12);
    EXPECT_NEAR(s[0].mean_abs_error, 0.1, 1e-12);
    EXPECT_NEAR(s[0].log.log_mse, -2.0, 1e-12);
    EXPECT_EQ(s[1].failed, 1);
    EXPECT_DOUBLE_EQ(s[1].mean_estimate, 2.0);
    EXPECT_EQ(s[1].cover.n, 1);
}

TEST(ExperimentConfig, RejectsBadValues) {
    const json base = small_config().to_json();
    auto bad = [&](const char* key, json value) {
        json j = base;
        j[key] = value;
        EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError) << key;
    };
    bad("gamma", 1.0);
    bad("gamma", -0.1);
    bad("alpha", 0.0);
    bad("N", std::vector<int>{1});
    bad("T", std::vector<int>{});
    bad("methods", std::vector<std::string>{"COPE", "nope"});
    bad("scenario", "sideways");
    bad("environment", "maze");
    bad("n_replications", 0);
    bad("gamma", "high");
    json j = base;
    j["environment"] = "comparison";
    j["scenario"] = "corrupt-M1";
    EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
}

TEST(ExperimentConfig, JsonRoundTripAndObjectEnvironment) {
    auto c = small_config();
    c.environment = "comparison";
    c.state_dim = 5;
    const auto back = ExperimentConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
    const auto obj = ExperimentConfig::from_json(json{{"environment", {{"name", "comparison"}, {"state_dim", 2}}}});
    EXPECT_EQ(obj.environment, "comparison");
    EXPECT_EQ(obj.state_dim, 2);
}

TEST(ReplicationSeed, DistinctAcrossCells) {
    std::set<std::uint64_t> seen;
    for (int n : {10, 20})
        for (int t : {10, 20})
            for (int rep = 0; rep < 50; ++rep) seen.insert(replication_seed(7, n, t, rep));
    EXPECT_EQ(seen.size(), 200u);
    EXPECT_NE(replication_seed(7, 10, 10, 0), replication_seed(8, 10, 10, 0));
}

TEST(RunExperiment, RowShapeAndTruth) {
    const auto res = run_experiment(small_config());
    ASSERT_EQ(res.rows.size(), 6u);
    EXPECT_EQ(res.rows[0].method, "COPE");
    EXPECT_EQ(res.rows[1].method, "DRL");
    EXPECT_EQ(res.rows[2].rep, 1);
    EXPECT_EQ(res.truth_se, 0.0);  // tabular truth is exact
    for (const auto& r : res.rows) {
        EXPECT_TRUE(r.ok()) << r.status;
        EXPECT_LE(r.ci_lo, r.estimate);
        EXPECT_GE(r.ci_hi, r.estimate);
        EXPECT_EQ(r.covered, r.ci_lo <= r.truth && r.truth <= r.ci_hi);
    }
    EXPECT_EQ(res.summary.size(), 2u);
}

TEST(RunExperiment, WorkerCountDoesNotChangeOutput) {
    auto c = small_config();
    c.n_replications = 6;
    c.methods = {"COPE", "COPE-IS", "REG-M"};
    c.scenario = "corrupt-M1";
    std::ostringstream one, four;
    write_rows_csv(one, run_experiment(c).rows);
    c.workers = 4;
    write_rows_csv(four, run_experiment(c).rows);
    EXPECT_EQ(one.str(), four.str());
}

TEST(RunExperiment, SeedChangesOutput) {
    auto c = small_config();
    std::ostringstream a, b;
    write_rows_csv(a, run_experiment(c).rows);
    c.seed = 43;
    write_rows_csv(b, run_experiment(c).rows);
    EXPECT_NE(a.str(), b.str());
}

TEST(RunExperiment, OracleScenarioUsesExactNuisances) {
    auto c = small_config();
    c.methods = {"COPE"};
    c.scenario = "oracle-nuisances";
    c.n_replications = 2;
    const auto res = run_experiment(c);
    for (const auto& r : res.rows) EXPECT_TRUE(r.ok());
}

TEST(ResultRow, CsvShapes) {
    auto r = row("COPE", 1.5, 1.0, true);
    r.se = 0.25;
    r.ci_lo = 1.0;
    r.ci_hi = 2.0;
    EXPECT_EQ(ResultRow::csv_header(false), "method,env,scenario,N,T,rep,estimate,se,ci_lo,ci_hi,truth,covered,status");
    EXPECT_EQ(ResultRow::csv_header(true), ResultRow::csv_header(false) + ",wall_ms");
    const auto line = r.csv_row(false);
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 12);
    EXPECT_EQ(detail::failure_status(std::runtime_error("a,b\nc")), "failed:a;b;c");
}
