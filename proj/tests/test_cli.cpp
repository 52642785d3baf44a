// Drives the built binary end to end through temp files.
#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("cope_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    std::string write(const std::string& name, const std::string& body) const {
        std::ofstream(path(name)) << body;
        return path(name);
    }

    int run(const std::string& args) const {
        const std::string cmd = std::string(COPE_CLI_PATH) + " " + args + " > " + path("stdout.txt") + " 2> " + path("stderr.txt");
        const int raw = std::system(cmd.c_str());
        return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    }

    std::string slurp(const std::string& name) const {
        std::ifstream in(path(name));
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    fs::path dir_;
};

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_F(Cli, SimulateThenEvaluate) {
    const auto sim = write("sim.json", R"({"environment": "toy", "N": 20, "T": 15, "seed": 3})");
    ASSERT_EQ(run("simulate --config " + sim + " --out " + path("data.csv")), 0) << slurp("stderr.txt");
    EXPECT_EQ(count_lines(slurp("data.csv")), 1 + 20 * 16);

    json eval{{"environment", "toy"}, {"dataset", path("data.csv")}, {"gamma", 0.9},
              {"methods", {"COPE", "DRL", "REG-M"}}, {"nuisances_out", path("nuis.json")}};
    const auto cfg = write("eval.json", eval.dump());
    ASSERT_EQ(run("evaluate --config " + cfg + " --out " + path("est.json")), 0) << slurp("stderr.txt");
    const auto out = json::parse(slurp("est.json"));
    ASSERT_EQ(out["estimates"].size(), 3u);
    EXPECT_EQ(out["estimates"][0]["method"], "COPE");
    EXPECT_EQ(out["estimates"][2]["method"], "REG-M");
    EXPECT_TRUE(json::parse(slurp("nuis.json")).contains("omega"));

    ASSERT_EQ(run("evaluate --config " + cfg + " --summary"), 0);
    const auto csv = slurp("stdout.txt");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "method,N,T,gamma,estimate,se,ci_lo,ci_hi");
    EXPECT_EQ(csv.find("COPE,20,15,0.9,"), csv.find('\n') + 1);
}

TEST_F(Cli, SimulateIsSeedDeterministic) {
    const auto sim = write("sim.json", R"({"environment": "toy", "N": 5, "T": 5, "seed": 1})");
    ASSERT_EQ(run("simulate --config " + sim + " --out " + path("a.csv")), 0);
    ASSERT_EQ(run("simulate --config " + sim + " --out " + path("b.csv")), 0);
    ASSERT_EQ(run("simulate --config " + sim + " --seed 2 --out " + path("c.csv")), 0);
    EXPECT_EQ(slurp("a.csv"), slurp("b.csv"));
    EXPECT_NE(slurp("a.csv"), slurp("c.csv"));
}

TEST_F(Cli, OracleJsonAndSummary) {
    const auto cfg = write("oracle.json", R"({"environment": "toy", "gamma": 0.9})");
    ASSERT_EQ(run("oracle --config " + cfg), 0);
    const auto j = json::parse(slurp("stdout.txt"));
    EXPECT_GT(j["eta"].get<double>(), 0.0);
    ASSERT_EQ(run("oracle --config " + cfg + " --summary"), 0);
    EXPECT_EQ(slurp("stdout.txt").rfind("eta ", 0), 0u);
}

TEST_F(Cli, ExperimentRowsAndSummary) {
    const auto cfg = write("exp.json", R"({"environment": "toy", "N": [6], "T": [8], "n_replications": 2,
                                           "methods": ["COPE", "MIS"], "seed": 5, "workers": 2})");
    ASSERT_EQ(run("experiment --config " + cfg + " --out " + path("rows.csv") + " --summary"), 0) << slurp("stderr.txt");
    EXPECT_EQ(count_lines(slurp("rows.csv")), 1 + 2 * 2);
    EXPECT_EQ(count_lines(slurp("stdout.txt")), 1 + 2);
    const auto first = slurp("rows.csv");
    ASSERT_EQ(run("experiment --config " + cfg + " --out " + path("rows.csv")), 0);
    EXPECT_EQ(slurp("rows.csv"), first);
}

TEST_F(Cli, ConfigErrorsExitTwo) {
    EXPECT_EQ(run("experiment --config " + path("missing.json")), 2);
    EXPECT_EQ(run("experiment --config " + write("bad.json", "{not json")), 2);
    EXPECT_EQ(run("experiment --config " + write("g.json", R"({"gamma": 1.5})")), 2);
    EXPECT_EQ(run("evaluate --config " + write("e.json", R"({"environment": "toy"})")), 2);
    EXPECT_EQ(run("simulate --config " + write("s.json", R"({"environment": "maze"})")), 2);
    EXPECT_EQ(run("experiment"), 2);
    EXPECT_EQ(run("frobnicate --config x"), 2);
}

TEST_F(Cli, RuntimeFailureExitsOne) {
    // a dataset whose mediator column is out of range for the toy model
    write("data.csv", "traj_id,t,s,action,mediator,reward\n0,0,0,0,7,1\n0,1,1,,,\n1,0,1,1,0,0\n1,1,0,,,\n");
    const auto cfg = write("eval.json", json{{"environment", "toy"}, {"dataset", path("data.csv")}}.dump());
    EXPECT_EQ(run("evaluate --config " + cfg), 1);
}
