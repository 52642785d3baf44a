#include <gtest/gtest.h>

#include <sstream>

#include "cope/dataset_io.hpp"
#include "cope/oracle.hpp"
#include "cope/simulator.hpp"
#include "test_support.hpp"

using namespace cope;
using testing_support::logistic;

namespace {
std::string csv_of(const Dataset& d) {
    std::ostringstream os;
    write_dataset_csv(os, d);
    return os.str();
}
}  // namespace

TEST(GenerateDataset, ShapesMatchConfig) {
    const auto env = build_toy_env();
    SimConfig cfg;
    cfg.n_trajectories = 7;
    cfg.horizon = 13;
    const auto d = generate_dataset(*env, cfg);
    ASSERT_EQ(d.size(), 7);
    for (const auto& tr : d.trajectories) {
        EXPECT_EQ(tr.length(), 13);
        EXPECT_EQ(tr.states.size(), 14u);
    }
    EXPECT_EQ(d.total_steps(), 91);
    EXPECT_NO_THROW(d.validate());
}

TEST(GenerateDataset, IndependentOfWorkerCount) {
    const auto env = build_comparison_env(3);
    SimConfig cfg;
    cfg.n_trajectories = 30;
    cfg.horizon = 10;
    cfg.seed = 77;
    cfg.workers = 1;
    const auto one = csv_of(generate_dataset(*env, cfg));
    cfg.workers = 4;
    EXPECT_EQ(one, csv_of(generate_dataset(*env, cfg)));
    cfg.seed = 78;
    EXPECT_NE(one, csv_of(generate_dataset(*env, cfg)));
}

TEST(GenerateDataset, RejectsBadConfig) {
    SimConfig cfg;
    cfg.horizon = 0;
    EXPECT_THROW(generate_dataset(*build_toy_env(), cfg), ConfigError);
}

TEST(ToyEnv, MediatorFrequencyMatchesModel) {
    const auto env = build_toy_env();
    SimConfig cfg;
    cfg.n_trajectories = 500;
    cfg.horizon = 100;
    cfg.seed = 3;
    const auto d = generate_dataset(*env, cfg);
    double hits = 0, total = 0;
    for (const auto& tr : d.trajectories)
        for (int t = 0; t < tr.length(); ++t)
            if (state_index(tr.state(t)) == 0 && tr.actions[t] == 1) {
                total += 1;
                hits += tr.mediators[t];
            }
    const double p = logistic(0.45);
    EXPECT_NEAR(hits / total, p, 4 * std::sqrt(p * (1 - p) / total));
}

TEST(ComparisonEnv, MediatorProbabilityFormula) {
    const std::vector<double> s{0.2, -0.4, 1.0};
    EXPECT_NEAR(ComparisonEnv::mediator_prob(1, s), logistic(0.1 * 0.8 + 0.45), 1e-15);
    EXPECT_NEAR(ComparisonEnv::reward_mean(1, s, 1), 0.5 * 1.8 - 0.08, 1e-15);
    EXPECT_NEAR(ComparisonEnv::reward_mean(1, s, 0), -0.08, 1e-15);
}

TEST(Rollout, ConstantRewardGivesGeometricSum) {
    // one state, reward always 1
    std::vector<double> p_u{1.0}, p_a{0.5, 0.5}, p_m{0.5, 0.5, 0.5, 0.5}, p_sr(4, 1.0);
    TabularCmdpwm spec({1, 2, 2, 1, 1}, p_u, p_a, p_m, p_sr, {1.0}, {1.0});
    TabularEnv env(spec, Policy::uniform(2), "const");
    const auto r = rollout_target_value(env, Policy::uniform(2), 0.5, 100, 60, 1);
    EXPECT_NEAR(r.value, 2.0, 1e-12);
    EXPECT_NEAR(r.standard_error, 0.0, 1e-12);
}

TEST(Rollout, ToyAgreesWithExactValue) {
    const auto env = build_toy_env();
    const auto pi = env->target_policy();
    const int h = default_truth_horizon(0.9, env->reward_bound());
    const auto r = rollout_target_value(*env, pi, 0.9, 20000, h, 11);
    EXPECT_NEAR(r.value, exact_value(toy_spec(), pi, 0.9), 3 * r.standard_error + r.truncation_bound);
}

TEST(DatasetCsv, RoundTripTabularAndContinuous) {
    for (bool tab : {true, false}) {
        const std::shared_ptr<const GenerativeEnv> env =
            tab ? std::shared_ptr<const GenerativeEnv>(build_toy_env()) : build_comparison_env(2);
        SimConfig cfg;
        cfg.n_trajectories = 4;
        cfg.horizon = 5;
        cfg.seed = 5;
        const auto d = generate_dataset(*env, cfg);
        const auto text = csv_of(d);
        std::istringstream in(text);
        const auto back = read_dataset_csv(in, env->n_states(), env->n_actions(), env->n_mediators());
        EXPECT_EQ(csv_of(back), text);
        EXPECT_EQ(back.tabular(), tab);
        EXPECT_EQ(back.trajectories[2].rewards, d.trajectories[2].rewards);
        EXPECT_EQ(back.trajectories[2].states, d.trajectories[2].states);
    }
}

TEST(DatasetCsv, HeaderLayout) {
    const auto env = build_comparison_env(2);
    SimConfig cfg;
    const auto text = csv_of(generate_dataset(*env, cfg));
    EXPECT_EQ(text.substr(0, text.find('\n')), "traj_id,t,s0,s1,action,mediator,reward");
}

TEST(DatasetCsv, RejectsBadInput) {
    std::istringstream bad("id,x\n1,2\n");
    EXPECT_THROW(read_dataset_csv(bad), InvalidSpec);
    std::istringstream empty("");
    EXPECT_THROW(read_dataset_csv(empty), EmptyDataset);
}

TEST(DefaultTruthHorizon, TailBelowTolerance) {
    const int h = default_truth_horizon(0.9, 10.0, 1e-4);
    EXPECT_LT(std::pow(0.9, h) * 10.0 / 0.1, 1e-4);
    EXPECT_GE(std::pow(0.9, h - 1) * 10.0 / 0.1, 1e-4);
}
