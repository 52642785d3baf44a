#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cope/common.hpp"
#include "cope/mdp_model.hpp"

namespace cope {

enum class EnvKind { tabular, comparison };

struct RewardAndNext {
    double reward = 0.0;
    std::vector<double> next_state;
};

/// Sampling interface for a CMDPWM. The mediator sampler takes no
/// confounder argument, so Assumption 2 holds by construction.
class GenerativeEnv {
public:
    virtual ~GenerativeEnv() = default;

    virtual EnvKind kind() const = 0;
    virtual std::string name() const = 0;
    virtual int state_dim() const = 0;
    virtual int n_states() const { return 0; }  // 0 for continuous envs
    virtual int n_actions() const = 0;
    virtual int n_mediators() const = 0;

    virtual std::vector<double> sample_initial_state(Rng& rng) const = 0;
    virtual int sample_confounder(StateView s, Rng& rng) const = 0;
    virtual int sample_action_behavior(StateView s, int u, Rng& rng) const = 0;
    virtual int sample_mediator(int a, StateView s, Rng& rng) const = 0;
    virtual RewardAndNext sample_reward_and_next(int m, int a, StateView s, int u, Rng& rng) const = 0;

    /// Bound used for truncation of Monte Carlo truth rollouts.
    virtual double reward_bound() const = 0;
    /// The target policy studied with this environment.
    virtual Policy target_policy() const = 0;
    /// Exact tabular backing, when one exists.
    virtual const TabularCmdpwm* tabular() const { return nullptr; }

    SpaceKind space_kind() const { return kind() == EnvKind::tabular ? SpaceKind::tabular : SpaceKind::continuous; }
};

// ---------------------------------------------------------------------------
// Tabular-backed environment
// ---------------------------------------------------------------------------

class TabularEnv final : public GenerativeEnv {
public:
    TabularEnv(TabularCmdpwm spec, Policy target, std::string name = "tabular")
        : spec_(std::move(spec)), target_(std::move(target)), name_(std::move(name)) {}

    EnvKind kind() const override { return EnvKind::tabular; }
    std::string name() const override { return name_; }
    int state_dim() const override { return 1; }
    int n_states() const override { return spec_.n_states(); }
    int n_actions() const override { return spec_.n_actions(); }
    int n_mediators() const override { return spec_.n_mediators(); }

    std::vector<double> sample_initial_state(Rng& rng) const override {
        return {static_cast<double>(sample_index(spec_.initial_distribution(), rng))};
    }
    int sample_confounder(StateView s, Rng& rng) const override {
        return sample_index(spec_.p_u_row(state_index(s)), rng);
    }
    int sample_action_behavior(StateView s, int u, Rng& rng) const override {
        return sample_index(spec_.p_a_row(state_index(s), u), rng);
    }
    int sample_mediator(int a, StateView s, Rng& rng) const override {
        return sample_index(spec_.p_m_row(a, state_index(s)), rng);
    }
    RewardAndNext sample_reward_and_next(int m, int a, StateView s, int u, Rng& rng) const override {
        const int k = sample_index(spec_.p_sr_row(m, a, state_index(s), u), rng);
        const int levels = spec_.n_reward_levels();
        return {spec_.reward(k % levels), {static_cast<double>(k / levels)}};
    }

    double reward_bound() const override { return spec_.reward_bound(); }
    Policy target_policy() const override { return target_; }
    const TabularCmdpwm* tabular() const override { return &spec_; }

private:
    TabularCmdpwm spec_;
    Policy target_;
    std::string name_;
};

// ---------------------------------------------------------------------------
// Toy environment
// ---------------------------------------------------------------------------

/// Target policy of the toy study: action 0 with probability 1 - sigmoid(0.3 s),
/// each of -1 and +1 with probability 0.5 sigmoid(0.3 s). Index order is
/// {-1, 0, +1}.
inline Policy toy_target_policy() {
    std::vector<double> table;
    for (int s = 0; s < 2; ++s) {
        const double q = sigmoid(0.3 * s);
        table.insert(table.end(), {0.5 * q, 1.0 - q, 0.5 * q});
    }
    return Policy::tabular(3, std::move(table));
}

/**
 * Toy CMDPWM: states {0,1}, confounders {-1,1}, actions {-1,0,1},
 * binary mediator, rewards {0,10}.
 *
 *   p_a(+-1|s,u) = 0.5 sigmoid(0.1 s + 0.9 u),  p_a(0|s,u) = 1 - sigmoid(0.1 s + 0.9 u)
 *   p_m(1|a,s)   = sigmoid(0.1 s - 0.9 (a - 0.5))
 *   P(R=10|s,u,m) = P(S'=1|s,u,m) = sigmoid(0.5 I(u=1)(s+m) - 0.1 s), drawn independently
 */
inline TabularCmdpwm toy_spec() {
    const std::vector<double> s_vals{0, 1}, u_vals{-1, 1}, a_vals{-1, 0, 1}, m_vals{0, 1};
    TabularDims d{2, 3, 2, 2, 2};
    std::vector<double> p_u, p_a, p_m, p_sr;
    for (double s : s_vals)
        for (double u : u_vals) {
            (void)u;
            p_u.push_back(0.5);
        }
    for (double s : s_vals)
        for (double u : u_vals) {
            const double q = sigmoid(0.1 * s + 0.9 * u);
            p_a.insert(p_a.end(), {0.5 * q, 1.0 - q, 0.5 * q});
        }
    for (double s : s_vals)
        for (double a : a_vals) {
            const double q = sigmoid(0.1 * s - 0.9 * (a - 0.5));
            p_m.insert(p_m.end(), {1.0 - q, q});
        }
    for (double s : s_vals)
        for (double u : u_vals)
            for (double a : a_vals) {
                (void)a;
                for (double m : m_vals) {
                    const double q = sigmoid(0.5 * (u == 1.0 ? 1.0 : 0.0) * (s + m) - 0.1 * s);
                    // [s'][r] with s' in {0,1}, r in {0,10}
                    p_sr.insert(p_sr.end(), {(1 - q) * (1 - q), (1 - q) * q, q * (1 - q), q * q});
                }
            }
    LabelTables labels{s_vals, a_vals, m_vals, u_vals};
    return TabularCmdpwm(d, std::move(p_u), std::move(p_a), std::move(p_m), std::move(p_sr), {0.0, 10.0},
                         {0.5, 0.5}, std::move(labels));
}

inline std::shared_ptr<const TabularEnv> build_toy_env() {
    return std::make_shared<const TabularEnv>(toy_spec(), toy_target_policy(), "toy");
}

// ---------------------------------------------------------------------------
// Continuous comparison environment
// ---------------------------------------------------------------------------

/**
 * Continuous-state benchmark. C = sum of state coordinates.
 *   S0 ~ N(0, I_d);  U uniform on {-1,1}
 *   p_a(1|s,u) = sigmoid(0.1 C + 0.9 u);  p_m(1|a,s) = sigmoid(0.1 C + 0.9 (a - 0.5))
 *   R  ~ N(0.5 I(u=1)(m + C) - 0.1 C, 0.1^2)
 *   S' ~ N(0.5 I(u=1)(m 1 + s) - 0.1 s, 0.25 I)
 * Target policy: pi(1|s) = sigmoid(0.3 C).
 */
class ComparisonEnv final : public GenerativeEnv {
public:
    explicit ComparisonEnv(int state_dim) : dim_(state_dim) {
        if (state_dim < 1) throw InvalidSpec("comparison env needs a positive state dimension");
    }

    EnvKind kind() const override { return EnvKind::comparison; }
    std::string name() const override { return "comparison" + std::to_string(dim_); }
    int state_dim() const override { return dim_; }
    int n_actions() const override { return 2; }
    int n_mediators() const override { return 2; }

    static double state_sum(StateView s) {
        double c = 0.0;
        for (double x : s) c += x;
        return c;
    }

    std::vector<double> sample_initial_state(Rng& rng) const override {
        std::vector<double> s(static_cast<std::size_t>(dim_));
        for (double& x : s) x = standard_normal(rng);
        return s;
    }
    int sample_confounder(StateView, Rng& rng) const override { return uniform01(rng) < 0.5 ? 0 : 1; }
    int sample_action_behavior(StateView s, int u, Rng& rng) const override {
        return uniform01(rng) < sigmoid(0.1 * state_sum(s) + 0.9 * confounder_value(u)) ? 1 : 0;
    }
    int sample_mediator(int a, StateView s, Rng& rng) const override {
        return uniform01(rng) < mediator_prob(a, s) ? 1 : 0;
    }
    RewardAndNext sample_reward_and_next(int m, int a, StateView s, int u, Rng& rng) const override {
        (void)a;
        const double on = u == 1 ? 1.0 : 0.0;
        RewardAndNext out;
        out.reward = reward_mean(m, s, u) + 0.1 * standard_normal(rng);
        out.next_state.resize(s.size());
        for (std::size_t k = 0; k < s.size(); ++k)
            out.next_state[k] = 0.5 * on * (m + s[k]) - 0.1 * s[k] + 0.5 * standard_normal(rng);
        return out;
    }

    /// Confounder index 0 is u = -1, index 1 is u = +1.
    static double confounder_value(int u) { return u == 1 ? 1.0 : -1.0; }
    static double mediator_prob(int a, StateView s) { return sigmoid(0.1 * state_sum(s) + 0.9 * (a - 0.5)); }
    static double reward_mean(int m, StateView s, int u) {
        const double c = state_sum(s);
        return 0.5 * (u == 1 ? 1.0 : 0.0) * (m + c) - 0.1 * c;
    }

    // Rewards are Gaussian; this scale only sets the truth-rollout horizon.
    double reward_bound() const override { return 5.0 * dim_; }

    Policy target_policy() const override {
        return Policy::from_function(2, [](StateView s, std::span<double> out) {
            const double p1 = sigmoid(0.3 * state_sum(s));
            out[0] = 1.0 - p1;
            out[1] = p1;
        });
    }

private:
    int dim_;
};

inline std::shared_ptr<const ComparisonEnv> build_comparison_env(int state_dim) {
    return std::make_shared<const ComparisonEnv>(state_dim);
}

// ---------------------------------------------------------------------------
// Data generation and Monte Carlo truth
// ---------------------------------------------------------------------------

struct SimConfig {
    int n_trajectories = 1;
    int horizon = 1;
    int burn_in = 0;
    std::uint64_t seed = 0;
    int workers = 1;

    void validate() const {
        if (n_trajectories < 1) throw ConfigError("n_trajectories must be >= 1");
        if (horizon < 1) throw ConfigError("horizon must be >= 1");
        if (burn_in < 0) throw ConfigError("burn_in must be >= 0");
    }
};

/// Logs N behavior-policy trajectories. Trajectory i uses its own stream
/// derived from (seed, i), so output does not depend on the worker count.
inline Dataset generate_dataset(const GenerativeEnv& env, const SimConfig& cfg) {
    cfg.validate();
    Dataset data;
    data.kind = env.space_kind();
    data.state_dim = env.state_dim();
    data.n_states = env.n_states();
    data.n_actions = env.n_actions();
    data.n_mediators = env.n_mediators();
    data.trajectories.resize(static_cast<std::size_t>(cfg.n_trajectories));
    parallel_for(data.trajectories.size(), cfg.workers, [&](std::size_t i) {
        Rng rng = make_rng(cfg.seed, i);
        std::vector<double> s = env.sample_initial_state(rng);
        for (int b = 0; b < cfg.burn_in; ++b) {
            const int u = env.sample_confounder(s, rng);
            const int a = env.sample_action_behavior(s, u, rng);
            const int m = env.sample_mediator(a, s, rng);
            s = env.sample_reward_and_next(m, a, s, u, rng).next_state;
        }
        Trajectory tr;
        tr.state_dim = env.state_dim();
        tr.states.reserve(static_cast<std::size_t>(cfg.horizon + 1) * s.size());
        for (int t = 0; t < cfg.horizon; ++t) {
            const int u = env.sample_confounder(s, rng);
            const int a = env.sample_action_behavior(s, u, rng);
            const int m = env.sample_mediator(a, s, rng);
            auto step = env.sample_reward_and_next(m, a, s, u, rng);
            tr.push_step(s, a, m, step.reward);
            s = std::move(step.next_state);
        }
        tr.set_terminal(s);
        data.trajectories[i] = std::move(tr);
    });
    return data;
}

/// Smallest h with gamma^h * reward_bound / (1 - gamma) < tolerance.
inline int default_truth_horizon(double gamma, double reward_bound, double tolerance = 1e-4) {
    if (gamma <= 0.0 || reward_bound <= 0.0) return 1;
    int h = 1;
    double tail = gamma * reward_bound / (1.0 - gamma);
    while (tail >= tolerance) {
        tail *= gamma;
        ++h;
    }
    return h;
}

struct RolloutResult {
    double value = 0.0;
    double standard_error = 0.0;
    double truncation_bound = 0.0;  // gamma^h R_max / (1 - gamma)
    int horizon = 0;
    long n_rollouts = 0;
};

/// Monte Carlo value of pi under do-interventions: at every step the action
/// is drawn from pi(.|s), ignoring the confounder.
inline RolloutResult rollout_target_value(const GenerativeEnv& env, const Policy& pi, double gamma, long n_rollouts,
                                          int horizon, std::uint64_t seed, int workers = 1) {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in [0,1)");
    if (n_rollouts < 1 || horizon < 1) throw ConfigError("need positive rollout count and horizon");
    std::vector<double> returns(static_cast<std::size_t>(n_rollouts));
    // chunk rollouts so the pool overhead stays small
    constexpr long kChunk = 256;
    const std::size_t n_chunks = static_cast<std::size_t>((n_rollouts + kChunk - 1) / kChunk);
    parallel_for(n_chunks, workers, [&](std::size_t c) {
        std::vector<double> probs(static_cast<std::size_t>(pi.n_actions()));
        const long lo = static_cast<long>(c) * kChunk;
        const long hi = std::min(n_rollouts, lo + kChunk);
        for (long i = lo; i < hi; ++i) {
            Rng rng = make_rng(seed, static_cast<std::uint64_t>(i));
            std::vector<double> s = env.sample_initial_state(rng);
            double total = 0.0, discount = 1.0;
            for (int t = 0; t < horizon; ++t) {
                const int u = env.sample_confounder(s, rng);
                pi.pmf(s, probs);
                const int a = sample_index(probs, rng);
                const int m = env.sample_mediator(a, s, rng);
                auto step = env.sample_reward_and_next(m, a, s, u, rng);
                total += discount * step.reward;
                discount *= gamma;
                s = std::move(step.next_state);
            }
            returns[static_cast<std::size_t>(i)] = total;
        }
    });
    RolloutResult out;
    out.value = mean_of(returns);
    out.standard_error = std::sqrt(sample_variance(returns) / static_cast<double>(n_rollouts));
    out.truncation_bound = std::pow(gamma, horizon) * env.reward_bound() / (1.0 - gamma);
    out.horizon = horizon;
    out.n_rollouts = n_rollouts;
    return out;
}

}  // namespace cope
