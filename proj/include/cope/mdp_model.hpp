#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cope/common.hpp"

namespace cope {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Tabular confounded MDP with mediators
// ---------------------------------------------------------------------------

struct TabularDims {
    int states = 0;
    int actions = 0;
    int mediators = 0;
    int confounders = 0;
    int reward_levels = 0;
};

/// Display values for the dense indices (e.g. actions {-1,0,1} -> 0,1,2).
struct LabelTables {
    std::vector<double> states;
    std::vector<double> actions;
    std::vector<double> mediators;
    std::vector<double> confounders;
};

/**
 * Full generative specification of a finite CMDPWM.
 *
 * Storage is flattened row-major with the outcome index fastest:
 *   p_u  [s][u]            p_u(u|s)
 *   p_a  [s][u][a]         p_a(a|s,u)
 *   p_m  [s][a][m]         p_m(m|a,s)      (no confounder index)
 *   p_sr [s][u][a][m][s'][r]  joint pmf of (next state, reward level)
 *   nu   [s]               initial-state pmf
 * Every row is validated on construction; rows off by more than 1e-12 are
 * rejected rather than renormalized.
 */
class TabularCmdpwm {
public:
    TabularCmdpwm(TabularDims dims, std::vector<double> p_u, std::vector<double> p_a, std::vector<double> p_m,
                  std::vector<double> p_sr, std::vector<double> reward_levels, std::vector<double> nu,
                  LabelTables labels = {})
        : dims_(dims),
          p_u_(std::move(p_u)),
          p_a_(std::move(p_a)),
          p_m_(std::move(p_m)),
          p_sr_(std::move(p_sr)),
          rewards_(std::move(reward_levels)),
          nu_(std::move(nu)),
          labels_(std::move(labels)) {
        validate();
    }

    const TabularDims& dims() const { return dims_; }
    int n_states() const { return dims_.states; }
    int n_actions() const { return dims_.actions; }
    int n_mediators() const { return dims_.mediators; }
    int n_confounders() const { return dims_.confounders; }
    int n_reward_levels() const { return dims_.reward_levels; }

    double p_u(int u, int s) const { return p_u_[idx(s) * dims_.confounders + u]; }
    double p_a(int a, int s, int u) const {
        return p_a_[(idx(s) * dims_.confounders + u) * dims_.actions + a];
    }
    double p_m(int m, int a, int s) const { return p_m_[(idx(s) * dims_.actions + a) * dims_.mediators + m]; }
    double p_sr(int s_next, int r, int m, int a, int s, int u) const {
        return p_sr_[sr_row(m, a, s, u) + static_cast<std::size_t>(s_next) * dims_.reward_levels + r];
    }
    double nu(int s) const { return nu_[idx(s)]; }
    double reward(int r) const { return rewards_[static_cast<std::size_t>(r)]; }

    std::span<const double> p_u_row(int s) const {
        return {p_u_.data() + idx(s) * dims_.confounders, static_cast<std::size_t>(dims_.confounders)};
    }
    std::span<const double> p_a_row(int s, int u) const {
        return {p_a_.data() + (idx(s) * dims_.confounders + u) * dims_.actions,
                static_cast<std::size_t>(dims_.actions)};
    }
    std::span<const double> p_m_row(int a, int s) const {
        return {p_m_.data() + (idx(s) * dims_.actions + a) * dims_.mediators,
                static_cast<std::size_t>(dims_.mediators)};
    }
    /// Joint (s', r) pmf, laid out [s'][r].
    std::span<const double> p_sr_row(int m, int a, int s, int u) const {
        return {p_sr_.data() + sr_row(m, a, s, u),
                static_cast<std::size_t>(dims_.states) * static_cast<std::size_t>(dims_.reward_levels)};
    }

    const std::vector<double>& initial_distribution() const { return nu_; }
    const std::vector<double>& reward_levels() const { return rewards_; }
    const LabelTables& labels() const { return labels_; }

    const std::vector<double>& raw_p_u() const { return p_u_; }
    const std::vector<double>& raw_p_a() const { return p_a_; }
    const std::vector<double>& raw_p_m() const { return p_m_; }
    const std::vector<double>& raw_p_sr() const { return p_sr_; }

    /// max |reward level|
    double reward_bound() const {
        double r = 0.0;
        for (double x : rewards_) r = std::max(r, std::abs(x));
        return r;
    }

    /// Same dynamics with a different initial distribution.
    TabularCmdpwm with_initial(std::vector<double> nu) const {
        return TabularCmdpwm(dims_, p_u_, p_a_, p_m_, p_sr_, rewards_, std::move(nu), labels_);
    }

    void check_state(int s) const {
        if (s < 0 || s >= dims_.states) throw IndexOutOfRange("state index " + std::to_string(s) + " out of range");
    }
    void check_action(int a) const {
        if (a < 0 || a >= dims_.actions)
            throw IndexOutOfRange("action index " + std::to_string(a) + " out of range");
    }
    void check_mediator(int m) const {
        if (m < 0 || m >= dims_.mediators)
            throw IndexOutOfRange("mediator index " + std::to_string(m) + " out of range");
    }

private:
    static std::size_t idx(int i) { return static_cast<std::size_t>(i); }

    std::size_t sr_row(int m, int a, int s, int u) const {
        const std::size_t row = ((idx(s) * dims_.confounders + u) * dims_.actions + a) * dims_.mediators + m;
        return row * static_cast<std::size_t>(dims_.states) * static_cast<std::size_t>(dims_.reward_levels);
    }

    static void check_rows(const std::vector<double>& v, std::size_t rows, std::size_t width, const char* name) {
        if (v.size() != rows * width)
            throw InvalidSpec(std::string(name) + ": expected " + std::to_string(rows * width) + " entries, got " +
                              std::to_string(v.size()));
        for (std::size_t r = 0; r < rows; ++r) {
            double sum = 0.0;
            for (std::size_t k = 0; k < width; ++k) {
                const double p = v[r * width + k];
                if (!std::isfinite(p) || p < 0.0)
                    throw InvalidSpec(std::string(name) + ": negative or non-finite entry in row " + std::to_string(r));
                sum += p;
            }
            if (std::abs(sum - 1.0) > kPmfTolerance)
                throw InvalidSpec(std::string(name) + ": row " + std::to_string(r) + " sums to " + std::to_string(sum));
        }
    }

    void validate() {
        const auto& d = dims_;
        if (d.states < 1 || d.actions < 1 || d.mediators < 1 || d.confounders < 1 || d.reward_levels < 1)
            throw InvalidSpec("all dimensions must be positive");
        const std::size_t S = idx(d.states), U = idx(d.confounders), A = idx(d.actions), M = idx(d.mediators),
                          R = idx(d.reward_levels);
        check_rows(p_u_, S, U, "p_u");
        check_rows(p_a_, S * U, A, "p_a");
        check_rows(p_m_, S * A, M, "p_m");
        check_rows(p_sr_, S * U * A * M, S * R, "p_sr");
        check_rows(nu_, 1, S, "nu");
        if (rewards_.size() != R) throw InvalidSpec("reward_levels size mismatch");
        for (double r : rewards_)
            if (!std::isfinite(r)) throw InvalidSpec("reward levels must be finite");
        auto default_labels = [](std::vector<double>& l, std::size_t n, const char* name) {
            if (l.empty()) {
                l.resize(n);
                std::iota(l.begin(), l.end(), 0.0);
            } else if (l.size() != n) {
                throw InvalidSpec(std::string("label table '") + name + "' size mismatch");
            }
        };
        default_labels(labels_.states, S, "states");
        default_labels(labels_.actions, A, "actions");
        default_labels(labels_.mediators, M, "mediators");
        default_labels(labels_.confounders, U, "confounders");
    }

    TabularDims dims_;
    std::vector<double> p_u_, p_a_, p_m_, p_sr_, rewards_, nu_;
    LabelTables labels_;
};

inline json to_json(const TabularCmdpwm& spec) {
    const auto& d = spec.dims();
    return json{{"dims",
                 {{"states", d.states},
                  {"actions", d.actions},
                  {"mediators", d.mediators},
                  {"confounders", d.confounders},
                  {"reward_levels", d.reward_levels}}},
                {"p_u", spec.raw_p_u()},
                {"p_a", spec.raw_p_a()},
                {"p_m", spec.raw_p_m()},
                {"p_sr", spec.raw_p_sr()},
                {"reward_levels", spec.reward_levels()},
                {"nu", spec.initial_distribution()},
                {"labels",
                 {{"states", spec.labels().states},
                  {"actions", spec.labels().actions},
                  {"mediators", spec.labels().mediators},
                  {"confounders", spec.labels().confounders}}}};
}

inline TabularCmdpwm tabular_from_json(const json& j) {
    try {
        const auto& d = j.at("dims");
        TabularDims dims{d.at("states").get<int>(), d.at("actions").get<int>(), d.at("mediators").get<int>(),
                         d.at("confounders").get<int>(), d.at("reward_levels").get<int>()};
        LabelTables labels;
        if (j.contains("labels")) {
            const auto& l = j.at("labels");
            labels.states = l.value("states", std::vector<double>{});
            labels.actions = l.value("actions", std::vector<double>{});
            labels.mediators = l.value("mediators", std::vector<double>{});
            labels.confounders = l.value("confounders", std::vector<double>{});
        }
        return TabularCmdpwm(dims, j.at("p_u").get<std::vector<double>>(), j.at("p_a").get<std::vector<double>>(),
                             j.at("p_m").get<std::vector<double>>(), j.at("p_sr").get<std::vector<double>>(),
                             j.at("reward_levels").get<std::vector<double>>(), j.at("nu").get<std::vector<double>>(),
                             std::move(labels));
    } catch (const json::exception& e) {
        throw InvalidSpec(std::string("malformed tabular spec JSON: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

/// Stochastic target policy pi(a|s). Either a lookup table over dense state
/// indices or a callable on state vectors.
class Policy {
public:
    using Function = std::function<void(StateView, std::span<double>)>;

    static Policy tabular(int n_actions, std::vector<double> table) {
        if (n_actions < 1 || table.empty() || table.size() % static_cast<std::size_t>(n_actions) != 0)
            throw InvalidSpec("policy table size must be a multiple of n_actions");
        for (std::size_t row = 0; row < table.size() / static_cast<std::size_t>(n_actions); ++row)
            check_pmf({table.data() + row * static_cast<std::size_t>(n_actions), static_cast<std::size_t>(n_actions)});
        Policy p;
        p.n_actions_ = n_actions;
        p.table_ = std::make_shared<const std::vector<double>>(std::move(table));
        return p;
    }

    static Policy from_function(int n_actions, Function fn) {
        if (n_actions < 1) throw InvalidSpec("policy needs at least one action");
        Policy p;
        p.n_actions_ = n_actions;
        p.fn_ = std::make_shared<const Function>(std::move(fn));
        return p;
    }

    static Policy uniform(int n_actions) {
        return from_function(n_actions, [n_actions](StateView, std::span<double> out) {
            std::fill(out.begin(), out.end(), 1.0 / n_actions);
        });
    }

    int n_actions() const { return n_actions_; }
    bool is_tabular() const { return table_ != nullptr; }
    int n_table_states() const {
        return table_ ? static_cast<int>(table_->size()) / n_actions_ : 0;
    }

    void pmf(StateView s, std::span<double> out) const {
        if (table_) {
            const int row = state_index(s);
            if (row < 0 || row >= n_table_states())
                throw IndexOutOfRange("policy table has no row for state " + std::to_string(row));
            std::copy_n(table_->begin() + static_cast<std::ptrdiff_t>(row) * n_actions_, n_actions_, out.begin());
        } else {
            (*fn_)(s, out);
            check_pmf(out);
        }
    }

    std::vector<double> pmf(StateView s) const {
        std::vector<double> out(static_cast<std::size_t>(n_actions_));
        pmf(s, out);
        return out;
    }

    double prob(int a, StateView s) const { return pmf(s)[static_cast<std::size_t>(a)]; }

private:
    static void check_pmf(std::span<const double> p) {
        double sum = 0.0;
        for (double x : p) {
            if (!(x >= 0.0) || !std::isfinite(x)) throw InvalidSpec("policy pmf has a negative or non-finite entry");
            sum += x;
        }
        if (std::abs(sum - 1.0) > kPmfTolerance) throw InvalidSpec("policy pmf does not sum to one");
    }

    int n_actions_ = 0;
    std::shared_ptr<const std::vector<double>> table_;
    std::shared_ptr<const Function> fn_;
};

// ---------------------------------------------------------------------------
// Trajectories and datasets
// ---------------------------------------------------------------------------

/// One logged trajectory. States are stored row-major, T+1 rows of
/// `state_dim` coordinates; the final row is the terminal state S_T.
struct Trajectory {
    int state_dim = 1;
    std::vector<double> states;
    std::vector<int> actions;
    std::vector<int> mediators;
    std::vector<double> rewards;

    int length() const { return static_cast<int>(actions.size()); }
    StateView state(int t) const {
        return {states.data() + static_cast<std::size_t>(t) * static_cast<std::size_t>(state_dim),
                static_cast<std::size_t>(state_dim)};
    }
    StateView terminal_state() const { return state(length()); }

    void push_step(StateView s, int a, int m, double r) {
        states.insert(states.end(), s.begin(), s.end());
        actions.push_back(a);
        mediators.push_back(m);
        rewards.push_back(r);
    }
    void set_terminal(StateView s) { states.insert(states.end(), s.begin(), s.end()); }
};

enum class SpaceKind { tabular, continuous };

struct Dataset {
    SpaceKind kind = SpaceKind::tabular;
    int state_dim = 1;
    int n_states = 0;  // tabular only
    int n_actions = 0;
    int n_mediators = 0;
    std::vector<Trajectory> trajectories;

    int size() const { return static_cast<int>(trajectories.size()); }
    bool tabular() const { return kind == SpaceKind::tabular; }

    long total_steps() const {
        long n = 0;
        for (const auto& tr : trajectories) n += tr.length();
        return n;
    }

    void validate() const {
        if (trajectories.empty()) throw EmptyDataset("dataset has no trajectories");
        if (kind == SpaceKind::tabular && state_dim != 1) throw InvalidSpec("tabular datasets have 1-d states");
        for (const auto& tr : trajectories) {
            if (tr.length() < 1) throw InvalidSpec("trajectory length must be at least 1");
            if (tr.state_dim != state_dim) throw InvalidSpec("trajectory state dimension mismatch");
            if (tr.states.size() != static_cast<std::size_t>(tr.length() + 1) * static_cast<std::size_t>(state_dim) ||
                tr.mediators.size() != tr.actions.size() || tr.rewards.size() != tr.actions.size())
                throw InvalidSpec("trajectory arrays have inconsistent lengths");
            for (int t = 0; t < tr.length(); ++t) {
                if (tr.actions[t] < 0 || tr.actions[t] >= n_actions) throw IndexOutOfRange("action out of range");
                if (tr.mediators[t] < 0 || tr.mediators[t] >= n_mediators)
                    throw IndexOutOfRange("mediator out of range");
            }
            if (kind == SpaceKind::tabular) {
                for (int t = 0; t <= tr.length(); ++t) {
                    const int s = state_index(tr.state(t));
                    if (s < 0 || s >= n_states) throw IndexOutOfRange("state out of range");
                }
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Exact front-door marginalizations
// ---------------------------------------------------------------------------

/// p_a*(a|s) = sum_u p_a(a|s,u) p_u(u|s)
inline std::vector<double> marginal_behavior_policy(const TabularCmdpwm& spec, int s) {
    spec.check_state(s);
    std::vector<double> out(static_cast<std::size_t>(spec.n_actions()), 0.0);
    for (int u = 0; u < spec.n_confounders(); ++u) {
        const double w = spec.p_u(u, s);
        const auto row = spec.p_a_row(s, u);
        for (int a = 0; a < spec.n_actions(); ++a) out[a] += w * row[a];
    }
    return out;
}

/// p(u|s,a) by Bayes' rule.
inline std::vector<double> posterior_confounder(const TabularCmdpwm& spec, int s, int a) {
    spec.check_state(s);
    spec.check_action(a);
    std::vector<double> out(static_cast<std::size_t>(spec.n_confounders()));
    double marginal = 0.0;
    for (int u = 0; u < spec.n_confounders(); ++u) {
        out[u] = spec.p_a(a, s, u) * spec.p_u(u, s);
        marginal += out[u];
    }
    if (!(marginal > 0.0))
        throw ZeroMarginal("p_a*(a|s) is zero for s=" + std::to_string(s) + ", a=" + std::to_string(a));
    for (double& p : out) p /= marginal;
    return out;
}

/// p*_{s,r}(s', r | m, a, s): confounder integrated against its posterior
/// given (s, a). Valid because the mediator does not read u. Layout [s'][r].
inline std::vector<double> marginal_transition(const TabularCmdpwm& spec, int m, int a, int s) {
    spec.check_mediator(m);
    const auto post = posterior_confounder(spec, s, a);
    std::vector<double> out(static_cast<std::size_t>(spec.n_states()) * spec.n_reward_levels(), 0.0);
    for (int u = 0; u < spec.n_confounders(); ++u) {
        if (post[u] == 0.0) continue;
        const auto row = spec.p_sr_row(m, a, s, u);
        for (std::size_t k = 0; k < out.size(); ++k) out[k] += post[u] * row[k];
    }
    return out;
}

}  // namespace cope
