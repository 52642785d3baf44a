#pragma once

#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cope/mdp_model.hpp"

namespace cope {

/// Shortest round-trip decimal form.
inline std::string format_double(double x) {
    char buf[32];
    for (int precision = 15; precision <= 17; ++precision) {
        std::snprintf(buf, sizeof buf, "%.*g", precision, x);
        if (std::strtod(buf, nullptr) == x) break;
    }
    return buf;
}

/**
 * Columnar CSV: traj_id,t,<state columns>,action,mediator,reward.
 * Tabular datasets use a single `s` column; continuous ones use s0..s{d-1}.
 * The terminal state of each trajectory is a row with t = T and empty
 * action, mediator and reward cells.
 */
inline void write_dataset_csv(std::ostream& os, const Dataset& data) {
    os << "traj_id,t,";
    if (data.tabular()) {
        os << "s,";
    } else {
        for (int k = 0; k < data.state_dim; ++k) os << 's' << k << ',';
    }
    os << "action,mediator,reward\n";
    for (std::size_t i = 0; i < data.trajectories.size(); ++i) {
        const auto& tr = data.trajectories[i];
        for (int t = 0; t <= tr.length(); ++t) {
            os << i << ',' << t << ',';
            for (double x : tr.state(t)) os << format_double(x) << ',';
            if (t < tr.length())
                os << tr.actions[t] << ',' << tr.mediators[t] << ',' << format_double(tr.rewards[t]) << '\n';
            else
                os << ",,\n";
        }
    }
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}
}  // namespace detail

/// Reads the format produced by write_dataset_csv. Space sizes not given
/// explicitly (n_actions etc. <= 0) are inferred as max index + 1.
inline Dataset read_dataset_csv(std::istream& is, int n_states = 0, int n_actions = 0, int n_mediators = 0) {
    std::string line;
    if (!std::getline(is, line)) throw EmptyDataset("empty dataset CSV");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = detail::split_csv_line(line);
    if (header.size() < 6 || header[0] != "traj_id" || header[1] != "t")
        throw InvalidSpec("dataset CSV header must start with traj_id,t");
    const int dim = static_cast<int>(header.size()) - 5;
    Dataset data;
    data.kind = header[2] == "s" ? SpaceKind::tabular : SpaceKind::continuous;
    data.state_dim = dim;
    int max_s = -1, max_a = -1, max_m = -1;
    long current = -1;
    long lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size()) throw InvalidSpec("dataset CSV line " + std::to_string(lineno) + ": bad width");
        const long id = std::stol(cells[0]);
        if (id != current) {
            if (id != current + 1) throw InvalidSpec("dataset CSV trajectories must be contiguous and ordered");
            current = id;
            data.trajectories.emplace_back();
            data.trajectories.back().state_dim = dim;
        }
        auto& tr = data.trajectories.back();
        std::vector<double> s(static_cast<std::size_t>(dim));
        for (int k = 0; k < dim; ++k) s[k] = std::stod(cells[2 + k]);
        if (data.tabular()) max_s = std::max(max_s, state_index(s));
        const auto& a_cell = cells[2 + dim];
        if (a_cell.empty()) {
            tr.set_terminal(s);
        } else {
            const int a = std::stoi(a_cell), m = std::stoi(cells[3 + dim]);
            tr.push_step(s, a, m, std::stod(cells[4 + dim]));
            max_a = std::max(max_a, a);
            max_m = std::max(max_m, m);
        }
    }
    data.n_states = data.tabular() ? (n_states > 0 ? n_states : max_s + 1) : 0;
    data.n_actions = n_actions > 0 ? n_actions : max_a + 1;
    data.n_mediators = n_mediators > 0 ? n_mediators : max_m + 1;
    data.validate();
    return data;
}

}  // namespace cope
