#include "cflow/env.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace cflow::env {

namespace {
constexpr Real kHalfPi = std::numbers::pi_v<Real> / 2;
}

PointRobotEnv::PointRobotEnv(PointRobotConfig config) : config_(std::move(config)) {
    if (config_.goals.empty()) {
        throw std::invalid_argument("point robot: goals must be non-empty");
    }
    if (config_.reward_sigma <= Real(0)) {
        throw std::invalid_argument("point robot: reward_sigma must be > 0");
    }
    if (config_.episode_len < 1) {
        throw std::invalid_argument("point robot: episode_len must be >= 1");
    }
}

Point PointRobotEnv::reset() {
    step_index_ = 0;
    return config_.start;
}

Point PointRobotEnv::translate(const Point& state, Real theta) {
    return {state[0] + std::cos(theta), state[1] + std::sin(theta)};
}

Point PointRobotEnv::parent_of(const Point& next_state, Real theta) {
    return {next_state[0] - std::cos(theta), next_state[1] - std::sin(theta)};
}

StepResult PointRobotEnv::step(const Point& state, Real theta) {
    if (theta < Real(0) || theta > kHalfPi) {
        theta = std::clamp(theta, Real(0), kHalfPi);
        ++clamped_actions_;
    }
    StepResult result;
    result.next_state = translate(state, theta);
    ++step_index_;
    result.done = step_index_ >= config_.episode_len;
    result.reward = result.done ? terminal_reward(result.next_state) : Real(0);
    return result;
}

Real PointRobotEnv::terminal_reward(const Point& state) const {
    Real best = 0;
    for (const auto& g : config_.goals) {
        const Real dx = state[0] - g[0];
        const Real dy = state[1] - g[1];
        const Real d2 = dx * dx + dy * dy;
        best = std::max(best, std::exp(-d2 / (2 * config_.reward_sigma * config_.reward_sigma)));
    }
    return best;
}

EnvSpec PointRobotEnv::spec() const {
    EnvSpec s;
    s.state_dim = 2;
    s.action_dim = 1;
    s.action_lower = {0};
    s.action_upper = {kHalfPi};
    s.mu_A = kHalfPi;
    s.diam_A = kHalfPi;
    // Reachable set is a quarter disc of radius episode_len around the start;
    // its diameter is the corner-to-corner distance.
    s.diam_S = Real(config_.episode_len) * std::sqrt(Real(2));
    s.max_episode_len = config_.episode_len;
    return s;
}

PointRobotEnv make_env(const std::string& id) {
    PointRobotConfig config;
    config.start = {0, 0};
    config.reward_sigma = 2.0;
    config.episode_len = 12;
    if (id == "point-robot-sparse") {
        config.goals = {{5, 10}, {10, 5}};
    } else if (id == "point-robot-onegoal-sparse") {
        config.goals = {{5, 10}};
    } else {
        throw std::invalid_argument("unknown environment id: '" + id + "'");
    }
    return PointRobotEnv(config);
}

bool env_registered(const std::string& id) {
    return id == "point-robot-sparse" || id == "point-robot-onegoal-sparse";
}

std::vector<std::string> registered_envs() {
    return {"point-robot-sparse", "point-robot-onegoal-sparse"};
}

bool trajectory_chains(const Trajectory& traj) {
    for (std::size_t i = 0; i + 1 < traj.transitions.size(); ++i) {
        if (traj.transitions[i].next_state != traj.transitions[i + 1].state) return false;
    }
    if (traj.transitions.empty()) return true;
    for (std::size_t i = 0; i < traj.transitions.size(); ++i) {
        const bool last = (i + 1 == traj.transitions.size());
        if (traj.transitions[i].done != last) return false;
    }
    return true;
}

void write_trajectories_csv(const std::string& path,
                            const std::vector<Trajectory>& trajectories) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << "episode,step,s_x,s_y,theta,reward,done\n";
    out.precision(17);
    for (std::size_t e = 0; e < trajectories.size(); ++e) {
        for (const auto& t : trajectories[e].transitions) {
            out << e << ',' << t.step_index << ',' << t.state[0] << ',' << t.state[1]
                << ',' << t.action[0] << ',' << t.reward << ',' << (t.done ? 1 : 0)
                << '\n';
        }
    }
}

std::vector<std::vector<int>> dag_enumerate_trajectories(const DiscreteDag& dag) {
    std::vector<std::vector<int>> adjacency(dag.node_count);
    for (const auto& e : dag.edges) {
        if (e.from < 0 || e.from >= dag.node_count || e.to < 0 || e.to >= dag.node_count) {
            throw std::invalid_argument("dag edge endpoint out of range");
        }
        adjacency[e.from].push_back(e.to);
    }

    // Cycle check: DFS coloring over the whole edge set.
    std::vector<int> color(dag.node_count, 0); // 0 white, 1 grey, 2 black
    std::vector<int> stack;
    for (int start = 0; start < dag.node_count; ++start) {
        if (color[start] != 0) continue;
        stack.push_back(start);
        std::vector<std::size_t> next_child(dag.node_count, 0);
        color[start] = 1;
        while (!stack.empty()) {
            const int u = stack.back();
            if (next_child[u] < adjacency[u].size()) {
                const int v = adjacency[u][next_child[u]++];
                if (color[v] == 1) {
                    throw std::runtime_error("dag contains a cycle through node " +
                                             std::to_string(v));
                }
                if (color[v] == 0) {
                    color[v] = 1;
                    stack.push_back(v);
                }
            } else {
                color[u] = 2;
                stack.pop_back();
            }
        }
    }

    std::vector<std::vector<int>> paths;
    std::vector<int> current{dag.source};
    // Recursive enumeration; node counts stay tiny for the oracle DAGs.
    auto dfs = [&](auto&& self, int node) -> void {
        if (node == dag.sink) {
            paths.push_back(current);
            return;
        }
        for (int child : adjacency[node]) {
            current.push_back(child);
            self(self, child);
            current.pop_back();
        }
    };
    dfs(dfs, dag.source);
    return paths;
}

} // namespace cflow::env
