#pragma once

#include <array>
#include <string>
#include <vector>

#include "cflow/common.hpp"

namespace cflow::env {

using Point = std::array<Real, 2>;

/// Geometry constants of an environment's action and state spaces.
struct EnvSpec {
    int state_dim = 2;
    int action_dim = 1;
    std::vector<Real> action_lower;
    std::vector<Real> action_upper;
    Real mu_A = 0;    // Lebesgue measure of the action box
    Real diam_A = 0;  // diameter of the action box
    Real diam_S = 0;  // diameter of the reachable state set
    int max_episode_len = 1;
};

struct PointRobotConfig {
    Point start{0, 0};
    std::vector<Point> goals;
    Real reward_sigma = 2.0;
    int episode_len = 12;
};

struct Transition {
    std::vector<Real> state;
    std::vector<Real> action;
    Real reward = 0;
    std::vector<Real> next_state;
    bool done = false;
    int step_index = 0;
};

struct Trajectory {
    std::vector<Transition> transitions;
    Real episode_return = 0;
};

struct StepResult {
    Point next_state;
    Real reward = 0;
    bool done = false;
};

/// Translation-action point robot: one step of unit length at angle
/// theta in [0, pi/2], reward only on the final step of an episode.
class PointRobotEnv {
  public:
    explicit PointRobotEnv(PointRobotConfig config);

    Point reset();
    StepResult step(const Point& state, Real theta);

    Real terminal_reward(const Point& state) const;

    const PointRobotConfig& config() const { return config_; }
    EnvSpec spec() const;
    int step_index() const { return step_index_; }
    long clamped_actions() const { return clamped_actions_; }

    /// Deterministic transition rule, independent of episode bookkeeping.
    static Point translate(const Point& state, Real theta);
    /// Closed-form parent of (next_state, theta) under the translation rule.
    static Point parent_of(const Point& next_state, Real theta);

  private:
    PointRobotConfig config_;
    int step_index_ = 0;
    long clamped_actions_ = 0;
};

/// Environment variants registered by string id.
PointRobotEnv make_env(const std::string& id);
bool env_registered(const std::string& id);
std::vector<std::string> registered_envs();

bool trajectory_chains(const Trajectory& traj);

/// One row per transition: episode, step, s_x, s_y, theta, reward, done.
void write_trajectories_csv(const std::string& path,
                            const std::vector<Trajectory>& trajectories);

// ---- Discrete DAG used as the flow-matching oracle ----

struct DagEdge {
    int from = 0;
    int to = 0;
    Real flow = 0;
};

struct DiscreteDag {
    int node_count = 0;
    std::vector<DagEdge> edges;
    int source = 0;
    int sink = 0;
};

/// Exhaustive list of source->sink paths (as node sequences) via
/// depth-first enumeration. Throws if the edge set contains a cycle.
std::vector<std::vector<int>> dag_enumerate_trajectories(const DiscreteDag& dag);

} // namespace cflow::env
