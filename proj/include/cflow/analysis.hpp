#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cflow/env.hpp"
#include "cflow/flow.hpp"

namespace cflow::analysis {

struct DistinctiveCountConfig {
    Real delta_r = 0.5;
    Real delta_mse = 0.02;
    int sample_count = 10000;
};

/// Greedy sequential filter: accept a trajectory iff its return is at least
/// delta_r and its state-sequence MSE to every previously accepted
/// trajectory exceeds delta_mse. The MSE is taken over the flattened
/// next-state sequence (2 * episode_len coordinates).
int count_valid_distinctive(const std::vector<env::Trajectory>& trajectories,
                            const DistinctiveCountConfig& config);

Real trajectory_mse(const env::Trajectory& a, const env::Trajectory& b);

struct RewardCurve {
    std::vector<Real> grid; // ascending action angles, endpoints included
    std::vector<Real> raw;
    std::vector<Real> normalized;
    std::vector<Real> ground_truth_raw;
    std::vector<Real> ground_truth_normalized;
};

/// Flow output over an even action grid at one state, max-min normalized,
/// with the geometric ground-truth curve (terminal reward after walking the
/// remaining steps along each ray) for overlay.
RewardCurve reward_distribution_curve(const flow::FlowNetwork& flow_net,
                                      const env::PointRobotEnv& environment,
                                      const env::Point& state, int grid_size,
                                      int remaining_steps);

/// Indices of strict local maxima (one-sided at the endpoints).
std::vector<std::size_t> local_maxima(const std::vector<Real>& values);

std::vector<Real> max_min_normalize(const std::vector<Real>& values);

struct EstimatorErrorReport {
    std::vector<int> k_values;
    std::vector<std::vector<Real>> trial_errors; // one vector per K
    std::vector<Real> p95_errors;
    Real true_integral = 0;
    bool slope_defined = false;
    Real slope = 0; // of log(p95) vs log(K), least squares
};

/// Repeated Monte Carlo outflow estimates of an analytic flow on the 1-d
/// action box [0, mu_A], measured against a fine midpoint quadrature.
EstimatorErrorReport estimator_error_sweep(const std::function<Real(Real)>& analytic_flow,
                                           Real mu_A, const std::vector<int>& k_list,
                                           int trials, std::mt19937_64& rng,
                                           long quadrature_points = 1000000);

bool p95_non_increasing(const EstimatorErrorReport& report, Real tolerance = 0.05);

struct DagCheckReport {
    bool conservation_ok = false;
    std::vector<int> violating_nodes;
    Real max_conservation_gap = 0;
    std::vector<Real> node_flows;      // per node id
    std::vector<Real> path_flows;      // per enumerated path
    Real max_node_flow_gap = 0;        // max |sum of path flows through s - F(s)|
    bool path_sum_ok = false;

    bool ok() const { return conservation_ok && path_sum_ok; }
};

/// Verifies node conservation, computes trajectory flows via the product
/// formula and checks that the per-node path-flow sums reproduce the node
/// flows.
DagCheckReport dag_flow_oracle_check(const env::DiscreteDag& dag, Real tolerance = 1e-12);

/// The bundled diamond: s0 -> {a, b} -> sf with edge flows 2 and 3.
env::DiscreteDag diamond_dag();

/// Random DAG whose edge flows are sums of randomly drawn positive path
/// flows, so it satisfies flow matching by construction.
env::DiscreteDag make_path_sum_dag(int node_count, std::mt19937_64& rng);

struct LipschitzReport {
    std::vector<Real> action_ratio_running_max; // |dF| / |da| pairs
    std::vector<Real> state_ratio_running_max;  // |dF| / |ds| pairs

    Real max_action_ratio() const {
        return action_ratio_running_max.empty() ? 0 : action_ratio_running_max.back();
    }
    Real max_state_ratio() const {
        return state_ratio_running_max.empty() ? 0 : state_ratio_running_max.back();
    }
};

/// Accumulated maxima of finite-difference ratios of the edge flow over
/// random in-bounds pairs.
LipschitzReport lipschitz_estimate(const flow::FlowNetwork& flow_net,
                                   const std::vector<Real>& state_lower,
                                   const std::vector<Real>& state_upper,
                                   const std::vector<Real>& action_lower,
                                   const std::vector<Real>& action_upper,
                                   int sample_pairs, std::mt19937_64& rng);

void write_reward_curve_csv(const std::string& path, const RewardCurve& curve);
void write_sweep_csv(const std::string& path, const EstimatorErrorReport& report);
void write_lipschitz_csv(const std::string& path, const LipschitzReport& report);

std::string sweep_report_json(const EstimatorErrorReport& report);
std::string dag_report_json(const DagCheckReport& report);
std::string lipschitz_report_json(const LipschitzReport& report);

} // namespace cflow::analysis
