#include "cflow/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

namespace cflow::analysis {

Real trajectory_mse(const env::Trajectory& a, const env::Trajectory& b) {
    if (a.transitions.size() != b.transitions.size()) {
        throw std::invalid_argument("trajectory_mse: mixed-length trajectories");
    }
    Real sum = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < a.transitions.size(); ++i) {
        const auto& sa = a.transitions[i].next_state;
        const auto& sb = b.transitions[i].next_state;
        if (sa.size() != sb.size()) {
            throw std::invalid_argument("trajectory_mse: state dimension mismatch");
        }
        for (std::size_t d = 0; d < sa.size(); ++d) {
            const Real diff = sa[d] - sb[d];
            sum += diff * diff;
            ++count;
        }
    }
    return sum / static_cast<Real>(count);
}

int count_valid_distinctive(const std::vector<env::Trajectory>& trajectories,
                            const DistinctiveCountConfig& config) {
    if (config.sample_count < 1) {
        throw std::invalid_argument("count_valid_distinctive: sample_count must be >= 1");
    }
    std::vector<const env::Trajectory*> accepted;
    for (const auto& traj : trajectories) {
        if (traj.episode_return < config.delta_r) continue;
        bool distinct = true;
        for (const auto* prev : accepted) {
            if (trajectory_mse(traj, *prev) <= config.delta_mse) {
                distinct = false;
                break;
            }
        }
        if (distinct) accepted.push_back(&traj);
    }
    return static_cast<int>(accepted.size());
}

std::vector<Real> max_min_normalize(const std::vector<Real>& values) {
    if (values.empty()) return {};
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    std::vector<Real> out(values.size(), 0);
    if (*mx > *mn) {
        for (std::size_t i = 0; i < values.size(); ++i) {
            out[i] = (values[i] - *mn) / (*mx - *mn);
        }
    }
    return out;
}

std::vector<std::size_t> local_maxima(const std::vector<Real>& values) {
    std::vector<std::size_t> maxima;
    const std::size_t n = values.size();
    if (n < 2) return maxima;
    if (values[0] > values[1]) maxima.push_back(0);
    for (std::size_t i = 1; i + 1 < n; ++i) {
        if (values[i] > values[i - 1] && values[i] > values[i + 1]) maxima.push_back(i);
    }
    if (values[n - 1] > values[n - 2]) maxima.push_back(n - 1);
    return maxima;
}

RewardCurve reward_distribution_curve(const flow::FlowNetwork& flow_net,
                                      const env::PointRobotEnv& environment,
                                      const env::Point& state, int grid_size,
                                      int remaining_steps) {
    if (grid_size < 2) {
        throw std::invalid_argument("reward_distribution_curve: grid_size must be >= 2");
    }
    constexpr Real kHalfPi = std::numbers::pi_v<Real> / 2;
    RewardCurve curve;
    curve.grid.resize(static_cast<std::size_t>(grid_size));
    flow::Matrix actions(grid_size, 1);
    for (int i = 0; i < grid_size; ++i) {
        const Real theta = kHalfPi * static_cast<Real>(i) / static_cast<Real>(grid_size - 1);
        curve.grid[static_cast<std::size_t>(i)] = theta;
        actions(i, 0) = theta;
    }

    flow::Vector state_vec(2);
    state_vec << state[0], state[1];
    const flow::Vector lf = flow::log_flows_for_state(flow_net, state_vec, actions);
    curve.raw.resize(static_cast<std::size_t>(grid_size));
    curve.ground_truth_raw.resize(static_cast<std::size_t>(grid_size));
    for (int i = 0; i < grid_size; ++i) {
        curve.raw[static_cast<std::size_t>(i)] = std::exp(lf(i));
        const Real theta = curve.grid[static_cast<std::size_t>(i)];
        const env::Point endpoint{state[0] + remaining_steps * std::cos(theta),
                                  state[1] + remaining_steps * std::sin(theta)};
        curve.ground_truth_raw[static_cast<std::size_t>(i)] =
            environment.terminal_reward(endpoint);
    }
    curve.normalized = max_min_normalize(curve.raw);
    curve.ground_truth_normalized = max_min_normalize(curve.ground_truth_raw);
    return curve;
}

EstimatorErrorReport estimator_error_sweep(const std::function<Real(Real)>& analytic_flow,
                                           Real mu_A, const std::vector<int>& k_list,
                                           int trials, std::mt19937_64& rng,
                                           long quadrature_points) {
    if (trials < 30) throw std::invalid_argument("estimator_error_sweep: trials must be >= 30");
    for (std::size_t i = 0; i + 1 < k_list.size(); ++i) {
        if (k_list[i + 1] <= k_list[i]) {
            throw std::invalid_argument("estimator_error_sweep: K values must be increasing");
        }
    }

    // Midpoint-rule oracle on [0, mu_A].
    Real truth = 0;
    const Real h = mu_A / static_cast<Real>(quadrature_points);
    for (long i = 0; i < quadrature_points; ++i) {
        truth += analytic_flow((static_cast<Real>(i) + Real(0.5)) * h);
    }
    truth *= h;

    EstimatorErrorReport report;
    report.k_values = k_list;
    report.true_integral = truth;

    const auto integrand = [&analytic_flow](const flow::Vector& a) {
        return analytic_flow(a(0));
    };
    for (int k : k_list) {
        std::vector<Real> errors(static_cast<std::size_t>(trials));
        for (int t = 0; t < trials; ++t) {
            const auto actions = flow::sample_uniform_actions({0}, {mu_A}, k, rng);
            const Real estimate = flow::mc_estimate(integrand, actions, mu_A);
            errors[static_cast<std::size_t>(t)] = std::abs(estimate - truth);
        }
        std::sort(errors.begin(), errors.end());
        const auto rank = static_cast<std::size_t>(
            std::ceil(0.95 * static_cast<double>(trials))) - 1;
        report.p95_errors.push_back(errors[rank]);
        report.trial_errors.push_back(std::move(errors));
    }

    // Least-squares slope of log(p95) against log(K); undefined if any
    // quantile is exactly zero (constant integrands).
    report.slope_defined =
        k_list.size() >= 2 &&
        std::all_of(report.p95_errors.begin(), report.p95_errors.end(),
                    [](Real e) { return e > Real(0); });
    if (report.slope_defined) {
        const std::size_t n = k_list.size();
        Real sx = 0, sy = 0, sxx = 0, sxy = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const Real lx = std::log(static_cast<Real>(k_list[i]));
            const Real ly = std::log(report.p95_errors[i]);
            sx += lx;
            sy += ly;
            sxx += lx * lx;
            sxy += lx * ly;
        }
        report.slope = (static_cast<Real>(n) * sxy - sx * sy) /
                       (static_cast<Real>(n) * sxx - sx * sx);
    }
    return report;
}

bool p95_non_increasing(const EstimatorErrorReport& report, Real tolerance) {
    for (std::size_t i = 0; i + 1 < report.p95_errors.size(); ++i) {
        if (report.p95_errors[i + 1] > report.p95_errors[i] * (1 + tolerance)) return false;
    }
    return true;
}

DagCheckReport dag_flow_oracle_check(const env::DiscreteDag& dag, Real tolerance) {
    DagCheckReport report;
    std::vector<Real> in_sum(static_cast<std::size_t>(dag.node_count), 0);
    std::vector<Real> out_sum(static_cast<std::size_t>(dag.node_count), 0);
    for (const auto& e : dag.edges) {
        if (e.flow < 0) throw std::invalid_argument("dag edge flows must be non-negative");
        out_sum[static_cast<std::size_t>(e.from)] += e.flow;
        in_sum[static_cast<std::size_t>(e.to)] += e.flow;
    }

    report.node_flows.resize(static_cast<std::size_t>(dag.node_count));
    report.conservation_ok = true;
    report.max_conservation_gap = 0;
    for (int v = 0; v < dag.node_count; ++v) {
        const auto idx = static_cast<std::size_t>(v);
        report.node_flows[idx] = (v == dag.source) ? out_sum[idx] : in_sum[idx];
        if (v == dag.source || v == dag.sink) continue;
        const Real gap = std::abs(in_sum[idx] - out_sum[idx]);
        const Real scale = std::max(Real(1), std::max(in_sum[idx], out_sum[idx]));
        report.max_conservation_gap = std::max(report.max_conservation_gap, gap / scale);
        if (gap > tolerance * scale) {
            report.conservation_ok = false;
            report.violating_nodes.push_back(v);
        }
    }

    // Trajectory flows via the product formula, then per-node path sums.
    const auto paths = env::dag_enumerate_trajectories(dag);
    std::vector<std::vector<Real>> edge_flow(static_cast<std::size_t>(dag.node_count));
    std::vector<std::vector<Real>> edge_seen(static_cast<std::size_t>(dag.node_count));
    for (auto& row : edge_flow) row.assign(static_cast<std::size_t>(dag.node_count), 0);
    for (auto& row : edge_seen) row.assign(static_cast<std::size_t>(dag.node_count), 0);
    for (const auto& e : dag.edges) {
        edge_flow[static_cast<std::size_t>(e.from)][static_cast<std::size_t>(e.to)] += e.flow;
        edge_seen[static_cast<std::size_t>(e.from)][static_cast<std::size_t>(e.to)] = 1;
    }

    std::vector<Real> path_sum(static_cast<std::size_t>(dag.node_count), 0);
    for (const auto& path : paths) {
        Real numerator = 1, denominator = 1;
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
            numerator *= edge_flow[static_cast<std::size_t>(path[i])]
                                  [static_cast<std::size_t>(path[i + 1])];
        }
        for (std::size_t i = 1; i + 1 < path.size(); ++i) {
            denominator *= report.node_flows[static_cast<std::size_t>(path[i])];
        }
        const Real f_tau = denominator > 0 ? numerator / denominator : 0;
        report.path_flows.push_back(f_tau);
        for (int node : path) path_sum[static_cast<std::size_t>(node)] += f_tau;
    }

    report.path_sum_ok = true;
    report.max_node_flow_gap = 0;
    for (int v = 0; v < dag.node_count; ++v) {
        const auto idx = static_cast<std::size_t>(v);
        const Real gap = std::abs(path_sum[idx] - report.node_flows[idx]);
        const Real scale = std::max(Real(1), report.node_flows[idx]);
        report.max_node_flow_gap = std::max(report.max_node_flow_gap, gap / scale);
        if (gap > tolerance * scale) report.path_sum_ok = false;
    }
    return report;
}

env::DiscreteDag diamond_dag() {
    return env::DiscreteDag{4, {{0, 1, 2.0}, {0, 2, 3.0}, {1, 3, 2.0}, {2, 3, 3.0}}, 0, 3};
}

env::DiscreteDag make_path_sum_dag(int node_count, std::mt19937_64& rng) {
    if (node_count < 2) throw std::invalid_argument("path-sum dag needs >= 2 nodes");
    env::DiscreteDag dag;
    dag.node_count = node_count;
    dag.source = 0;
    dag.sink = node_count - 1;

    // A backbone chain keeps the sink reachable; extra forward edges add
    // alternative routes. Edges go from lower to higher ids only.
    std::vector<std::pair<int, int>> structure;
    for (int v = 0; v + 1 < node_count; ++v) structure.emplace_back(v, v + 1);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    for (int u = 0; u < node_count; ++u) {
        for (int v = u + 2; v < node_count; ++v) {
            if (coin(rng) < 0.4) structure.emplace_back(u, v);
        }
    }

    env::DiscreteDag skeleton = dag;
    for (auto [u, v] : structure) skeleton.edges.push_back({u, v, 0.0});
    const auto paths = env::dag_enumerate_trajectories(skeleton);

    std::uniform_real_distribution<double> flow_dist(0.1, 10.0);
    std::vector<std::vector<Real>> edge_flow(
        static_cast<std::size_t>(node_count),
        std::vector<Real>(static_cast<std::size_t>(node_count), 0));
    for (const auto& path : paths) {
        const Real f = static_cast<Real>(flow_dist(rng));
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
            edge_flow[static_cast<std::size_t>(path[i])]
                     [static_cast<std::size_t>(path[i + 1])] += f;
        }
    }
    for (auto [u, v] : structure) {
        const Real f = edge_flow[static_cast<std::size_t>(u)][static_cast<std::size_t>(v)];
        if (f > 0) dag.edges.push_back({u, v, f});
    }
    return dag;
}

LipschitzReport lipschitz_estimate(const flow::FlowNetwork& flow_net,
                                   const std::vector<Real>& state_lower,
                                   const std::vector<Real>& state_upper,
                                   const std::vector<Real>& action_lower,
                                   const std::vector<Real>& action_upper,
                                   int sample_pairs, std::mt19937_64& rng) {
    if (sample_pairs < 1) {
        throw std::invalid_argument("lipschitz_estimate: sample_pairs must be >= 1");
    }
    const auto sample_box = [&rng](const std::vector<Real>& lo,
                                   const std::vector<Real>& hi) {
        flow::Vector v(static_cast<Eigen::Index>(lo.size()));
        for (std::size_t d = 0; d < lo.size(); ++d) {
            std::uniform_real_distribution<double> dist(lo[d], hi[d]);
            v(static_cast<Eigen::Index>(d)) = static_cast<Real>(dist(rng));
        }
        return v;
    };

    LipschitzReport report;
    Real action_max = 0, state_max = 0;
    for (int i = 0; i < sample_pairs; ++i) {
        const auto s = sample_box(state_lower, state_upper);
        const auto a1 = sample_box(action_lower, action_upper);
        const auto a2 = sample_box(action_lower, action_upper);
        const Real da = (a1 - a2).norm();
        if (da > 0) {
            const Real ratio = std::abs(flow::edge_flow(flow_net, s, a1) -
                                        flow::edge_flow(flow_net, s, a2)) /
                               da;
            action_max = std::max(action_max, ratio);
        }
        report.action_ratio_running_max.push_back(action_max);

        const auto s1 = sample_box(state_lower, state_upper);
        const auto s2 = sample_box(state_lower, state_upper);
        const auto a = sample_box(action_lower, action_upper);
        const Real ds = (s1 - s2).norm();
        if (ds > 0) {
            const Real ratio = std::abs(flow::edge_flow(flow_net, s1, a) -
                                        flow::edge_flow(flow_net, s2, a)) /
                               ds;
            state_max = std::max(state_max, ratio);
        }
        report.state_ratio_running_max.push_back(state_max);
    }
    return report;
}

void write_reward_curve_csv(const std::string& path, const RewardCurve& curve) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << "theta,flow,flow_normalized,ground_truth,ground_truth_normalized\n";
    out.precision(17);
    for (std::size_t i = 0; i < curve.grid.size(); ++i) {
        out << curve.grid[i] << ',' << curve.raw[i] << ',' << curve.normalized[i] << ','
            << curve.ground_truth_raw[i] << ',' << curve.ground_truth_normalized[i]
            << '\n';
    }
}

void write_sweep_csv(const std::string& path, const EstimatorErrorReport& report) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << "k,p95_error\n";
    out.precision(17);
    for (std::size_t i = 0; i < report.k_values.size(); ++i) {
        out << report.k_values[i] << ',' << report.p95_errors[i] << '\n';
    }
}

void write_lipschitz_csv(const std::string& path, const LipschitzReport& report) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << "pair,action_ratio_running_max,state_ratio_running_max\n";
    out.precision(17);
    for (std::size_t i = 0; i < report.action_ratio_running_max.size(); ++i) {
        out << i << ',' << report.action_ratio_running_max[i] << ','
            << report.state_ratio_running_max[i] << '\n';
    }
}

std::string sweep_report_json(const EstimatorErrorReport& report) {
    nlohmann::json j;
    j["k_values"] = report.k_values;
    j["p95_errors"] = report.p95_errors;
    j["true_integral"] = report.true_integral;
    j["slope_defined"] = report.slope_defined;
    if (report.slope_defined) {
        j["slope"] = report.slope;
    } else {
        j["slope"] = nullptr;
    }
    return j.dump(2);
}

std::string dag_report_json(const DagCheckReport& report) {
    nlohmann::json j;
    j["conservation_ok"] = report.conservation_ok;
    j["violating_nodes"] = report.violating_nodes;
    j["max_conservation_gap"] = report.max_conservation_gap;
    j["node_flows"] = report.node_flows;
    j["path_flows"] = report.path_flows;
    j["max_node_flow_gap"] = report.max_node_flow_gap;
    j["path_sum_ok"] = report.path_sum_ok;
    return j.dump(2);
}

std::string lipschitz_report_json(const LipschitzReport& report) {
    nlohmann::json j;
    j["samples"] = report.action_ratio_running_max.size();
    j["max_action_ratio"] = report.max_action_ratio();
    j["max_state_ratio"] = report.max_state_ratio();
    return j.dump(2);
}

} // namespace cflow::analysis
