#include "cflow/cli.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cflow/analysis.hpp"
#include "cflow/config.hpp"
#include "cflow/training.hpp"

namespace cflow::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm_utc{};
    gmtime_r(&t, &tm_utc);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

std::vector<std::pair<std::string, std::string>> parse_overrides(
    const std::vector<std::string>& raw) {
    std::vector<std::pair<std::string, std::string>> pairs;
    for (const auto& item : raw) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("--override expects key=value, got '" + item + "'");
        }
        pairs.emplace_back(item.substr(0, eq), item.substr(eq + 1));
    }
    return pairs;
}

json config_json(const config::ResolvedConfig& resolved) {
    json j = json::object();
    for (const auto& [key, value] : config::to_kv(resolved)) j[key] = value;
    return j;
}

struct RunPaths {
    fs::path out_dir;
    fs::path manifest;
    fs::path resolved_config;
    fs::path train_log;
    fs::path flow_checkpoint;
    fs::path retrieval_checkpoint;
    fs::path metrics;

    explicit RunPaths(const std::string& dir)
        : out_dir(dir),
          manifest(out_dir / "manifest.json"),
          resolved_config(out_dir / "resolved_config.ini"),
          train_log(out_dir / "train_log.csv"),
          flow_checkpoint(out_dir / "flow_checkpoint.bin"),
          retrieval_checkpoint(out_dir / "retrieval_checkpoint.bin"),
          metrics(out_dir / "metrics.json") {}
};

void write_text(const fs::path& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << content;
}

void write_resolved_config(const fs::path& path, const config::ResolvedConfig& resolved) {
    std::ostringstream out;
    out << "# Fully resolved configuration; re-running train --config on this\n"
        << "# file reproduces the run bit-exactly with workers = 1.\n";
    for (const auto& [key, value] : config::to_kv(resolved)) {
        out << key << " = " << value << "\n";
    }
    write_text(path, out.str());
}

void write_manifest(const RunPaths& paths, const config::ResolvedConfig& resolved,
                    const std::string& start_time, const std::string& end_time,
                    const std::string& status, double wall_seconds) {
    json j;
    j["version"] = kVersion;
    j["seed"] = resolved.train.seed;
    j["activation"] = nn::activation_name(flow::kHiddenActivation);
    j["config"] = config_json(resolved);
    j["start_time"] = start_time;
    j["end_time"] = end_time.empty() ? json() : json(end_time);
    j["status"] = status;
    j["wall_seconds"] = wall_seconds;
    j["outputs"] = {{"resolved_config", paths.resolved_config.string()},
                    {"train_log", paths.train_log.string()},
                    {"flow_checkpoint", paths.flow_checkpoint.string()},
                    {"retrieval_checkpoint", paths.retrieval_checkpoint.string()},
                    {"metrics", paths.metrics.string()}};
    write_text(paths.manifest, j.dump(2) + "\n");
}

flow::FlowNetwork load_flow_checkpoint(const std::string& path,
                                       const env::PointRobotEnv& environment) {
    const auto spec = environment.spec();
    auto params = nn::load_params(path);
    if (params.input_dim() != spec.state_dim + spec.action_dim ||
        params.output_dim() != 1) {
        throw std::runtime_error(
            "checkpoint/env dim mismatch: flow checkpoint expects input dim " +
            std::to_string(params.input_dim()) + ", environment provides " +
            std::to_string(spec.state_dim + spec.action_dim));
    }
    flow::FlowNetwork net;
    net.params = std::move(params);
    net.state_dim = spec.state_dim;
    net.action_dim = spec.action_dim;
    return net;
}

// ---- train ----

int cmd_train(const std::optional<std::string>& config_path,
              const std::vector<std::string>& overrides_raw, const std::string& out_dir) {
    const auto resolved = config::load_config(config_path, parse_overrides(overrides_raw));
    resolved.train.validate();
    auto environment = config::build_env(resolved);

    const RunPaths paths(out_dir);
    fs::create_directories(paths.out_dir);
    const std::string start_time = utc_now();
    write_resolved_config(paths.resolved_config, resolved);
    write_manifest(paths, resolved, start_time, "", "running", 0.0);

    const auto checkpoint_hook = [&paths](long, const flow::FlowNetwork& f,
                                          const flow::RetrievalNetwork& g) {
        nn::save_params(paths.flow_checkpoint.string(), f.params);
        nn::save_params(paths.retrieval_checkpoint.string(), g.params);
    };
    const auto result = training::train(resolved.train, environment, checkpoint_hook);

    training::write_training_log_csv(paths.train_log.string(), result.log);

    json metrics;
    metrics["episodes_collected"] = result.episodes_collected;
    metrics["updates"] = result.update_losses.size();
    metrics["clamped_actions"] = result.clamped_actions;
    metrics["aborted"] = result.aborted;
    if (result.aborted) metrics["abort_reason"] = result.abort_reason;
    if (!result.update_losses.empty()) {
        metrics["final_loss"] = result.update_losses.back().loss;
    }
    if (!result.log.records.empty()) {
        const auto& last = result.log.records.back();
        if (!std::isnan(last.mean_return)) metrics["last_interval_mean_return"] = last.mean_return;
        if (!std::isnan(last.retrieval_mse)) metrics["retrieval_mse"] = last.retrieval_mse;
    }
    metrics["wall_seconds"] = result.log.wall_seconds;
    write_text(paths.metrics, metrics.dump(2) + "\n");

    write_manifest(paths, resolved, start_time, utc_now(),
                   result.aborted ? "aborted" : "complete", result.log.wall_seconds);
    if (result.aborted) {
        std::cerr << "training aborted: " << result.abort_reason
                  << " (last checkpoint preserved in " << out_dir << ")\n";
        return 1;
    }
    std::cout << "run complete: " << out_dir << "\n";
    return 0;
}

// ---- eval ----

int cmd_eval(const std::string& checkpoint, const std::optional<std::string>& config_path,
             const std::vector<std::string>& overrides_raw, int episodes,
             const std::string& mode, const std::string& out_dir,
             const std::optional<std::string>& curve_state, int curve_remaining,
             int curve_grid) {
    if (episodes < 1) throw std::invalid_argument("episodes: must be >= 1");
    training::RolloutMode rollout_mode;
    if (mode == "sample") {
        rollout_mode = training::RolloutMode::sample;
    } else if (mode == "greedy") {
        rollout_mode = training::RolloutMode::greedy;
    } else {
        throw std::invalid_argument("mode: must be 'sample' or 'greedy'");
    }

    const auto resolved = config::load_config(config_path, parse_overrides(overrides_raw));
    resolved.train.validate();
    auto environment = config::build_env(resolved);
    const auto flow_net = load_flow_checkpoint(checkpoint, environment);

    fs::create_directories(out_dir);
    std::vector<env::Trajectory> trajectories;
    trajectories.reserve(static_cast<std::size_t>(episodes));
    Real total_return = 0, max_return = 0;
    for (int e = 0; e < episodes; ++e) {
        auto rng = make_rng(resolved.train.seed, Stream::eval_rollout,
                            static_cast<std::uint64_t>(e));
        auto traj = training::collect_episode(environment, flow_net, resolved.train.M, rng,
                                              rollout_mode, resolved.train.sampler);
        total_return += traj.episode_return;
        max_return = std::max(max_return, traj.episode_return);
        trajectories.push_back(std::move(traj));
    }

    auto distinctive = resolved.distinctive;
    distinctive.sample_count = episodes;
    const int distinct_count = analysis::count_valid_distinctive(trajectories, distinctive);

    const fs::path traj_path = fs::path(out_dir) / "trajectories.csv";
    env::write_trajectories_csv(traj_path.string(), trajectories);

    if (curve_state) {
        const auto comma = curve_state->find(',');
        if (comma == std::string::npos) {
            throw std::invalid_argument("--curve-state expects x,y");
        }
        const env::Point state{static_cast<Real>(std::stod(curve_state->substr(0, comma))),
                               static_cast<Real>(std::stod(curve_state->substr(comma + 1)))};
        const auto curve = analysis::reward_distribution_curve(flow_net, environment, state,
                                                               curve_grid, curve_remaining);
        analysis::write_reward_curve_csv((fs::path(out_dir) / "reward_curve.csv").string(),
                                         curve);
    }

    json metrics;
    metrics["checkpoint"] = checkpoint;
    metrics["env_id"] = resolved.train.env_id;
    metrics["mode"] = mode;
    metrics["episodes"] = episodes;
    metrics["mean_return"] = total_return / static_cast<Real>(episodes);
    metrics["max_return"] = max_return;
    metrics["valid_distinctive"] = distinct_count;
    metrics["delta_r"] = distinctive.delta_r;
    metrics["delta_mse"] = distinctive.delta_mse;
    metrics["clamped_actions"] = environment.clamped_actions();
    const fs::path metrics_path = fs::path(out_dir) / "metrics.json";
    write_text(metrics_path, metrics.dump(2) + "\n");
    std::cout << metrics.dump(2) << "\n";
    return 0;
}

// ---- verify ----

int verify_theorem1(std::uint64_t seed) {
    bool all_ok = true;
    const auto report_line = [&all_ok](const std::string& name,
                                       const analysis::DagCheckReport& report) {
        const bool ok = report.ok();
        all_ok = all_ok && ok;
        std::cout << (ok ? "[PASS] " : "[FAIL] ") << name
                  << ": max conservation gap " << report.max_conservation_gap
                  << ", max node flow gap " << report.max_node_flow_gap << "\n";
    };
    report_line("diamond dag", analysis::dag_flow_oracle_check(analysis::diamond_dag()));
    auto rng = make_rng(seed, Stream::analysis);
    std::uniform_int_distribution<int> size_dist(4, 8);
    for (int i = 0; i < 20; ++i) {
        const auto dag = analysis::make_path_sum_dag(size_dist(rng), rng);
        report_line("path-sum dag " + std::to_string(i), analysis::dag_flow_oracle_check(dag));
    }
    return all_ok ? 0 : 1;
}

int verify_theorem2(std::uint64_t seed, const std::optional<std::string>& out_dir) {
    auto rng = make_rng(seed, Stream::analysis);
    const auto report = analysis::estimator_error_sweep(
        [](Real a) { return 1 + std::sin(a); }, std::numbers::pi_v<Real> / 2,
        {10, 100, 1000, 10000}, 200, rng);
    const bool slope_ok =
        report.slope_defined && report.slope >= -0.65 && report.slope <= -0.35;
    const bool monotone_ok = analysis::p95_non_increasing(report);
    std::cout << (slope_ok ? "[PASS] " : "[FAIL] ") << "log-log p95 slope "
              << report.slope << " in [-0.65, -0.35]\n";
    std::cout << (monotone_ok ? "[PASS] " : "[FAIL] ")
              << "p95 error non-increasing in K (5% tolerance)\n";
    if (out_dir) {
        fs::create_directories(*out_dir);
        analysis::write_sweep_csv((fs::path(*out_dir) / "sweep_k.csv").string(), report);
        write_text(fs::path(*out_dir) / "sweep_k.json",
                   analysis::sweep_report_json(report) + "\n");
    }
    return slope_ok && monotone_ok ? 0 : 1;
}

int verify_lipschitz(std::uint64_t seed, const std::optional<std::string>& checkpoint,
                     const std::optional<std::string>& out_dir) {
    auto environment = env::make_env("point-robot-sparse");
    flow::FlowNetwork net;
    if (checkpoint) {
        net = load_flow_checkpoint(*checkpoint, environment);
    } else {
        net = flow::make_flow_network(2, 1, {16, 16}, derive_seed(seed, 0xf10));
    }
    auto rng = make_rng(seed, Stream::analysis);
    const auto spec = environment.spec();
    const Real reach = static_cast<Real>(spec.max_episode_len);
    const auto report = analysis::lipschitz_estimate(net, {0, 0}, {reach, reach},
                                                     spec.action_lower, spec.action_upper,
                                                     2000, rng);
    const bool finite = std::isfinite(report.max_action_ratio()) &&
                        std::isfinite(report.max_state_ratio());
    std::cout << (finite ? "[PASS] " : "[FAIL] ")
              << "accumulated Lipschitz maxima finite: action " << report.max_action_ratio()
              << ", state " << report.max_state_ratio() << " over 2000 pairs\n";
    if (out_dir) {
        fs::create_directories(*out_dir);
        analysis::write_lipschitz_csv((fs::path(*out_dir) / "lipschitz.csv").string(),
                                      report);
        write_text(fs::path(*out_dir) / "lipschitz.json",
                   analysis::lipschitz_report_json(report) + "\n");
    }
    return finite ? 0 : 1;
}

int verify_gradcheck(std::uint64_t seed) {
    auto rng = make_rng(seed, Stream::analysis);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<int> dim_dist(1, 16);
    std::uniform_int_distribution<int> layer_dist(1, 3);
    Real worst = 0;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<int> dims{dim_dist(rng)};
        const int layers = layer_dist(rng);
        for (int l = 0; l < layers; ++l) dims.push_back(dim_dist(rng));
        const auto params = nn::mlp_init(dims, rng());
        nn::Matrix in(4, dims.front());
        nn::Matrix upstream(4, dims.back());
        for (Eigen::Index r = 0; r < 4; ++r) {
            for (Eigen::Index c = 0; c < in.cols(); ++c) in(r, c) = normal(rng);
            for (Eigen::Index c = 0; c < upstream.cols(); ++c) upstream(r, c) = normal(rng);
        }
        const auto analytic = nn::mlp_backward(params, in, upstream);
        const auto numeric = nn::finite_difference_gradients(params, in, upstream);
        for (std::size_t l = 0; l < analytic.weights.size(); ++l) {
            for (Eigen::Index r = 0; r < analytic.weights[l].rows(); ++r) {
                for (Eigen::Index c = 0; c < analytic.weights[l].cols(); ++c) {
                    const Real a = analytic.weights[l](r, c);
                    const Real n = numeric.weights[l](r, c);
                    worst = std::max(worst,
                                     std::abs(a - n) / std::max(std::abs(a) + std::abs(n),
                                                                Real(1e-6)));
                }
            }
            for (Eigen::Index r = 0; r < analytic.biases[l].size(); ++r) {
                const Real a = analytic.biases[l](r);
                const Real n = numeric.biases[l](r);
                worst = std::max(worst, std::abs(a - n) / std::max(std::abs(a) + std::abs(n),
                                                                   Real(1e-6)));
            }
        }
    }
    const bool ok = worst < 1e-4;
    std::cout << (ok ? "[PASS] " : "[FAIL] ")
              << "max relative gradient error over 50 random nets: " << worst << "\n";
    return ok ? 0 : 1;
}

// ---- sweep-k ----

int cmd_sweep_k(std::uint64_t seed, int trials, const std::vector<int>& k_list,
                const std::string& out_dir) {
    auto rng = make_rng(seed, Stream::analysis);
    const auto report = analysis::estimator_error_sweep(
        [](Real a) { return 1 + std::sin(a); }, std::numbers::pi_v<Real> / 2, k_list,
        trials, rng);
    fs::create_directories(out_dir);
    analysis::write_sweep_csv((fs::path(out_dir) / "sweep_k.csv").string(), report);
    write_text(fs::path(out_dir) / "sweep_k.json",
               analysis::sweep_report_json(report) + "\n");
    std::cout << analysis::sweep_report_json(report) << "\n";
    return 0;
}

} // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"Continuous flow network training, evaluation and verification"};
    app.require_subcommand(1);

    std::optional<std::string> config_path;
    std::vector<std::string> overrides;
    std::string out_dir = "cflow_run";
    std::optional<long> seed_flag;
    std::optional<int> workers_flag;

    auto add_common = [&](CLI::App* sub, bool with_out_dir = true) {
        sub->add_option("--config", config_path, "Config file (flat key = value)");
        sub->add_option("--override", overrides, "Override key=value (repeatable)");
        sub->add_option("--seed", seed_flag, "Master seed (overrides config)");
        if (with_out_dir) sub->add_option("--out-dir", out_dir, "Output directory");
    };

    auto* train_cmd = app.add_subcommand("train", "Run the training loop");
    add_common(train_cmd);
    train_cmd->add_option("--workers", workers_flag, "Episode collection workers");

    auto* eval_cmd = app.add_subcommand("eval", "Roll out a trained checkpoint");
    add_common(eval_cmd);
    std::string checkpoint;
    int episodes = 100;
    std::string mode = "sample";
    std::optional<std::string> curve_state;
    int curve_remaining = 5;
    int curve_grid = 101;
    eval_cmd->add_option("--checkpoint", checkpoint, "Flow network checkpoint")->required();
    eval_cmd->add_option("--episodes", episodes, "Number of rollout episodes");
    eval_cmd->add_option("--mode", mode, "sample | greedy");
    eval_cmd->add_option("--curve-state", curve_state,
                         "Also export the flow curve at this state, e.g. 7,7");
    eval_cmd->add_option("--curve-remaining", curve_remaining,
                         "Remaining steps for the curve's ground-truth overlay");
    eval_cmd->add_option("--curve-grid", curve_grid, "Curve grid size");

    auto* verify_cmd = app.add_subcommand("verify", "Run a verification suite");
    add_common(verify_cmd);
    std::string suite;
    std::optional<std::string> verify_checkpoint;
    std::optional<std::string> verify_out;
    verify_cmd->add_option("suite", suite, "theorem1 | theorem2 | lipschitz | gradcheck")
        ->required();
    verify_cmd->add_option("--checkpoint", verify_checkpoint,
                           "Optional trained flow checkpoint (lipschitz)");

    auto* sweep_cmd = app.add_subcommand("sweep-k", "Estimator error sweep over K");
    add_common(sweep_cmd);
    int trials = 200;
    std::string k_list_str = "10,100,1000,10000";
    sweep_cmd->add_option("--trials", trials, "Trials per K");
    sweep_cmd->add_option("--k-list", k_list_str, "Comma-separated K values");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (seed_flag) overrides.push_back("seed=" + std::to_string(*seed_flag));
        if (workers_flag) overrides.push_back("workers=" + std::to_string(*workers_flag));

        if (train_cmd->parsed()) {
            return cmd_train(config_path, overrides, out_dir);
        }
        if (eval_cmd->parsed()) {
            return cmd_eval(checkpoint, config_path, overrides, episodes, mode, out_dir,
                            curve_state, curve_remaining, curve_grid);
        }
        if (verify_cmd->parsed()) {
            const auto resolved =
                config::load_config(config_path, parse_overrides(overrides));
            const std::uint64_t seed = resolved.train.seed;
            if (verify_cmd->count("--out-dir") > 0) verify_out = out_dir;
            if (suite == "theorem1") return verify_theorem1(seed);
            if (suite == "theorem2") return verify_theorem2(seed, verify_out);
            if (suite == "lipschitz") {
                return verify_lipschitz(seed, verify_checkpoint, verify_out);
            }
            if (suite == "gradcheck") return verify_gradcheck(seed);
            std::cerr << "unknown verification suite '" << suite
                      << "' (expected theorem1 | theorem2 | lipschitz | gradcheck)\n";
            return 2;
        }
        if (sweep_cmd->parsed()) {
            const auto resolved =
                config::load_config(config_path, parse_overrides(overrides));
            std::vector<int> k_list;
            std::stringstream ss(k_list_str);
            std::string item;
            while (std::getline(ss, item, ',')) k_list.push_back(std::stoi(item));
            return cmd_sweep_k(resolved.train.seed, trials, k_list, out_dir);
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

int cli_main(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.reserve(args.size());
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

} // namespace cflow::cli
