#include "cflow/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cflow::config {

namespace {

std::string trim(const std::string& s) {
    auto begin = s.find_first_not_of(" \t\r\n");
    auto end = s.find_last_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    return s.substr(begin, end - begin + 1);
}

long parse_long(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const long v = std::stol(value, &used);
        if (used != value.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw std::invalid_argument(key + ": expected an integer, got '" + value + "'");
    }
}

Real parse_real(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("");
        return static_cast<Real>(v);
    } catch (...) {
        throw std::invalid_argument(key + ": expected a number, got '" + value + "'");
    }
}

std::vector<int> parse_dims(const std::string& key, const std::string& value) {
    std::vector<int> dims;
    if (trim(value).empty()) return dims;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        dims.push_back(static_cast<int>(parse_long(key, trim(item))));
    }
    return dims;
}

} // namespace

std::string dims_to_string(const std::vector<int>& dims) {
    std::string out;
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(dims[i]);
    }
    return out;
}

void apply_kv(ResolvedConfig& config, const std::string& key, const std::string& value) {
    auto& t = config.train;
    if (key == "env_id") {
        t.env_id = value;
    } else if (key == "total_timesteps") {
        t.total_timesteps = parse_long(key, value);
    } else if (key == "start_training_timestep") {
        t.start_training_timestep = parse_long(key, value);
    } else if (key == "M") {
        t.M = static_cast<int>(parse_long(key, value));
    } else if (key == "K") {
        t.K = static_cast<int>(parse_long(key, value));
    } else if (key == "batch_size") {
        t.batch_size = static_cast<int>(parse_long(key, value));
    } else if (key == "learning_rate") {
        t.learning_rate = parse_real(key, value);
    } else if (key == "lambda") {
        if (value == "auto") {
            t.lambda = -1;
        } else {
            t.lambda = parse_real(key, value);
            if (t.lambda < 0) {
                throw std::invalid_argument("lambda: must be 'auto' or a non-negative number");
            }
        }
    } else if (key == "epsilon") {
        t.epsilon = parse_real(key, value);
    } else if (key == "flow_hidden") {
        t.flow_hidden = parse_dims(key, value);
    } else if (key == "retrieval_hidden") {
        t.retrieval_hidden = parse_dims(key, value);
    } else if (key == "seed") {
        t.seed = static_cast<std::uint64_t>(parse_long(key, value));
    } else if (key == "sampler") {
        if (value == "proportional") {
            t.sampler = flow::Sampler::proportional;
        } else if (value == "softmax") {
            t.sampler = flow::Sampler::softmax;
        } else {
            throw std::invalid_argument("sampler: must be 'proportional' or 'softmax'");
        }
    } else if (key == "terminal_outflow") {
        if (value == "drop") {
            t.terminal_outflow = training::TerminalOutflow::drop;
        } else if (value == "keep") {
            t.terminal_outflow = training::TerminalOutflow::keep;
        } else {
            throw std::invalid_argument("terminal_outflow: must be 'drop' or 'keep'");
        }
    } else if (key == "replay_capacity") {
        t.replay_capacity = parse_long(key, value);
    } else if (key == "updates_per_step") {
        t.updates_per_step = static_cast<int>(parse_long(key, value));
    } else if (key == "pretrain_epochs") {
        t.pretrain_epochs = static_cast<int>(parse_long(key, value));
    } else if (key == "pretrain_learning_rate") {
        t.pretrain_learning_rate = parse_real(key, value);
    } else if (key == "pretrain_batch_size") {
        t.pretrain_batch_size = static_cast<int>(parse_long(key, value));
    } else if (key == "finetune_interval") {
        t.finetune_interval = parse_long(key, value);
    } else if (key == "finetune_epochs") {
        t.finetune_epochs = static_cast<int>(parse_long(key, value));
    } else if (key == "log_interval") {
        t.log_interval = parse_long(key, value);
    } else if (key == "checkpoint_interval") {
        t.checkpoint_interval = parse_long(key, value);
    } else if (key == "workers") {
        t.workers = static_cast<int>(parse_long(key, value));
    } else if (key == "delta_r") {
        config.distinctive.delta_r = parse_real(key, value);
    } else if (key == "delta_mse") {
        config.distinctive.delta_mse = parse_real(key, value);
    } else if (key == "sample_count") {
        config.distinctive.sample_count = static_cast<int>(parse_long(key, value));
    } else if (key == "reward_sigma") {
        config.reward_sigma = parse_real(key, value);
    } else if (key == "episode_len") {
        config.episode_len = static_cast<int>(parse_long(key, value));
    } else {
        throw std::invalid_argument("unknown config key '" + key + "'");
    }
}

std::vector<std::pair<std::string, std::string>> parse_config_file(
    const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config file '" + path + "'");
    std::vector<std::pair<std::string, std::string>> pairs;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto comment = line.find_first_of("#;");
        if (comment != std::string::npos) line = line.substr(0, comment);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw std::invalid_argument(path + ":" + std::to_string(line_no) +
                                            ": malformed section header");
            }
            continue; // sections are organizational only
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument(path + ":" + std::to_string(line_no) +
                                        ": expected key = value");
        }
        pairs.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return pairs;
}

ResolvedConfig load_config(
    const std::optional<std::string>& config_path,
    const std::vector<std::pair<std::string, std::string>>& overrides) {
    ResolvedConfig config;
    if (config_path) {
        for (const auto& [key, value] : parse_config_file(*config_path)) {
            apply_kv(config, key, value);
        }
    }
    for (const auto& [key, value] : overrides) {
        apply_kv(config, key, value);
    }
    return config;
}

std::vector<std::pair<std::string, std::string>> to_kv(const ResolvedConfig& config) {
    const auto& t = config.train;
    std::vector<std::pair<std::string, std::string>> kv;
    kv.emplace_back("env_id", t.env_id);
    kv.emplace_back("total_timesteps", std::to_string(t.total_timesteps));
    kv.emplace_back("start_training_timestep", std::to_string(t.start_training_timestep));
    kv.emplace_back("M", std::to_string(t.M));
    kv.emplace_back("K", std::to_string(t.K));
    kv.emplace_back("batch_size", std::to_string(t.batch_size));
    kv.emplace_back("learning_rate", std::to_string(t.learning_rate));
    kv.emplace_back("lambda", t.lambda < 0 ? "auto" : std::to_string(t.lambda));
    kv.emplace_back("epsilon", std::to_string(t.epsilon));
    kv.emplace_back("flow_hidden", dims_to_string(t.flow_hidden));
    kv.emplace_back("retrieval_hidden", dims_to_string(t.retrieval_hidden));
    kv.emplace_back("seed", std::to_string(t.seed));
    kv.emplace_back("sampler", t.sampler == flow::Sampler::proportional ? "proportional"
                                                                        : "softmax");
    kv.emplace_back("terminal_outflow",
                    t.terminal_outflow == training::TerminalOutflow::drop ? "drop" : "keep");
    kv.emplace_back("replay_capacity", std::to_string(t.replay_capacity));
    kv.emplace_back("updates_per_step", std::to_string(t.updates_per_step));
    kv.emplace_back("pretrain_epochs", std::to_string(t.pretrain_epochs));
    kv.emplace_back("pretrain_learning_rate", std::to_string(t.pretrain_learning_rate));
    kv.emplace_back("pretrain_batch_size", std::to_string(t.pretrain_batch_size));
    kv.emplace_back("finetune_interval", std::to_string(t.finetune_interval));
    kv.emplace_back("finetune_epochs", std::to_string(t.finetune_epochs));
    kv.emplace_back("log_interval", std::to_string(t.log_interval));
    kv.emplace_back("checkpoint_interval", std::to_string(t.checkpoint_interval));
    kv.emplace_back("workers", std::to_string(t.workers));
    kv.emplace_back("delta_r", std::to_string(config.distinctive.delta_r));
    kv.emplace_back("delta_mse", std::to_string(config.distinctive.delta_mse));
    kv.emplace_back("sample_count", std::to_string(config.distinctive.sample_count));
    kv.emplace_back("reward_sigma", std::to_string(config.reward_sigma));
    kv.emplace_back("episode_len", std::to_string(config.episode_len));
    return kv;
}

env::PointRobotEnv build_env(const ResolvedConfig& config) {
    auto environment = env::make_env(config.train.env_id);
    auto env_config = environment.config();
    env_config.reward_sigma = config.reward_sigma;
    env_config.episode_len = config.episode_len;
    return env::PointRobotEnv(env_config);
}

} // namespace cflow::config
