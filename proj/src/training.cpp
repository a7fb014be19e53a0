#include "cflow/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace cflow::training {

namespace {
constexpr Real kNan = std::numeric_limits<Real>::quiet_NaN();
}

// ---- ReplayBuffer ----

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity_ < 1) throw std::invalid_argument("replay capacity must be >= 1");
}

void ReplayBuffer::add(env::Trajectory trajectory) {
    const std::size_t n = trajectory.transitions.size();
    if (n == 0) throw std::invalid_argument("cannot store an empty episode");
    if (n > capacity_) {
        throw std::invalid_argument("episode longer than replay capacity");
    }
    while (size_ + n > capacity_) {
        size_ -= episodes_.front().transitions.size();
        episodes_.pop_front();
    }
    episodes_.push_back(std::move(trajectory));
    size_ += n;
    rebuild_offsets();
}

void ReplayBuffer::rebuild_offsets() {
    offsets_.resize(episodes_.size());
    std::size_t acc = 0;
    for (std::size_t i = 0; i < episodes_.size(); ++i) {
        offsets_[i] = acc;
        acc += episodes_[i].transitions.size();
    }
}

const env::Transition& ReplayBuffer::transition(std::size_t flat_index) const {
    if (flat_index >= size_) throw std::out_of_range("replay index out of range");
    const auto it = std::upper_bound(offsets_.begin(), offsets_.end(), flat_index);
    const std::size_t ep = static_cast<std::size_t>(it - offsets_.begin()) - 1;
    return episodes_[ep].transitions[flat_index - offsets_[ep]];
}

std::vector<const env::Transition*> ReplayBuffer::sample(std::size_t count,
                                                         std::mt19937_64& rng) const {
    if (size_ == 0) throw std::runtime_error("cannot sample from an empty replay buffer");
    std::vector<const env::Transition*> batch(count);
    std::uniform_int_distribution<std::size_t> dist(0, size_ - 1);
    for (auto& slot : batch) slot = &transition(dist(rng));
    return batch;
}

// ---- TrainConfig ----

void TrainConfig::validate() const {
    if (!env::env_registered(env_id)) {
        std::string known;
        for (const auto& id : env::registered_envs()) known += " " + id;
        throw std::invalid_argument("env_id: unknown environment '" + env_id +
                                    "' (registered:" + known + ")");
    }
    if (total_timesteps < 1) throw std::invalid_argument("total_timesteps: must be >= 1");
    if (start_training_timestep < 1) {
        throw std::invalid_argument("start_training_timestep: must be >= 1");
    }
    if (M < 1) throw std::invalid_argument("M: must be >= 1");
    if (K < 1) throw std::invalid_argument("K: must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size: must be >= 1");
    if (learning_rate <= 0) throw std::invalid_argument("learning_rate: must be > 0");
    if (epsilon <= 0) throw std::invalid_argument("epsilon: must be > 0");
    if (replay_capacity < 1) throw std::invalid_argument("replay_capacity: must be >= 1");
    if (updates_per_step < 1) throw std::invalid_argument("updates_per_step: must be >= 1");
    if (pretrain_epochs < 0) throw std::invalid_argument("pretrain_epochs: must be >= 0");
    if (pretrain_learning_rate <= 0) {
        throw std::invalid_argument("pretrain_learning_rate: must be > 0");
    }
    if (pretrain_batch_size < 1) {
        throw std::invalid_argument("pretrain_batch_size: must be >= 1");
    }
    if (finetune_interval < 0) throw std::invalid_argument("finetune_interval: must be >= 0");
    if (finetune_epochs < 0) throw std::invalid_argument("finetune_epochs: must be >= 0");
    if (log_interval < 1) throw std::invalid_argument("log_interval: must be >= 1");
    if (checkpoint_interval < 0) {
        throw std::invalid_argument("checkpoint_interval: must be >= 0");
    }
    if (workers < 1) throw std::invalid_argument("workers: must be >= 1");
}

Real TrainConfig::resolved_lambda(Real mu_A) const {
    return lambda < 0 ? static_cast<Real>(K) / mu_A : lambda;
}

// ---- Loss ----

LossResult flow_matching_loss_log(const flow::FlowNetwork& flow_net,
                                  const flow::RetrievalNetwork& retrieval,
                                  const std::vector<const env::Transition*>& batch,
                                  int K, Real lambda, Real epsilon,
                                  const env::EnvSpec& spec,
                                  TerminalOutflow terminal_outflow,
                                  std::mt19937_64& rng) {
    if (batch.empty()) throw std::invalid_argument("loss: batch must be non-empty");
    if (K < 1) throw std::invalid_argument("loss: K must be >= 1");
    if (epsilon <= 0) throw std::invalid_argument("loss: epsilon must be > 0");

    const int B = static_cast<int>(batch.size());
    const int sd = spec.state_dim;
    const int ad = spec.action_dim;
    const int bk = B * K;

    // One shared uniform action draw per state, reused by both sums.
    flow::Matrix actions = flow::sample_uniform_actions(spec.action_lower,
                                                        spec.action_upper, bk, rng);
    flow::Matrix next_states(bk, sd);
    for (int b = 0; b < B; ++b) {
        const auto& s_t = batch[static_cast<std::size_t>(b)]->next_state;
        for (int k = 0; k < K; ++k) {
            for (int d = 0; d < sd; ++d) {
                next_states(b * K + k, d) = s_t[static_cast<std::size_t>(d)];
            }
        }
    }

    const flow::Matrix parents = flow::retrieve_parents_batch(retrieval, next_states, actions);

    // Flow inputs: first bk rows are inflow terms (parent, a), the next bk
    // rows are outflow terms (s_t, a).
    flow::Matrix inputs(2 * bk, sd + ad);
    inputs.topRows(bk).leftCols(sd) = parents;
    inputs.topRows(bk).rightCols(ad) = actions;
    inputs.bottomRows(bk).leftCols(sd) = next_states;
    inputs.bottomRows(bk).rightCols(ad) = actions;

    nn::ForwardCache cache;
    const nn::Matrix lf_out = nn::mlp_forward_cached(flow_net.params, inputs, cache);
    if (!lf_out.allFinite()) {
        throw std::runtime_error("flow network produced a non-finite log-flow");
    }
    const flow::Vector lf = lf_out.col(0);

    LossTerms terms;
    terms.inflow_log.resize(static_cast<std::size_t>(B));
    terms.target_log.resize(static_cast<std::size_t>(B));
    terms.squared_residual.resize(static_cast<std::size_t>(B));

    nn::Matrix upstream(2 * bk, 1);
    Real loss = 0;
    for (int b = 0; b < B; ++b) {
        const auto& tr = *batch[static_cast<std::size_t>(b)];
        Real inflow_sum = 0, outflow_sum = 0;
        for (int k = 0; k < K; ++k) {
            inflow_sum += std::exp(lf(b * K + k));
            outflow_sum += std::exp(lf(bk + b * K + k));
        }
        const bool keep_outflow = !tr.done || terminal_outflow == TerminalOutflow::keep;
        const Real in_arg = epsilon + inflow_sum;
        const Real target_arg =
            epsilon + lambda * tr.reward + (keep_outflow ? outflow_sum : Real(0));
        const Real in_log = std::log(in_arg);
        const Real target_log = std::log(target_arg);
        const Real residual = in_log - target_log;
        if (!std::isfinite(residual)) {
            throw std::runtime_error(
                "loss: non-finite residual for transition at step " +
                std::to_string(tr.step_index) + " (state " +
                std::to_string(tr.next_state[0]) + "," +
                std::to_string(tr.next_state[1]) + ")");
        }
        terms.inflow_log[static_cast<std::size_t>(b)] = in_log;
        terms.target_log[static_cast<std::size_t>(b)] = target_log;
        terms.squared_residual[static_cast<std::size_t>(b)] = residual * residual;
        loss += residual * residual;

        const Real common = 2 * residual / static_cast<Real>(B);
        for (int k = 0; k < K; ++k) {
            upstream(b * K + k, 0) = common * std::exp(lf(b * K + k)) / in_arg;
            upstream(bk + b * K + k, 0) =
                keep_outflow ? -common * std::exp(lf(bk + b * K + k)) / target_arg
                             : Real(0);
        }
    }
    terms.batch_mean = loss / static_cast<Real>(B);

    LossResult result;
    result.terms = std::move(terms);
    result.flow_gradients = nn::mlp_backward_cached(flow_net.params, cache, upstream);
    return result;
}

// ---- Retrieval training ----

namespace {

// Dataset views for retrieval training: X = (s_next, a), Y = s.
void fill_retrieval_dataset(const ReplayBuffer& buffer, nn::Matrix& x, nn::Matrix& y) {
    const std::size_t n = buffer.size();
    if (n == 0) throw std::invalid_argument("retrieval training: empty buffer");
    const auto& first = buffer.transition(0);
    const int sd = static_cast<int>(first.state.size());
    const int ad = static_cast<int>(first.action.size());
    x.resize(static_cast<Eigen::Index>(n), sd + ad);
    y.resize(static_cast<Eigen::Index>(n), sd);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& t = buffer.transition(i);
        for (int d = 0; d < sd; ++d) {
            x(static_cast<Eigen::Index>(i), d) = t.next_state[static_cast<std::size_t>(d)];
            y(static_cast<Eigen::Index>(i), d) = t.state[static_cast<std::size_t>(d)];
        }
        for (int d = 0; d < ad; ++d) {
            x(static_cast<Eigen::Index>(i), sd + d) = t.action[static_cast<std::size_t>(d)];
        }
    }
}

Real dataset_mse(const flow::RetrievalNetwork& net, const nn::Matrix& x,
                 const nn::Matrix& y) {
    const nn::Matrix pred = nn::mlp_forward_batch(net.params, x);
    return (pred - y).array().square().matrix().rowwise().sum().mean();
}

} // namespace

PretrainResult pretrain_retrieval(const ReplayBuffer& buffer,
                                  const flow::RetrievalNetwork& retrieval, int epochs,
                                  Real learning_rate, int batch_size,
                                  std::mt19937_64& rng) {
    nn::Matrix x, y;
    fill_retrieval_dataset(buffer, x, y);
    const auto n = x.rows();

    PretrainResult result;
    result.network = retrieval;
    if (epochs == 0) {
        result.final_mse = dataset_mse(result.network, x, y);
        return result;
    }

    nn::AdamState adam = nn::adam_init(result.network.params);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (Eigen::Index begin = 0; begin < n; begin += batch_size) {
            const Eigen::Index rows = std::min<Eigen::Index>(batch_size, n - begin);
            nn::Matrix bx(rows, x.cols());
            nn::Matrix by(rows, y.cols());
            for (Eigen::Index r = 0; r < rows; ++r) {
                bx.row(r) = x.row(order[static_cast<std::size_t>(begin + r)]);
                by.row(r) = y.row(order[static_cast<std::size_t>(begin + r)]);
            }
            nn::ForwardCache cache;
            const nn::Matrix pred = nn::mlp_forward_cached(result.network.params, bx, cache);
            const nn::Matrix upstream = 2 * (pred - by) / static_cast<Real>(rows);
            const auto grads = nn::mlp_backward_cached(result.network.params, cache, upstream);
            auto [next_params, next_adam] =
                nn::adam_update(result.network.params, grads, adam, learning_rate);
            result.network.params = std::move(next_params);
            adam = std::move(next_adam);
        }
    }
    result.final_mse = dataset_mse(result.network, x, y);
    return result;
}

Real retrieval_mse(const flow::RetrievalNetwork& retrieval,
                   const std::vector<const env::Transition*>& transitions) {
    if (transitions.empty()) throw std::invalid_argument("retrieval_mse: empty set");
    const int sd = static_cast<int>(transitions.front()->state.size());
    const int ad = static_cast<int>(transitions.front()->action.size());
    nn::Matrix x(static_cast<Eigen::Index>(transitions.size()), sd + ad);
    nn::Matrix y(static_cast<Eigen::Index>(transitions.size()), sd);
    for (std::size_t i = 0; i < transitions.size(); ++i) {
        const auto& t = *transitions[i];
        for (int d = 0; d < sd; ++d) {
            x(static_cast<Eigen::Index>(i), d) = t.next_state[static_cast<std::size_t>(d)];
            y(static_cast<Eigen::Index>(i), d) = t.state[static_cast<std::size_t>(d)];
        }
        for (int d = 0; d < ad; ++d) {
            x(static_cast<Eigen::Index>(i), sd + d) = t.action[static_cast<std::size_t>(d)];
        }
    }
    return dataset_mse(retrieval, x, y);
}

// ---- Episode collection ----

env::Trajectory collect_episode(env::PointRobotEnv& environment,
                                const flow::FlowNetwork& flow_net, int buffer_size,
                                std::mt19937_64& rng, RolloutMode mode,
                                flow::Sampler sampler) {
    const auto spec = environment.spec();
    env::Trajectory trajectory;
    env::Point state = environment.reset();
    for (int step = 0; step < spec.max_episode_len; ++step) {
        flow::Vector state_vec(2);
        state_vec << state[0], state[1];
        const auto buffer = flow::build_action_buffer(
            flow_net, state_vec, spec.action_lower, spec.action_upper, buffer_size, rng);
        const std::size_t idx = (mode == RolloutMode::greedy)
                                    ? flow::greedy_action_index(buffer)
                                    : flow::sample_action_index(buffer, rng, sampler);
        const Real theta = buffer.actions(static_cast<Eigen::Index>(idx), 0);
        const auto result = environment.step(state, theta);

        env::Transition t;
        t.state = {state[0], state[1]};
        t.action = {theta};
        t.reward = result.reward;
        t.next_state = {result.next_state[0], result.next_state[1]};
        t.done = result.done;
        t.step_index = step;
        trajectory.transitions.push_back(std::move(t));
        trajectory.episode_return += result.reward;
        state = result.next_state;
    }
    return trajectory;
}

// ---- Training loop ----

TrainResult train(const TrainConfig& config, const env::PointRobotEnv& environment,
                  const CheckpointHook& checkpoint_hook) {
    config.validate();
    const auto start_clock = std::chrono::steady_clock::now();
    const auto spec = environment.spec();
    const Real lambda = config.resolved_lambda(spec.mu_A);

    TrainResult result;
    result.flow_net = flow::make_flow_network(
        spec.state_dim, spec.action_dim, config.flow_hidden,
        derive_seed(config.seed, static_cast<std::uint64_t>(Stream::flow_init)));
    result.retrieval = flow::make_retrieval_network(
        spec.state_dim, spec.action_dim, config.retrieval_hidden,
        derive_seed(config.seed, static_cast<std::uint64_t>(Stream::retrieval_init)));

    ReplayBuffer buffer(static_cast<std::size_t>(config.replay_capacity));
    nn::AdamState flow_adam = nn::adam_init(result.flow_net.params);

    long timestep = 0;
    long update_index = 0;
    long episode_index = 0;
    long pretrain_calls = 0;
    bool retrieval_ready = false;
    long last_log_marker = 0;
    long last_finetune_marker = 0;
    long last_checkpoint_marker = 0;

    std::vector<Real> interval_losses;
    std::vector<Real> interval_returns;

    auto all_buffer_transitions = [&buffer]() {
        std::vector<const env::Transition*> all;
        all.reserve(buffer.size());
        for (std::size_t i = 0; i < buffer.size(); ++i) all.push_back(&buffer.transition(i));
        return all;
    };

    auto emit_log = [&](long at) {
        LogRecord rec;
        rec.timestep = at;
        rec.loss = interval_losses.empty()
                       ? kNan
                       : std::accumulate(interval_losses.begin(), interval_losses.end(),
                                         Real(0)) /
                             static_cast<Real>(interval_losses.size());
        rec.mean_return = interval_returns.empty()
                              ? kNan
                              : std::accumulate(interval_returns.begin(),
                                                interval_returns.end(), Real(0)) /
                                    static_cast<Real>(interval_returns.size());
        rec.retrieval_mse = retrieval_ready
                                ? retrieval_mse(result.retrieval, all_buffer_transitions())
                                : kNan;
        result.log.records.push_back(rec);
        interval_losses.clear();
        interval_returns.clear();
    };

    try {
        while (timestep < config.total_timesteps) {
            const long t_before = timestep;
            const int round_workers = config.workers;

            // Collect one episode per worker against a read-only snapshot.
            std::vector<env::Trajectory> collected(static_cast<std::size_t>(round_workers));
            std::vector<long> clamp_counts(static_cast<std::size_t>(round_workers), 0);
            auto collect_one = [&](int w) {
                env::PointRobotEnv worker_env = environment;
                auto rng = make_rng(config.seed, Stream::episode_actions,
                                    static_cast<std::uint64_t>(episode_index + w));
                collected[static_cast<std::size_t>(w)] =
                    collect_episode(worker_env, result.flow_net, config.M, rng,
                                    RolloutMode::sample, config.sampler);
                clamp_counts[static_cast<std::size_t>(w)] = worker_env.clamped_actions();
            };
            if (round_workers == 1) {
                collect_one(0);
            } else {
                std::vector<std::thread> threads;
                threads.reserve(static_cast<std::size_t>(round_workers));
                for (int w = 0; w < round_workers; ++w) threads.emplace_back(collect_one, w);
                for (auto& t : threads) t.join();
            }
            // Merge in worker order so the run is reproducible for any
            // fixed worker count.
            for (int w = 0; w < round_workers; ++w) {
                auto& traj = collected[static_cast<std::size_t>(w)];
                timestep += static_cast<long>(traj.transitions.size());
                interval_returns.push_back(traj.episode_return);
                result.clamped_actions += clamp_counts[static_cast<std::size_t>(w)];
                buffer.add(std::move(traj));
            }
            episode_index += round_workers;
            result.episodes_collected += round_workers;

            // Retrieval pretraining once the warm-up buffer is full.
            if (!retrieval_ready && timestep >= config.start_training_timestep) {
                auto rng = make_rng(config.seed, Stream::pretrain_shuffle,
                                    static_cast<std::uint64_t>(pretrain_calls++));
                auto pre = pretrain_retrieval(buffer, result.retrieval,
                                              config.pretrain_epochs,
                                              config.pretrain_learning_rate,
                                              config.pretrain_batch_size, rng);
                result.retrieval = std::move(pre.network);
                retrieval_ready = true;
                last_finetune_marker = timestep / std::max<long>(1, config.finetune_interval);
            } else if (retrieval_ready && config.finetune_interval > 0 &&
                       config.finetune_epochs > 0 &&
                       timestep / config.finetune_interval > last_finetune_marker) {
                last_finetune_marker = timestep / config.finetune_interval;
                auto rng = make_rng(config.seed, Stream::pretrain_shuffle,
                                    static_cast<std::uint64_t>(pretrain_calls++));
                auto fine = pretrain_retrieval(buffer, result.retrieval,
                                               config.finetune_epochs,
                                               config.pretrain_learning_rate,
                                               config.pretrain_batch_size, rng);
                result.retrieval = std::move(fine.network);
            }

            // One update per post-warm-up environment step.
            if (retrieval_ready && timestep > config.start_training_timestep) {
                const long first_update_step =
                    std::max(config.start_training_timestep, t_before);
                const long update_steps = timestep - first_update_step;
                for (long j = 0; j < update_steps * config.updates_per_step; ++j) {
                    auto batch_rng = make_rng(config.seed, Stream::minibatch,
                                              static_cast<std::uint64_t>(update_index));
                    auto loss_rng = make_rng(config.seed, Stream::loss_actions,
                                             static_cast<std::uint64_t>(update_index));
                    const auto batch =
                        buffer.sample(static_cast<std::size_t>(config.batch_size), batch_rng);
                    auto loss = flow_matching_loss_log(
                        result.flow_net, result.retrieval, batch, config.K, lambda,
                        config.epsilon, spec, config.terminal_outflow, loss_rng);
                    auto [next_params, next_adam] =
                        nn::adam_update(result.flow_net.params, loss.flow_gradients,
                                        flow_adam, config.learning_rate);
                    result.flow_net.params = std::move(next_params);
                    flow_adam = std::move(next_adam);

                    const long step_of_update =
                        first_update_step + 1 + j / config.updates_per_step;
                    result.update_losses.push_back({step_of_update, loss.terms.batch_mean});
                    interval_losses.push_back(loss.terms.batch_mean);
                    ++update_index;
                }
            }

            while (timestep / config.log_interval > last_log_marker) {
                ++last_log_marker;
                emit_log(last_log_marker * config.log_interval);
            }
            if (checkpoint_hook && config.checkpoint_interval > 0 &&
                timestep / config.checkpoint_interval > last_checkpoint_marker) {
                last_checkpoint_marker = timestep / config.checkpoint_interval;
                checkpoint_hook(timestep, result.flow_net, result.retrieval);
            }
        }
        if (timestep > last_log_marker * config.log_interval) emit_log(timestep);
    } catch (const std::exception& e) {
        result.aborted = true;
        result.abort_reason = e.what();
    }

    if (checkpoint_hook) checkpoint_hook(timestep, result.flow_net, result.retrieval);
    result.log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_clock)
            .count();
    return result;
}

void write_training_log_csv(const std::string& path, const TrainingLog& log) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << "timestep,loss,mean_return,retrieval_mse\n";
    out.precision(17);
    auto put = [&out](Real v) {
        if (std::isnan(v)) {
            out << "nan";
        } else {
            out << v;
        }
    };
    for (const auto& rec : log.records) {
        out << rec.timestep << ',';
        put(rec.loss);
        out << ',';
        put(rec.mean_return);
        out << ',';
        put(rec.retrieval_mse);
        out << '\n';
    }
}

} // namespace cflow::training
