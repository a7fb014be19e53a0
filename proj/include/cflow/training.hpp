#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cflow/env.hpp"
#include "cflow/flow.hpp"

namespace cflow::training {

/// Episode-structured ring buffer. Eviction removes the oldest whole
/// episode, so sampled minibatches only ever see complete episodes.
class ReplayBuffer {
  public:
    explicit ReplayBuffer(std::size_t capacity);

    void add(env::Trajectory trajectory);
    std::size_t size() const { return size_; }
    std::size_t capacity() const { return capacity_; }
    std::size_t episode_count() const { return episodes_.size(); }
    const env::Trajectory& episode(std::size_t i) const { return episodes_[i]; }

    const env::Transition& transition(std::size_t flat_index) const;
    std::vector<const env::Transition*> sample(std::size_t count,
                                               std::mt19937_64& rng) const;

  private:
    std::size_t capacity_;
    std::size_t size_ = 0;
    std::deque<env::Trajectory> episodes_;
    std::vector<std::size_t> offsets_; // episode start, parallel to episodes_
    void rebuild_offsets();
};

enum class TerminalOutflow { drop, keep };
enum class RolloutMode { sample, greedy };

struct TrainConfig {
    std::string env_id = "point-robot-sparse";
    long total_timesteps = 100000;
    long start_training_timestep = 4000;
    int M = 1000; // action probability buffer size
    int K = 100;  // sample flows per state
    int batch_size = 128;
    Real learning_rate = 3e-4;
    // lambda < 0 means auto (K / mu_A); otherwise the literal value.
    Real lambda = -1;
    Real epsilon = 1.0;
    std::vector<int> flow_hidden{256, 256};
    std::vector<int> retrieval_hidden{256, 256, 256};
    std::uint64_t seed = 1;
    flow::Sampler sampler = flow::Sampler::proportional;
    TerminalOutflow terminal_outflow = TerminalOutflow::drop;
    long replay_capacity = 8000;
    int updates_per_step = 1;
    int pretrain_epochs = 200;
    Real pretrain_learning_rate = 1e-3;
    int pretrain_batch_size = 128;
    long finetune_interval = 1000;
    int finetune_epochs = 10;
    long log_interval = 500;
    long checkpoint_interval = 0; // 0: checkpoint only at exit
    int workers = 1;

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
    Real resolved_lambda(Real mu_A) const;
};

struct LossTerms {
    std::vector<Real> inflow_log;
    std::vector<Real> target_log;
    std::vector<Real> squared_residual;
    Real batch_mean = 0;
};

struct LossResult {
    LossTerms terms;
    nn::GradientSet flow_gradients;
};

/// Log-scale flow-matching residual over a minibatch. For each transition the
/// matched state is its next_state; K fresh uniform actions are drawn per
/// state and shared between the inflow and outflow sums. Gradients flow only
/// through the flow network.
LossResult flow_matching_loss_log(const flow::FlowNetwork& flow_net,
                                  const flow::RetrievalNetwork& retrieval,
                                  const std::vector<const env::Transition*>& batch,
                                  int K, Real lambda, Real epsilon,
                                  const env::EnvSpec& spec,
                                  TerminalOutflow terminal_outflow,
                                  std::mt19937_64& rng);

struct PretrainResult {
    flow::RetrievalNetwork network;
    Real final_mse = 0;
};

/// Minimizes mean ||G(s_next, a) - s||^2 over the buffer with Adam.
PretrainResult pretrain_retrieval(const ReplayBuffer& buffer,
                                  const flow::RetrievalNetwork& retrieval, int epochs,
                                  Real learning_rate, int batch_size,
                                  std::mt19937_64& rng);

/// Mean ||G(s_next, a) - s||^2 over a set of transitions.
Real retrieval_mse(const flow::RetrievalNetwork& retrieval,
                   const std::vector<const env::Transition*>& transitions);

/// One full episode driven by the action probability buffer.
env::Trajectory collect_episode(env::PointRobotEnv& environment,
                                const flow::FlowNetwork& flow_net, int buffer_size,
                                std::mt19937_64& rng, RolloutMode mode,
                                flow::Sampler sampler = flow::Sampler::proportional);

struct LogRecord {
    long timestep = 0;
    Real loss = 0; // nan when no update ran in the interval
    Real mean_return = 0;
    Real retrieval_mse = 0; // nan before the retrieval net is first trained
};

struct TrainingLog {
    std::vector<LogRecord> records;
    double wall_seconds = 0;
};

struct UpdateLoss {
    long timestep = 0;
    Real loss = 0;
};

struct TrainResult {
    flow::FlowNetwork flow_net;
    flow::RetrievalNetwork retrieval;
    TrainingLog log;
    std::vector<UpdateLoss> update_losses;
    long clamped_actions = 0;
    long episodes_collected = 0;
    bool aborted = false;
    std::string abort_reason;
};

using CheckpointHook = std::function<void(long timestep, const flow::FlowNetwork&,
                                          const flow::RetrievalNetwork&)>;

/// Full training loop: collect episodes, pretrain the retrieval network at
/// the warm-up boundary, then one flow update per environment step.
TrainResult train(const TrainConfig& config, const env::PointRobotEnv& environment,
                  const CheckpointHook& checkpoint_hook = nullptr);

void write_training_log_csv(const std::string& path, const TrainingLog& log);

} // namespace cflow::training
