#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "cflow/nn.hpp"

namespace cflow::flow {

using nn::Matrix;
using nn::Vector;

/// Scalar log-flow head: the network outputs F_log(s,a) and the edge flow
/// is exp of it, so flows stay positive by construction.
struct FlowNetwork {
    nn::MlpParams params;
    int state_dim = 0;
    int action_dim = 0;
};

/// Parent-state predictor G(s_next, a) -> s.
struct RetrievalNetwork {
    nn::MlpParams params;
    int state_dim = 0;
    int action_dim = 0;
};

/// Hidden nonlinearity used by both networks, fixed project-wide.
inline constexpr nn::Activation kHiddenActivation = nn::Activation::softplus;

FlowNetwork make_flow_network(int state_dim, int action_dim,
                              const std::vector<int>& hidden, std::uint64_t seed);
RetrievalNetwork make_retrieval_network(int state_dim, int action_dim,
                                        const std::vector<int>& hidden,
                                        std::uint64_t seed);

enum class Sampler { proportional, softmax };

/// M uniformly sampled actions with their edge flows at one state.
struct ActionProbabilityBuffer {
    Matrix actions;          // M x action_dim
    std::vector<Real> flows; // exp(F_log), strictly positive
    Real normalization = 0;  // sum of flows
};

Matrix concat_state_actions(const Vector& state, const Matrix& actions);

/// Uniform i.i.d. draws over the action box, one row per sample.
Matrix sample_uniform_actions(const std::vector<Real>& lower,
                              const std::vector<Real>& upper, int count,
                              std::mt19937_64& rng);

Vector log_flows(const FlowNetwork& net, const Matrix& state_action_rows);
Vector log_flows_for_state(const FlowNetwork& net, const Vector& state,
                           const Matrix& actions);

Real edge_flow(const FlowNetwork& net, const Vector& state, const Vector& action);

ActionProbabilityBuffer build_action_buffer(const FlowNetwork& net, const Vector& state,
                                            const std::vector<Real>& action_lower,
                                            const std::vector<Real>& action_upper,
                                            int buffer_size, std::mt19937_64& rng);

std::size_t sample_action_index(const ActionProbabilityBuffer& buffer,
                                std::mt19937_64& rng,
                                Sampler sampler = Sampler::proportional);
Vector sample_action(const ActionProbabilityBuffer& buffer, std::mt19937_64& rng,
                     Sampler sampler = Sampler::proportional);

std::size_t greedy_action_index(const ActionProbabilityBuffer& buffer);
Vector greedy_action(const ActionProbabilityBuffer& buffer);

Vector retrieve_parent(const RetrievalNetwork& net, const Vector& next_state,
                       const Vector& action);
/// One row of parents per (next_state row, action row) pair.
Matrix retrieve_parents_batch(const RetrievalNetwork& net, const Matrix& next_states,
                              const Matrix& actions);

/// (mu_A / K) * sum_k exp(F_log(s, a_k)) over K uniform action samples.
Real estimate_outflow(const FlowNetwork& net, const Vector& state,
                      const Matrix& sampled_actions, Real mu_A);

/// (mu_A / K) * sum_k exp(F_log(G(s, a_k), a_k)); parents come from the
/// retrieval network in one batched call.
Real estimate_inflow(const FlowNetwork& net, const RetrievalNetwork& retrieval,
                     const Vector& state, const Matrix& sampled_actions, Real mu_A);

/// Same estimator with the parent map swapped for an arbitrary function,
/// e.g. the closed-form translation parent.
using ParentFn = std::function<Vector(const Vector& state, const Vector& action)>;
Real estimate_inflow(const FlowNetwork& net, const ParentFn& parent,
                     const Vector& state, const Matrix& sampled_actions, Real mu_A);

/// Monte Carlo integral (mu / K) * sum_k f(a_k) for an arbitrary integrand.
Real mc_estimate(const std::function<Real(const Vector&)>& integrand,
                 const Matrix& sampled_actions, Real mu);

} // namespace cflow::flow
