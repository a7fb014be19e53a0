#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "cflow/common.hpp"

namespace cflow::nn {

using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

enum class Activation { tanh_act, relu, softplus };

std::string activation_name(Activation a);

/// Dense feed-forward network parameters. Hidden layers apply the chosen
/// nonlinearity, the output layer is linear. weights[i] maps layer i to
/// layer i+1 and has shape (layer_dims[i+1] x layer_dims[i]).
struct MlpParams {
    std::vector<int> layer_dims;
    std::vector<Matrix> weights;
    std::vector<Vector> biases;
    Activation activation = Activation::tanh_act;

    int input_dim() const { return layer_dims.front(); }
    int output_dim() const { return layer_dims.back(); }
    std::size_t layer_count() const { return weights.size(); }
};

/// Per-parameter gradients, shape-matched to an MlpParams.
struct GradientSet {
    std::vector<Matrix> weights;
    std::vector<Vector> biases;
};

struct AdamState {
    std::vector<Matrix> m_weights, v_weights;
    std::vector<Vector> m_biases, v_biases;
    long step_count = 0;
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real eps_opt = 1e-8;
};

/// Fan-in-scaled zero-mean Gaussian weights, zero biases. Deterministic for
/// a given (dims, seed) pair.
MlpParams mlp_init(const std::vector<int>& layer_dims, std::uint64_t seed,
                   Activation activation = Activation::tanh_act);

/// Batched forward pass, one sample per row. inputs is B x layer_dims[0],
/// result is B x layer_dims.back().
Matrix mlp_forward_batch(const MlpParams& params, const Matrix& inputs);

/// Exact reverse-mode gradients of sum(upstream_grad (.) output) with
/// respect to every weight and bias.
GradientSet mlp_backward(const MlpParams& params, const Matrix& inputs,
                         const Matrix& upstream_grad);

/// Central finite differences of the same objective, per parameter. Slow;
/// used by the gradcheck verification suite as the independent route.
GradientSet finite_difference_gradients(const MlpParams& params, const Matrix& inputs,
                                        const Matrix& upstream_grad, Real step = 1e-4);

/// Post-activation values of every layer, kept so a backward pass can skip
/// recomputing the forward pass. activations[0] is the input batch and
/// activations.back() the network output.
struct ForwardCache {
    std::vector<Matrix> activations;
    const Matrix& output() const { return activations.back(); }
};

Matrix mlp_forward_cached(const MlpParams& params, const Matrix& inputs,
                          ForwardCache& cache);
GradientSet mlp_backward_cached(const MlpParams& params, const ForwardCache& cache,
                                const Matrix& upstream_grad);

GradientSet zero_gradients(const MlpParams& params);
AdamState adam_init(const MlpParams& params, Real beta1 = 0.9, Real beta2 = 0.999,
                    Real eps_opt = 1e-8);

/// Bias-corrected Adam step; returns the updated parameters and state.
std::pair<MlpParams, AdamState> adam_update(const MlpParams& params,
                                            const GradientSet& grads,
                                            const AdamState& state,
                                            Real learning_rate);

/// Binary checkpoint with a layer_dims header followed by row-major weight
/// and bias arrays. Round-trips bit-exactly.
void save_params(const std::string& path, const MlpParams& params);
MlpParams load_params(const std::string& path);

bool all_finite(const MlpParams& params);
bool all_finite(const GradientSet& grads);

} // namespace cflow::nn
