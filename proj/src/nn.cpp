#include "cflow/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

namespace cflow::nn {

namespace {

void check_shapes(const MlpParams& params, const GradientSet& grads) {
    if (grads.weights.size() != params.weights.size() ||
        grads.biases.size() != params.biases.size()) {
        throw std::invalid_argument("gradient layer count does not match parameters");
    }
    for (std::size_t i = 0; i < params.weights.size(); ++i) {
        if (grads.weights[i].rows() != params.weights[i].rows() ||
            grads.weights[i].cols() != params.weights[i].cols() ||
            grads.biases[i].size() != params.biases[i].size()) {
            throw std::invalid_argument("gradient shape mismatch at layer " +
                                        std::to_string(i));
        }
    }
}

Matrix apply_activation(Activation act, Matrix z) {
    switch (act) {
    case Activation::tanh_act:
        return z.array().tanh().matrix();
    case Activation::relu:
        return z.array().max(Real(0)).matrix();
    case Activation::softplus:
        // log(1 + e^z), written to stay finite for large |z|
        return z.unaryExpr([](Real v) {
            return v > Real(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
        });
    }
    throw std::logic_error("unknown activation");
}

// Derivative expressed through the already-activated value h = act(z).
Matrix activation_grad_from_output(Activation act, const Matrix& h) {
    switch (act) {
    case Activation::tanh_act:
        return (Real(1) - h.array().square()).matrix();
    case Activation::relu:
        return (h.array() > Real(0)).cast<Real>().matrix();
    case Activation::softplus:
        // sigmoid(z) recovered from h = softplus(z): 1 - e^{-h}
        return (Real(1) - (-h.array()).exp()).matrix();
    }
    throw std::logic_error("unknown activation");
}

} // namespace

std::string activation_name(Activation a) {
    switch (a) {
    case Activation::tanh_act:
        return "tanh";
    case Activation::relu:
        return "relu";
    case Activation::softplus:
        return "softplus";
    }
    return "unknown";
}

MlpParams mlp_init(const std::vector<int>& layer_dims, std::uint64_t seed,
                   Activation activation) {
    if (layer_dims.size() < 2) {
        throw std::invalid_argument("mlp_init: need at least input and output dims");
    }
    for (int d : layer_dims) {
        if (d < 1) throw std::invalid_argument("mlp_init: all layer dims must be >= 1");
    }
    MlpParams params;
    params.layer_dims = layer_dims;
    params.activation = activation;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i + 1 < layer_dims.size(); ++i) {
        const int fan_in = layer_dims[i];
        const int fan_out = layer_dims[i + 1];
        const Real scale = Real(1) / std::sqrt(Real(fan_in));
        Matrix w(fan_out, fan_in);
        for (int r = 0; r < fan_out; ++r) {
            for (int c = 0; c < fan_in; ++c) {
                w(r, c) = static_cast<Real>(normal(rng)) * scale;
            }
        }
        params.weights.push_back(std::move(w));
        params.biases.push_back(Vector::Zero(fan_out));
    }
    return params;
}

Matrix mlp_forward_batch(const MlpParams& params, const Matrix& inputs) {
    if (inputs.cols() != params.input_dim()) {
        throw std::invalid_argument("mlp_forward_batch: input has " +
                                    std::to_string(inputs.cols()) +
                                    " columns, expected " +
                                    std::to_string(params.input_dim()));
    }
    Matrix h = inputs;
    for (std::size_t i = 0; i < params.layer_count(); ++i) {
        Matrix z = h * params.weights[i].transpose();
        z.rowwise() += params.biases[i].transpose();
        if (i + 1 < params.layer_count()) {
            h = apply_activation(params.activation, std::move(z));
        } else {
            h = std::move(z);
        }
    }
    return h;
}

Matrix mlp_forward_cached(const MlpParams& params, const Matrix& inputs,
                          ForwardCache& cache) {
    if (inputs.cols() != params.input_dim()) {
        throw std::invalid_argument("mlp_forward_cached: input dim mismatch");
    }
    cache.activations.clear();
    cache.activations.reserve(params.layer_count() + 1);
    cache.activations.push_back(inputs);
    for (std::size_t i = 0; i < params.layer_count(); ++i) {
        Matrix z = cache.activations.back() * params.weights[i].transpose();
        z.rowwise() += params.biases[i].transpose();
        if (i + 1 < params.layer_count()) {
            cache.activations.push_back(apply_activation(params.activation, std::move(z)));
        } else {
            cache.activations.push_back(std::move(z));
        }
    }
    return cache.output();
}

GradientSet mlp_backward_cached(const MlpParams& params, const ForwardCache& cache,
                                const Matrix& upstream_grad) {
    if (cache.activations.size() != params.layer_count() + 1) {
        throw std::invalid_argument("mlp_backward_cached: cache does not match network");
    }
    if (upstream_grad.rows() != cache.activations.front().rows() ||
        upstream_grad.cols() != params.output_dim()) {
        throw std::invalid_argument("mlp_backward_cached: upstream_grad must be batch x output_dim");
    }
    GradientSet grads = zero_gradients(params);
    Matrix delta = upstream_grad; // dL/dz for the current layer, batch x width
    for (std::size_t i = params.layer_count(); i-- > 0;) {
        grads.weights[i] = delta.transpose() * cache.activations[i];
        grads.biases[i] = delta.colwise().sum().transpose();
        if (i > 0) {
            Matrix back = delta * params.weights[i];
            delta = back.cwiseProduct(
                activation_grad_from_output(params.activation, cache.activations[i]));
        }
    }
    return grads;
}

GradientSet mlp_backward(const MlpParams& params, const Matrix& inputs,
                         const Matrix& upstream_grad) {
    if (upstream_grad.rows() != inputs.rows()) {
        throw std::invalid_argument("mlp_backward: upstream_grad must be batch x output_dim");
    }
    ForwardCache cache;
    mlp_forward_cached(params, inputs, cache);
    return mlp_backward_cached(params, cache, upstream_grad);
}

GradientSet finite_difference_gradients(const MlpParams& params, const Matrix& inputs,
                                        const Matrix& upstream_grad, Real step) {
    auto objective = [&](const MlpParams& p) {
        return (mlp_forward_batch(p, inputs).array() * upstream_grad.array()).sum();
    };
    GradientSet grads = zero_gradients(params);
    MlpParams probe = params;
    for (std::size_t layer = 0; layer < params.layer_count(); ++layer) {
        for (Eigen::Index r = 0; r < params.weights[layer].rows(); ++r) {
            for (Eigen::Index c = 0; c < params.weights[layer].cols(); ++c) {
                probe.weights[layer](r, c) = params.weights[layer](r, c) + step;
                const Real up = objective(probe);
                probe.weights[layer](r, c) = params.weights[layer](r, c) - step;
                const Real down = objective(probe);
                probe.weights[layer](r, c) = params.weights[layer](r, c);
                grads.weights[layer](r, c) = (up - down) / (2 * step);
            }
        }
        for (Eigen::Index r = 0; r < params.biases[layer].size(); ++r) {
            probe.biases[layer](r) = params.biases[layer](r) + step;
            const Real up = objective(probe);
            probe.biases[layer](r) = params.biases[layer](r) - step;
            const Real down = objective(probe);
            probe.biases[layer](r) = params.biases[layer](r);
            grads.biases[layer](r) = (up - down) / (2 * step);
        }
    }
    return grads;
}

GradientSet zero_gradients(const MlpParams& params) {
    GradientSet g;
    for (std::size_t i = 0; i < params.layer_count(); ++i) {
        g.weights.push_back(Matrix::Zero(params.weights[i].rows(), params.weights[i].cols()));
        g.biases.push_back(Vector::Zero(params.biases[i].size()));
    }
    return g;
}

AdamState adam_init(const MlpParams& params, Real beta1, Real beta2, Real eps_opt) {
    AdamState s;
    for (std::size_t i = 0; i < params.layer_count(); ++i) {
        s.m_weights.push_back(Matrix::Zero(params.weights[i].rows(), params.weights[i].cols()));
        s.v_weights.push_back(Matrix::Zero(params.weights[i].rows(), params.weights[i].cols()));
        s.m_biases.push_back(Vector::Zero(params.biases[i].size()));
        s.v_biases.push_back(Vector::Zero(params.biases[i].size()));
    }
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps_opt = eps_opt;
    return s;
}

std::pair<MlpParams, AdamState> adam_update(const MlpParams& params,
                                            const GradientSet& grads,
                                            const AdamState& state,
                                            Real learning_rate) {
    if (learning_rate <= Real(0)) {
        throw std::invalid_argument("adam_update: learning_rate must be > 0");
    }
    check_shapes(params, grads);
    if (!all_finite(grads)) {
        throw std::invalid_argument("adam_update: non-finite gradient entries");
    }

    MlpParams out = params;
    AdamState st = state;
    st.step_count += 1;
    const Real b1 = st.beta1, b2 = st.beta2;
    const Real bias1 = Real(1) - std::pow(b1, Real(st.step_count));
    const Real bias2 = Real(1) - std::pow(b2, Real(st.step_count));

    for (std::size_t i = 0; i < params.layer_count(); ++i) {
        st.m_weights[i] = b1 * st.m_weights[i] + (Real(1) - b1) * grads.weights[i];
        st.v_weights[i] = (b2 * st.v_weights[i].array() +
                           (Real(1) - b2) * grads.weights[i].array().square())
                              .matrix();
        out.weights[i].array() -=
            learning_rate * (st.m_weights[i].array() / bias1) /
            ((st.v_weights[i].array() / bias2).sqrt() + st.eps_opt);

        st.m_biases[i] = b1 * st.m_biases[i] + (Real(1) - b1) * grads.biases[i];
        st.v_biases[i] = (b2 * st.v_biases[i].array() +
                          (Real(1) - b2) * grads.biases[i].array().square())
                             .matrix();
        out.biases[i].array() -=
            learning_rate * (st.m_biases[i].array() / bias1) /
            ((st.v_biases[i].array() / bias2).sqrt() + st.eps_opt);
    }
    return {std::move(out), std::move(st)};
}

namespace {

constexpr char kMagic[4] = {'C', 'F', 'N', 'N'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

} // namespace

void save_params(const std::string& path, const MlpParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    out.write(kMagic, 4);
    write_pod(out, kFormatVersion);
    write_pod(out, static_cast<std::uint32_t>(sizeof(Real)));
    write_pod(out, static_cast<std::uint32_t>(params.activation));
    write_pod(out, static_cast<std::uint32_t>(params.layer_dims.size()));
    for (int d : params.layer_dims) write_pod(out, static_cast<std::int64_t>(d));
    for (std::size_t i = 0; i < params.layer_count(); ++i) {
        // RowMajor storage: writing the raw buffer emits row-major order.
        out.write(reinterpret_cast<const char*>(params.weights[i].data()),
                  static_cast<std::streamsize>(sizeof(Real) * params.weights[i].size()));
        out.write(reinterpret_cast<const char*>(params.biases[i].data()),
                  static_cast<std::streamsize>(sizeof(Real) * params.biases[i].size()));
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

MlpParams load_params(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    const auto version = read_pod<std::uint32_t>(in);
    if (version != kFormatVersion) {
        throw std::runtime_error("checkpoint: unsupported format version");
    }
    const auto real_size = read_pod<std::uint32_t>(in);
    if (real_size != sizeof(Real)) {
        throw std::runtime_error("checkpoint: precision mismatch (file uses " +
                                 std::to_string(real_size * 8) + "-bit reals)");
    }
    const auto act = static_cast<Activation>(read_pod<std::uint32_t>(in));
    const auto n_dims = read_pod<std::uint32_t>(in);
    if (n_dims < 2) throw std::runtime_error("checkpoint: corrupt layer_dims header");
    std::vector<int> dims(n_dims);
    for (auto& d : dims) d = static_cast<int>(read_pod<std::int64_t>(in));

    MlpParams params;
    params.layer_dims = dims;
    params.activation = act;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        Matrix w(dims[i + 1], dims[i]);
        in.read(reinterpret_cast<char*>(w.data()),
                static_cast<std::streamsize>(sizeof(Real) * w.size()));
        Vector b(dims[i + 1]);
        in.read(reinterpret_cast<char*>(b.data()),
                static_cast<std::streamsize>(sizeof(Real) * b.size()));
        if (!in) throw std::runtime_error("checkpoint: truncated parameter data");
        params.weights.push_back(std::move(w));
        params.biases.push_back(std::move(b));
    }
    return params;
}

bool all_finite(const MlpParams& params) {
    for (const auto& w : params.weights) {
        if (!w.allFinite()) return false;
    }
    for (const auto& b : params.biases) {
        if (!b.allFinite()) return false;
    }
    return true;
}

bool all_finite(const GradientSet& grads) {
    for (const auto& w : grads.weights) {
        if (!w.allFinite()) return false;
    }
    for (const auto& b : grads.biases) {
        if (!b.allFinite()) return false;
    }
    return true;
}

} // namespace cflow::nn
