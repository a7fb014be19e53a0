#include "cflow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cflow::flow {

FlowNetwork make_flow_network(int state_dim, int action_dim,
                              const std::vector<int>& hidden, std::uint64_t seed) {
    std::vector<int> dims;
    dims.push_back(state_dim + action_dim);
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(1);
    return FlowNetwork{nn::mlp_init(dims, seed, kHiddenActivation), state_dim, action_dim};
}

RetrievalNetwork make_retrieval_network(int state_dim, int action_dim,
                                        const std::vector<int>& hidden,
                                        std::uint64_t seed) {
    std::vector<int> dims;
    dims.push_back(state_dim + action_dim);
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(state_dim);
    return RetrievalNetwork{nn::mlp_init(dims, seed, kHiddenActivation), state_dim,
                            action_dim};
}

Matrix concat_state_actions(const Vector& state, const Matrix& actions) {
    Matrix rows(actions.rows(), state.size() + actions.cols());
    rows.leftCols(state.size()).rowwise() = state.transpose();
    rows.rightCols(actions.cols()) = actions;
    return rows;
}

Matrix sample_uniform_actions(const std::vector<Real>& lower,
                              const std::vector<Real>& upper, int count,
                              std::mt19937_64& rng) {
    if (count < 1) throw std::invalid_argument("sample_uniform_actions: count must be >= 1");
    if (lower.size() != upper.size() || lower.empty()) {
        throw std::invalid_argument("sample_uniform_actions: malformed action box");
    }
    Matrix actions(count, static_cast<int>(lower.size()));
    for (int i = 0; i < count; ++i) {
        for (std::size_t d = 0; d < lower.size(); ++d) {
            std::uniform_real_distribution<double> dist(lower[d], upper[d]);
            actions(i, static_cast<int>(d)) = static_cast<Real>(dist(rng));
        }
    }
    return actions;
}

Vector log_flows(const FlowNetwork& net, const Matrix& state_action_rows) {
    Matrix out = nn::mlp_forward_batch(net.params, state_action_rows);
    if (!out.allFinite()) {
        throw std::runtime_error("flow network produced a non-finite log-flow");
    }
    return out.col(0);
}

Vector log_flows_for_state(const FlowNetwork& net, const Vector& state,
                           const Matrix& actions) {
    return log_flows(net, concat_state_actions(state, actions));
}

Real edge_flow(const FlowNetwork& net, const Vector& state, const Vector& action) {
    Matrix row(1, state.size() + action.size());
    row << state.transpose(), action.transpose();
    const Real f = std::exp(log_flows(net, row)(0));
    if (!std::isfinite(f)) {
        throw std::runtime_error("edge flow overflowed for the given state-action pair");
    }
    return f;
}

ActionProbabilityBuffer build_action_buffer(const FlowNetwork& net, const Vector& state,
                                            const std::vector<Real>& action_lower,
                                            const std::vector<Real>& action_upper,
                                            int buffer_size, std::mt19937_64& rng) {
    ActionProbabilityBuffer buffer;
    buffer.actions = sample_uniform_actions(action_lower, action_upper, buffer_size, rng);
    const Vector lf = log_flows_for_state(net, state, buffer.actions);
    buffer.flows.resize(static_cast<std::size_t>(buffer_size));
    buffer.normalization = 0;
    for (int i = 0; i < buffer_size; ++i) {
        buffer.flows[static_cast<std::size_t>(i)] = std::exp(lf(i));
        buffer.normalization += buffer.flows[static_cast<std::size_t>(i)];
    }
    if (!std::isfinite(buffer.normalization)) {
        throw std::runtime_error("action buffer normalization is non-finite");
    }
    return buffer;
}

std::size_t sample_action_index(const ActionProbabilityBuffer& buffer,
                                std::mt19937_64& rng, Sampler sampler) {
    if (buffer.flows.empty()) throw std::invalid_argument("sample_action: empty buffer");
    if (sampler == Sampler::proportional) {
        if (buffer.normalization <= Real(0)) {
            throw std::runtime_error("sample_action: zero normalization");
        }
        std::uniform_real_distribution<double> dist(0.0, 1.0);
        const Real u = static_cast<Real>(dist(rng)) * buffer.normalization;
        Real acc = 0;
        for (std::size_t i = 0; i < buffer.flows.size(); ++i) {
            acc += buffer.flows[i];
            if (u <= acc) return i;
        }
        return buffer.flows.size() - 1; // rounding spill
    }
    // softmax over flow values, max-subtracted for stability
    const Real max_flow = *std::max_element(buffer.flows.begin(), buffer.flows.end());
    std::vector<Real> weights(buffer.flows.size());
    Real total = 0;
    for (std::size_t i = 0; i < buffer.flows.size(); ++i) {
        weights[i] = std::exp(buffer.flows[i] - max_flow);
        total += weights[i];
    }
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    const Real u = static_cast<Real>(dist(rng)) * total;
    Real acc = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (u <= acc) return i;
    }
    return weights.size() - 1;
}

Vector sample_action(const ActionProbabilityBuffer& buffer, std::mt19937_64& rng,
                     Sampler sampler) {
    return buffer.actions.row(sample_action_index(buffer, rng, sampler)).transpose();
}

std::size_t greedy_action_index(const ActionProbabilityBuffer& buffer) {
    if (buffer.flows.empty()) throw std::invalid_argument("greedy_action: empty buffer");
    std::size_t best = 0;
    for (std::size_t i = 1; i < buffer.flows.size(); ++i) {
        if (buffer.flows[i] > buffer.flows[best]) best = i;
    }
    return best;
}

Vector greedy_action(const ActionProbabilityBuffer& buffer) {
    return buffer.actions.row(greedy_action_index(buffer)).transpose();
}

Vector retrieve_parent(const RetrievalNetwork& net, const Vector& next_state,
                       const Vector& action) {
    Matrix row(1, next_state.size() + action.size());
    row << next_state.transpose(), action.transpose();
    Matrix out = nn::mlp_forward_batch(net.params, row);
    if (!out.allFinite()) {
        throw std::runtime_error("retrieval network produced a non-finite parent state");
    }
    return out.row(0).transpose();
}

Matrix retrieve_parents_batch(const RetrievalNetwork& net, const Matrix& next_states,
                              const Matrix& actions) {
    if (next_states.rows() != actions.rows()) {
        throw std::invalid_argument("retrieve_parents_batch: row count mismatch");
    }
    Matrix rows(next_states.rows(), next_states.cols() + actions.cols());
    rows.leftCols(next_states.cols()) = next_states;
    rows.rightCols(actions.cols()) = actions;
    Matrix out = nn::mlp_forward_batch(net.params, rows);
    if (!out.allFinite()) {
        throw std::runtime_error("retrieval network produced a non-finite parent state");
    }
    return out;
}

Real estimate_outflow(const FlowNetwork& net, const Vector& state,
                      const Matrix& sampled_actions, Real mu_A) {
    const Vector lf = log_flows_for_state(net, state, sampled_actions);
    return mu_A / static_cast<Real>(lf.size()) * lf.array().exp().sum();
}

Real estimate_inflow(const FlowNetwork& net, const RetrievalNetwork& retrieval,
                     const Vector& state, const Matrix& sampled_actions, Real mu_A) {
    Matrix states(sampled_actions.rows(), state.size());
    states.rowwise() = state.transpose();
    const Matrix parents = retrieve_parents_batch(retrieval, states, sampled_actions);
    Matrix rows(sampled_actions.rows(), state.size() + sampled_actions.cols());
    rows.leftCols(state.size()) = parents;
    rows.rightCols(sampled_actions.cols()) = sampled_actions;
    const Vector lf = log_flows(net, rows);
    return mu_A / static_cast<Real>(lf.size()) * lf.array().exp().sum();
}

Real estimate_inflow(const FlowNetwork& net, const ParentFn& parent,
                     const Vector& state, const Matrix& sampled_actions, Real mu_A) {
    const auto k = sampled_actions.rows();
    Matrix rows(k, state.size() + sampled_actions.cols());
    for (Eigen::Index i = 0; i < k; ++i) {
        const Vector a = sampled_actions.row(i).transpose();
        rows.row(i).head(state.size()) = parent(state, a).transpose();
        rows.row(i).tail(sampled_actions.cols()) = a.transpose();
    }
    const Vector lf = log_flows(net, rows);
    return mu_A / static_cast<Real>(k) * lf.array().exp().sum();
}

Real mc_estimate(const std::function<Real(const Vector&)>& integrand,
                 const Matrix& sampled_actions, Real mu) {
    Real sum = 0;
    for (Eigen::Index i = 0; i < sampled_actions.rows(); ++i) {
        sum += integrand(sampled_actions.row(i).transpose());
    }
    return mu / static_cast<Real>(sampled_actions.rows()) * sum;
}

} // namespace cflow::flow
