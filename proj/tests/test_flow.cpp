#include "doctest.h"

#include <cmath>
#include <numbers>

#include "cflow/flow.hpp"
#include "test_util.hpp"

using namespace cflow;
using flow::Matrix;
using flow::Vector;

namespace {

constexpr Real kHalfPi = std::numbers::pi_v<Real> / 2;

flow::FlowNetwork zeroed_flow_net(Real output_bias = 0) {
    auto net = flow::make_flow_network(2, 1, {8, 8}, 1);
    for (auto& w : net.params.weights) w.setZero();
    for (auto& b : net.params.biases) b.setZero();
    net.params.biases.back()(0) = output_bias;
    return net;
}

flow::ActionProbabilityBuffer buffer_with_flows(const std::vector<Real>& flows) {
    flow::ActionProbabilityBuffer buffer;
    buffer.actions = Matrix(static_cast<Eigen::Index>(flows.size()), 1);
    for (std::size_t i = 0; i < flows.size(); ++i) {
        buffer.actions(static_cast<Eigen::Index>(i), 0) =
            static_cast<Real>(i) / static_cast<Real>(flows.size());
    }
    buffer.flows = flows;
    buffer.normalization = 0;
    for (Real f : flows) buffer.normalization += f;
    return buffer;
}

} // namespace

TEST_CASE("edge_flow") {
    Vector s(2);
    s << 3.0, 4.0;
    Vector a(1);
    a << 0.7;

    SUBCASE("zero-initialized network gives flow 1 everywhere") {
        const auto net = zeroed_flow_net();
        CHECK(flow::edge_flow(net, s, a) == doctest::Approx(1.0));
        Vector s2(2);
        s2 << -7.0, 11.5;
        CHECK(flow::edge_flow(net, s2, a) == doctest::Approx(1.0));
    }

    SUBCASE("purity: identical inputs give identical flows") {
        const auto net = flow::make_flow_network(2, 1, {16, 16}, 7);
        CHECK(flow::edge_flow(net, s, a) == flow::edge_flow(net, s, a));
    }

    SUBCASE("equals exp of the network forward on [s; a]") {
        const auto net = flow::make_flow_network(2, 1, {16, 16}, 7);
        Matrix row(1, 3);
        row << s(0), s(1), a(0);
        const Real expected = std::exp(nn::mlp_forward_batch(net.params, row)(0, 0));
        CHECK(flow::edge_flow(net, s, a) == doctest::Approx(expected).epsilon(1e-15));
        CHECK(flow::edge_flow(net, s, a) > 0);
    }
}

TEST_CASE("build_action_buffer") {
    Vector s(2);
    s << 0.0, 0.0;

    SUBCASE("single action buffer") {
        const auto net = flow::make_flow_network(2, 1, {8}, 3);
        auto rng = make_rng(1, Stream::analysis);
        const auto buffer = flow::build_action_buffer(net, s, {0}, {kHalfPi}, 1, rng);
        REQUIRE(buffer.flows.size() == 1);
        CHECK(buffer.normalization == doctest::Approx(buffer.flows[0]));
    }

    SUBCASE("zero-init network: all flows 1, normalization M") {
        const auto net = zeroed_flow_net();
        auto rng = make_rng(2, Stream::analysis);
        const auto buffer = flow::build_action_buffer(net, s, {0}, {kHalfPi}, 64, rng);
        for (Real f : buffer.flows) CHECK(f == doctest::Approx(1.0));
        CHECK(buffer.normalization == doctest::Approx(64.0));
    }

    SUBCASE("sampled actions are uniform on the box") {
        const auto net = zeroed_flow_net();
        auto rng = make_rng(3, Stream::analysis);
        std::vector<Real> draws;
        draws.reserve(100000);
        for (int i = 0; i < 100; ++i) {
            const auto buffer = flow::build_action_buffer(net, s, {0}, {kHalfPi}, 1000, rng);
            for (Eigen::Index r = 0; r < buffer.actions.rows(); ++r) {
                draws.push_back(buffer.actions(r, 0));
            }
        }
        CHECK(test_util::ks_statistic_uniform(draws, 0, kHalfPi) < 0.01);
    }
}

TEST_CASE("sample_action") {
    SUBCASE("overwhelming flow wins essentially always") {
        const auto buffer = buffer_with_flows({1.0, 1e-12});
        auto rng = make_rng(4, Stream::analysis);
        for (int i = 0; i < 1000; ++i) {
            CHECK(flow::sample_action_index(buffer, rng) == 0);
        }
    }

    SUBCASE("uniform flows give uniform selection (chi-square at alpha 0.01)") {
        const auto buffer = buffer_with_flows(std::vector<Real>(10, 1.0));
        auto rng = make_rng(5, Stream::analysis);
        std::vector<long> counts(10, 0);
        const long draws = 100000;
        for (long i = 0; i < draws; ++i) {
            ++counts[flow::sample_action_index(buffer, rng)];
        }
        const std::vector<Real> probs(10, 0.1);
        // 99th percentile of chi-square with 9 degrees of freedom.
        CHECK(test_util::chi_square_statistic(counts, probs, draws) < 21.666);
    }

    SUBCASE("uneven flows follow flows/normalization (chi-square at alpha 0.01)") {
        const std::vector<Real> flows{1.0, 2.0, 3.0, 4.0};
        const auto buffer = buffer_with_flows(flows);
        auto rng = make_rng(55, Stream::analysis);
        std::vector<long> counts(4, 0);
        const long draws = 100000;
        for (long i = 0; i < draws; ++i) {
            ++counts[flow::sample_action_index(buffer, rng)];
        }
        std::vector<Real> probs;
        for (Real f : flows) probs.push_back(f / buffer.normalization);
        // 99th percentile of chi-square with 3 degrees of freedom.
        CHECK(test_util::chi_square_statistic(counts, probs, draws) < 11.345);
    }

    SUBCASE("flows [1,3] select index 1 with frequency 3/4") {
        const auto buffer = buffer_with_flows({1.0, 3.0});
        auto rng = make_rng(6, Stream::analysis);
        long hits = 0;
        const long draws = 100000;
        for (long i = 0; i < draws; ++i) {
            if (flow::sample_action_index(buffer, rng) == 1) ++hits;
        }
        CHECK(static_cast<Real>(hits) / static_cast<Real>(draws) ==
              doctest::Approx(0.75).epsilon(0.015));
    }

    SUBCASE("empty buffer throws") {
        flow::ActionProbabilityBuffer empty;
        auto rng = make_rng(7, Stream::analysis);
        CHECK_THROWS_AS(flow::sample_action_index(empty, rng), std::invalid_argument);
    }

    SUBCASE("softmax sampler prefers larger flows") {
        const auto buffer = buffer_with_flows({0.5, 3.5});
        auto rng = make_rng(8, Stream::analysis);
        long hits = 0;
        for (long i = 0; i < 10000; ++i) {
            if (flow::sample_action_index(buffer, rng, flow::Sampler::softmax) == 1) ++hits;
        }
        // softmax over flow values: p(1) = 1 / (1 + exp(-3))
        CHECK(static_cast<Real>(hits) / 10000.0 ==
              doctest::Approx(1.0 / (1.0 + std::exp(-3.0))).epsilon(0.05));
    }
}

TEST_CASE("greedy_action") {
    SUBCASE("picks the maximal flow") {
        const auto buffer = buffer_with_flows({1.0, 3.0, 2.0});
        CHECK(flow::greedy_action_index(buffer) == 1);
    }

    SUBCASE("ties break to the lowest index") {
        const auto buffer = buffer_with_flows({2.0, 2.0, 2.0});
        CHECK(flow::greedy_action_index(buffer) == 0);
    }

    SUBCASE("invariant under strictly increasing transforms") {
        auto rng = make_rng(9, Stream::analysis);
        std::uniform_real_distribution<double> flow_dist(0.01, 5.0);
        std::uniform_real_distribution<double> scale_dist(0.1, 100.0);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<Real> flows(8);
            for (auto& f : flows) f = static_cast<Real>(flow_dist(rng));
            const auto base = buffer_with_flows(flows);
            const Real c = static_cast<Real>(scale_dist(rng));
            std::vector<Real> scaled = flows, curved = flows;
            for (auto& f : scaled) f *= c;
            for (auto& f : curved) f = std::exp(f) + f * f * f;
            CHECK(flow::greedy_action_index(base) ==
                  flow::greedy_action_index(buffer_with_flows(scaled)));
            CHECK(flow::greedy_action_index(base) ==
                  flow::greedy_action_index(buffer_with_flows(curved)));
        }
    }
}

TEST_CASE("retrieve_parent") {
    Vector s(2);
    s << 5.0, 9.0;
    Vector a(1);
    a << 0.3;

    SUBCASE("zero-initialized network returns the zero vector") {
        auto net = flow::make_retrieval_network(2, 1, {8, 8}, 1);
        for (auto& w : net.params.weights) w.setZero();
        const Vector parent = flow::retrieve_parent(net, s, a);
        CHECK(parent.size() == 2);
        CHECK(parent.isZero(0));
    }

    SUBCASE("purity") {
        const auto net = flow::make_retrieval_network(2, 1, {8, 8}, 13);
        CHECK(flow::retrieve_parent(net, s, a) == flow::retrieve_parent(net, s, a));
    }
}

TEST_CASE("estimate_outflow") {
    Vector s(2);
    s << 1.0, 2.0;

    SUBCASE("constant flow integrates exactly for any K") {
        const auto net = zeroed_flow_net(0.7);
        const Real expected = std::exp(0.7) * kHalfPi;
        auto rng = make_rng(10, Stream::analysis);
        for (int k : {1, 3, 17, 256}) {
            const auto actions = flow::sample_uniform_actions({0}, {kHalfPi}, k, rng);
            CHECK(flow::estimate_outflow(net, s, actions, kHalfPi) ==
                  doctest::Approx(expected).epsilon(1e-12));
        }
    }

    SUBCASE("K = 1 reduces to mu_A times a single edge flow") {
        const auto net = flow::make_flow_network(2, 1, {16}, 21);
        auto rng = make_rng(11, Stream::analysis);
        const auto actions = flow::sample_uniform_actions({0}, {kHalfPi}, 1, rng);
        const Real expected = kHalfPi * flow::edge_flow(net, s, actions.row(0).transpose());
        CHECK(flow::estimate_outflow(net, s, actions, kHalfPi) ==
              doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("monte carlo integral of an analytic flow") {
    // F(a) = 1 + sin(a) on [0, pi/2] integrates to pi/2 + 1.
    const Real truth = kHalfPi + 1.0;
    const auto integrand = [](const Vector& a) { return 1 + std::sin(a(0)); };

    SUBCASE("K = 10^4 estimate lands within 0.02") {
        auto rng = make_rng(12, Stream::analysis);
        const auto actions = flow::sample_uniform_actions({0}, {kHalfPi}, 10000, rng);
        CHECK(std::abs(flow::mc_estimate(integrand, actions, kHalfPi) - truth) < 0.02);
    }

    SUBCASE("unbiased: mean of many K = 8 estimates within 3 standard errors") {
        auto rng = make_rng(13, Stream::analysis);
        const int trials = 10000;
        std::vector<Real> estimates(trials);
        for (int t = 0; t < trials; ++t) {
            const auto actions = flow::sample_uniform_actions({0}, {kHalfPi}, 8, rng);
            estimates[static_cast<std::size_t>(t)] =
                flow::mc_estimate(integrand, actions, kHalfPi);
        }
        Real mean = 0;
        for (Real e : estimates) mean += e;
        mean /= trials;
        Real var = 0;
        for (Real e : estimates) var += (e - mean) * (e - mean);
        var /= (trials - 1);
        const Real standard_error = std::sqrt(var / trials);
        CHECK(std::abs(mean - truth) < 3 * standard_error);
    }
}

TEST_CASE("estimate_inflow") {
    Vector s(2);
    s << 4.0, 4.0;

    SUBCASE("identity retrieval makes inflow equal outflow on shared actions") {
        const auto net = flow::make_flow_network(2, 1, {16, 16}, 31);
        auto rng = make_rng(14, Stream::analysis);
        const auto actions = flow::sample_uniform_actions({0}, {kHalfPi}, 64, rng);
        const flow::ParentFn identity = [](const Vector& state, const Vector&) {
            return state;
        };
        CHECK(flow::estimate_inflow(net, identity, s, actions, kHalfPi) ==
              doctest::Approx(flow::estimate_outflow(net, s, actions, kHalfPi))
                  .epsilon(1e-12));
    }

    SUBCASE("K = 1 reduces to mu_A times the flow at the retrieved parent") {
        const auto flow_net = flow::make_flow_network(2, 1, {16}, 33);
        const auto retrieval = flow::make_retrieval_network(2, 1, {16}, 34);
        auto rng = make_rng(15, Stream::analysis);
        const auto actions = flow::sample_uniform_actions({0}, {kHalfPi}, 1, rng);
        const Vector a0 = actions.row(0).transpose();
        const Vector parent = flow::retrieve_parent(retrieval, s, a0);
        const Real expected = kHalfPi * flow::edge_flow(flow_net, parent, a0);
        CHECK(flow::estimate_inflow(flow_net, retrieval, s, actions, kHalfPi) ==
              doctest::Approx(expected).epsilon(1e-12));
    }

    SUBCASE("with the closed-form parent, converges to the quadrature value") {
        const auto net = flow::make_flow_network(2, 1, {16, 16}, 35);
        const flow::ParentFn translation_parent = [](const Vector& state, const Vector& a) {
            Vector parent(2);
            parent << state(0) - std::cos(a(0)), state(1) - std::sin(a(0));
            return parent;
        };
        // Quadrature of the composed integrand a -> F(parent(s, a), a).
        const long quad_points = 20000;
        Real truth = 0;
        const Real h = kHalfPi / static_cast<Real>(quad_points);
        for (long i = 0; i < quad_points; ++i) {
            Vector a(1);
            a << (static_cast<Real>(i) + Real(0.5)) * h;
            truth += flow::edge_flow(net, translation_parent(s, a), a);
        }
        truth *= h;

        auto rng = make_rng(16, Stream::analysis);
        const auto actions = flow::sample_uniform_actions({0}, {kHalfPi}, 50000, rng);
        const Real estimate = flow::estimate_inflow(net, translation_parent, s, actions,
                                                    kHalfPi);
        CHECK(estimate == doctest::Approx(truth).epsilon(0.02));
    }
}
