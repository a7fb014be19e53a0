#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "cflow/training.hpp"
#include "test_util.hpp"

using namespace cflow;
using flow::Matrix;
using flow::Vector;

namespace {

constexpr Real kHalfPi = std::numbers::pi_v<Real> / 2;

env::Trajectory make_episode(int length, Real final_reward, Real x0 = 0) {
    env::Trajectory traj;
    Real x = x0;
    for (int i = 0; i < length; ++i) {
        env::Transition t;
        t.state = {x, 0.0};
        t.action = {0.0};
        t.next_state = {x + 1, 0.0};
        t.done = (i + 1 == length);
        t.reward = t.done ? final_reward : 0.0;
        t.step_index = i;
        traj.transitions.push_back(t);
        x += 1;
    }
    traj.episode_return = final_reward;
    return traj;
}

flow::FlowNetwork constant_flow_net(Real log_flow) {
    auto net = flow::make_flow_network(2, 1, {8}, 1);
    for (auto& w : net.params.weights) w.setZero();
    for (auto& b : net.params.biases) b.setZero();
    net.params.biases.back()(0) = log_flow;
    return net;
}

env::EnvSpec point_robot_spec() { return env::make_env("point-robot-sparse").spec(); }

training::TrainConfig tiny_config() {
    training::TrainConfig config;
    config.env_id = "point-robot-sparse";
    config.total_timesteps = 600;
    config.start_training_timestep = 240;
    config.M = 10;
    config.K = 5;
    config.batch_size = 8;
    config.learning_rate = 3e-4;
    config.flow_hidden = {8, 8};
    config.retrieval_hidden = {8, 8};
    config.replay_capacity = 600;
    config.pretrain_epochs = 5;
    config.finetune_interval = 200;
    config.finetune_epochs = 2;
    config.log_interval = 120;
    config.seed = 77;
    return config;
}

} // namespace

TEST_CASE("replay buffer") {
    SUBCASE("evicts the oldest episode first") {
        training::ReplayBuffer buffer(5);
        buffer.add(make_episode(2, 0.1, 0));
        buffer.add(make_episode(2, 0.2, 10));
        buffer.add(make_episode(2, 0.3, 20));
        CHECK(buffer.size() == 4);
        CHECK(buffer.episode_count() == 2);
        CHECK(buffer.transition(0).state[0] == doctest::Approx(10.0));
    }

    SUBCASE("size never exceeds capacity and episodes stay whole") {
        training::ReplayBuffer buffer(25);
        for (int i = 0; i < 40; ++i) buffer.add(make_episode(4, 0.0, 100 * i));
        CHECK(buffer.size() <= 25);
        CHECK(buffer.size() == buffer.episode_count() * 4);
        for (std::size_t e = 0; e < buffer.episode_count(); ++e) {
            CHECK(buffer.episode(e).transitions.size() == 4);
            CHECK(buffer.episode(e).transitions.back().done);
        }
    }

    SUBCASE("sampled minibatches come from complete episodes only") {
        training::ReplayBuffer buffer(30);
        for (int i = 0; i < 10; ++i) buffer.add(make_episode(3, 0.0, 50 * i));
        auto rng = make_rng(1, Stream::minibatch);
        const auto batch = buffer.sample(64, rng);
        for (const auto* t : batch) {
            // Every sampled transition belongs to an episode whose start is a
            // multiple of 50, so the episode was stored whole.
            const Real offset = std::fmod(t->state[0], 50.0);
            CHECK(offset == doctest::Approx(static_cast<Real>(t->step_index)));
        }
    }

    SUBCASE("rejects over-long and empty episodes") {
        training::ReplayBuffer buffer(3);
        CHECK_THROWS_AS(buffer.add(make_episode(4, 0.0)), std::invalid_argument);
        CHECK_THROWS_AS(buffer.add(env::Trajectory{}), std::invalid_argument);
    }
}

TEST_CASE("flow_matching_loss_log") {
    const auto spec = point_robot_spec();
    const auto retrieval = flow::make_retrieval_network(2, 1, {8, 8}, 2);

    SUBCASE("constant flow, zero reward, outflow kept: zero residual") {
        const auto net = constant_flow_net(0.4);
        auto episode = make_episode(3, 0.0);
        episode.transitions[2].reward = 0.0; // zero reward everywhere
        std::vector<const env::Transition*> batch;
        for (const auto& t : episode.transitions) batch.push_back(&t);
        auto rng = make_rng(3, Stream::loss_actions);
        const auto result = training::flow_matching_loss_log(
            net, retrieval, batch, 4, 1.0, 1.0, spec, training::TerminalOutflow::keep, rng);
        CHECK(result.terms.batch_mean == doctest::Approx(0.0).epsilon(1e-14));
        for (Real r : result.terms.squared_residual) {
            CHECK(r == doctest::Approx(0.0).epsilon(1e-14));
        }
    }

    SUBCASE("single terminal state, dropped outflow, hand-computed residual") {
        // F_log = 0, K = 2, eps = 1, lambda = 1, R = 1:
        // residual = (log(1 + 2) - log(1 + 1))^2
        const auto net = constant_flow_net(0.0);
        const auto episode = make_episode(1, 1.0);
        std::vector<const env::Transition*> batch{&episode.transitions[0]};
        auto rng = make_rng(4, Stream::loss_actions);
        const auto result = training::flow_matching_loss_log(
            net, retrieval, batch, 2, 1.0, 1.0, spec, training::TerminalOutflow::drop, rng);
        const Real expected = std::pow(std::log(3.0) - std::log(2.0), 2);
        CHECK(result.terms.batch_mean == doctest::Approx(expected).epsilon(1e-12));
        CHECK(result.terms.batch_mean == doctest::Approx(0.1644).epsilon(1e-3));
    }

    SUBCASE("gradient matches finite differences through the full loss") {
        auto net = flow::make_flow_network(2, 1, {6}, 5);
        const auto episode = make_episode(3, 0.8);
        std::vector<const env::Transition*> batch;
        for (const auto& t : episode.transitions) batch.push_back(&t);

        const auto loss_at = [&](const nn::MlpParams& params) {
            flow::FlowNetwork probe = net;
            probe.params = params;
            auto rng = make_rng(6, Stream::loss_actions); // same actions every call
            return training::flow_matching_loss_log(probe, retrieval, batch, 4, 2.5, 1.0,
                                                    spec, training::TerminalOutflow::drop,
                                                    rng)
                .terms.batch_mean;
        };

        auto rng = make_rng(6, Stream::loss_actions);
        const auto analytic = training::flow_matching_loss_log(
            net, retrieval, batch, 4, 2.5, 1.0, spec, training::TerminalOutflow::drop, rng);

        const Real h = 1e-5;
        Real worst = 0;
        nn::MlpParams probe = net.params;
        for (std::size_t layer = 0; layer < probe.layer_count(); ++layer) {
            for (Eigen::Index r = 0; r < probe.weights[layer].rows(); ++r) {
                for (Eigen::Index c = 0; c < probe.weights[layer].cols(); ++c) {
                    const Real saved = probe.weights[layer](r, c);
                    probe.weights[layer](r, c) = saved + h;
                    const Real up = loss_at(probe);
                    probe.weights[layer](r, c) = saved - h;
                    const Real down = loss_at(probe);
                    probe.weights[layer](r, c) = saved;
                    const Real numeric = (up - down) / (2 * h);
                    worst = std::max(worst,
                                     test_util::relative_error(
                                         analytic.flow_gradients.weights[layer](r, c),
                                         numeric));
                }
            }
            for (Eigen::Index r = 0; r < probe.biases[layer].size(); ++r) {
                const Real saved = probe.biases[layer](r);
                probe.biases[layer](r) = saved + h;
                const Real up = loss_at(probe);
                probe.biases[layer](r) = saved - h;
                const Real down = loss_at(probe);
                probe.biases[layer](r) = saved;
                const Real numeric = (up - down) / (2 * h);
                worst = std::max(worst, test_util::relative_error(
                                            analytic.flow_gradients.biases[layer](r),
                                            numeric));
            }
        }
        CHECK(worst < 1e-3);
    }

    SUBCASE("lambda consistency: K/mu with rescaled reward equals lambda 1") {
        const auto net = flow::make_flow_network(2, 1, {8, 8}, 7);
        const int K = 6;
        const Real mu = spec.mu_A;

        // lambda * reward is equal on both sides:
        // (K/mu) * (R * mu/K) == 1 * R
        auto episode_a = make_episode(2, 0.9 * mu / static_cast<Real>(K));
        auto episode_b = make_episode(2, 0.9);
        std::vector<const env::Transition*> batch_a, batch_b;
        for (const auto& t : episode_a.transitions) batch_a.push_back(&t);
        for (const auto& t : episode_b.transitions) batch_b.push_back(&t);

        auto rng_a = make_rng(8, Stream::loss_actions);
        auto rng_b = make_rng(8, Stream::loss_actions);
        const auto result_a = training::flow_matching_loss_log(
            net, retrieval, batch_a, K, static_cast<Real>(K) / mu, 1.0, spec,
            training::TerminalOutflow::drop, rng_a);
        const auto result_b = training::flow_matching_loss_log(
            net, retrieval, batch_b, K, 1.0, 1.0, spec, training::TerminalOutflow::drop,
            rng_b);
        for (std::size_t i = 0; i < result_a.terms.squared_residual.size(); ++i) {
            CHECK(std::abs(result_a.terms.squared_residual[i] -
                           result_b.terms.squared_residual[i]) < 1e-12);
        }
    }

    SUBCASE("perfect constant flow on a toy chain is a fixed point") {
        // Two-step chain with terminal reward R. With lambda = K / mu, the
        // constant net F_log = log(R / mu) matches both residuals exactly.
        const Real reward = 0.6;
        const int K = 8;
        const auto net = constant_flow_net(std::log(reward / spec.mu_A));
        const auto episode = make_episode(2, reward);
        std::vector<const env::Transition*> batch;
        for (const auto& t : episode.transitions) batch.push_back(&t);
        auto rng = make_rng(9, Stream::loss_actions);
        const auto result = training::flow_matching_loss_log(
            net, retrieval, batch, K, static_cast<Real>(K) / spec.mu_A, 1.0, spec,
            training::TerminalOutflow::drop, rng);
        CHECK(result.terms.batch_mean < 1e-10);
        for (const auto& w : result.flow_gradients.weights) {
            CHECK(w.cwiseAbs().maxCoeff() < 1e-8);
        }
    }

    SUBCASE("non-finite flows raise an error naming the transition") {
        const auto net = constant_flow_net(1e6); // exp overflows to inf
        const auto episode = make_episode(1, 1.0);
        std::vector<const env::Transition*> batch{&episode.transitions[0]};
        auto rng = make_rng(10, Stream::loss_actions);
        CHECK_THROWS_AS(training::flow_matching_loss_log(
                            net, retrieval, batch, 2, 1.0, 1.0, spec,
                            training::TerminalOutflow::drop, rng),
                        std::runtime_error);
    }
}

TEST_CASE("pretrain_retrieval") {
    SUBCASE("zero epochs leave the network unchanged") {
        training::ReplayBuffer buffer(100);
        buffer.add(make_episode(4, 0.5));
        const auto retrieval = flow::make_retrieval_network(2, 1, {8}, 11);
        auto rng = make_rng(12, Stream::pretrain_shuffle);
        const auto result = training::pretrain_retrieval(buffer, retrieval, 0, 1e-3, 32, rng);
        for (std::size_t l = 0; l < retrieval.params.layer_count(); ++l) {
            CHECK(result.network.params.weights[l] == retrieval.params.weights[l]);
        }
    }

    SUBCASE("memorizes a single repeated transition") {
        training::ReplayBuffer buffer(100);
        for (int i = 0; i < 8; ++i) buffer.add(make_episode(1, 0.2, 3.0));
        const auto retrieval = flow::make_retrieval_network(2, 1, {8, 8}, 13);
        auto rng = make_rng(14, Stream::pretrain_shuffle);
        const auto result =
            training::pretrain_retrieval(buffer, retrieval, 400, 1e-2, 8, rng);
        CHECK(result.final_mse < 1e-6);
    }

    SUBCASE("learns the translation parent from real episodes") {
        auto environment = env::make_env("point-robot-sparse");
        const auto flow_net = constant_flow_net(0.0); // uniform behaviour policy
        training::ReplayBuffer buffer(2000);
        for (int e = 0; e < 120; ++e) {
            auto rng = make_rng(15, Stream::episode_actions, static_cast<std::uint64_t>(e));
            buffer.add(training::collect_episode(environment, flow_net, 8, rng,
                                                 training::RolloutMode::sample));
        }
        const auto retrieval = flow::make_retrieval_network(2, 1, {64, 64}, 16);
        auto rng = make_rng(17, Stream::pretrain_shuffle);
        const auto result =
            training::pretrain_retrieval(buffer, retrieval, 250, 2e-3, 128, rng);

        // Held-out check against the closed-form parent.
        std::vector<env::Trajectory> held_out;
        for (int e = 0; e < 20; ++e) {
            auto ho_rng = make_rng(18, Stream::eval_rollout, static_cast<std::uint64_t>(e));
            held_out.push_back(training::collect_episode(environment, flow_net, 8, ho_rng,
                                                         training::RolloutMode::sample));
        }
        std::vector<const env::Transition*> held_out_batch;
        for (const auto& traj : held_out) {
            for (const auto& t : traj.transitions) held_out_batch.push_back(&t);
        }
        CHECK(training::retrieval_mse(result.network, held_out_batch) < 1e-2);
    }

    SUBCASE("empty buffer is rejected") {
        training::ReplayBuffer buffer(10);
        const auto retrieval = flow::make_retrieval_network(2, 1, {8}, 19);
        auto rng = make_rng(20, Stream::pretrain_shuffle);
        CHECK_THROWS_AS(training::pretrain_retrieval(buffer, retrieval, 1, 1e-3, 8, rng),
                        std::invalid_argument);
    }
}

TEST_CASE("collect_episode") {
    auto environment = env::make_env("point-robot-sparse");

    SUBCASE("uniform flow: mean displacement per axis approaches 12 * 2/pi") {
        const auto net = constant_flow_net(0.0);
        Real sum_x = 0, sum_y = 0;
        const int episodes = 4000;
        for (int e = 0; e < episodes; ++e) {
            auto rng = make_rng(21, Stream::episode_actions, static_cast<std::uint64_t>(e));
            const auto traj = training::collect_episode(environment, net, 8, rng,
                                                        training::RolloutMode::sample);
            sum_x += traj.transitions.back().next_state[0];
            sum_y += traj.transitions.back().next_state[1];
        }
        const Real expected = 12.0 * 2.0 / std::numbers::pi_v<Real>;
        CHECK(sum_x / episodes == doctest::Approx(expected).epsilon(0.02));
        CHECK(sum_y / episodes == doctest::Approx(expected).epsilon(0.02));
    }

    SUBCASE("greedy mode is deterministic for a fixed seed") {
        const auto net = flow::make_flow_network(2, 1, {8, 8}, 23);
        auto rng1 = make_rng(24, Stream::episode_actions);
        auto rng2 = make_rng(24, Stream::episode_actions);
        const auto a = training::collect_episode(environment, net, 16, rng1,
                                                 training::RolloutMode::greedy);
        const auto b = training::collect_episode(environment, net, 16, rng2,
                                                 training::RolloutMode::greedy);
        REQUIRE(a.transitions.size() == b.transitions.size());
        for (std::size_t i = 0; i < a.transitions.size(); ++i) {
            CHECK(a.transitions[i].action[0] == b.transitions[i].action[0]);
        }
    }

    SUBCASE("episodes chain and run exactly episode_len steps") {
        const auto net = flow::make_flow_network(2, 1, {8, 8}, 25);
        auto rng = make_rng(26, Stream::episode_actions);
        const auto traj =
            training::collect_episode(environment, net, 8, rng, training::RolloutMode::sample);
        CHECK(traj.transitions.size() == 12);
        CHECK(env::trajectory_chains(traj));
        CHECK(traj.transitions.back().done);
        CHECK(traj.episode_return == doctest::Approx(traj.transitions.back().reward));
    }
}

TEST_CASE("train") {
    SUBCASE("no updates before the warm-up boundary") {
        auto config = tiny_config();
        config.total_timesteps = 120;
        config.start_training_timestep = 500;
        const auto environment = env::make_env(config.env_id);
        const auto result = training::train(config, environment);
        CHECK_FALSE(result.aborted);
        CHECK(result.update_losses.empty());
        CHECK_FALSE(result.log.records.empty());
        for (const auto& rec : result.log.records) CHECK(std::isnan(rec.loss));
    }

    SUBCASE("fixed seed gives a bit-identical run") {
        const auto config = tiny_config();
        const auto environment = env::make_env(config.env_id);
        const auto a = training::train(config, environment);
        const auto b = training::train(config, environment);
        REQUIRE_FALSE(a.aborted);
        REQUIRE(a.update_losses.size() == b.update_losses.size());
        for (std::size_t i = 0; i < a.update_losses.size(); ++i) {
            CHECK(a.update_losses[i].loss == b.update_losses[i].loss);
        }
        REQUIRE(a.log.records.size() == b.log.records.size());
        for (std::size_t i = 1; i < a.log.records.size(); ++i) {
            CHECK(a.log.records[i].timestep > a.log.records[i - 1].timestep);
        }

        std::ostringstream csv_a, csv_b;
        {
            const std::string pa = "train_log_a.csv", pb = "train_log_b.csv";
            training::write_training_log_csv(pa, a.log);
            training::write_training_log_csv(pb, b.log);
            std::ifstream fa(pa), fb(pb);
            csv_a << fa.rdbuf();
            csv_b << fb.rdbuf();
            std::remove(pa.c_str());
            std::remove(pb.c_str());
        }
        CHECK(csv_a.str() == csv_b.str());
    }

    SUBCASE("worker count is part of the deterministic configuration") {
        auto config = tiny_config();
        config.workers = 2;
        config.total_timesteps = 480;
        const auto environment = env::make_env(config.env_id);
        const auto a = training::train(config, environment);
        const auto b = training::train(config, environment);
        REQUIRE_FALSE(a.aborted);
        REQUIRE(a.update_losses.size() == b.update_losses.size());
        for (std::size_t i = 0; i < a.update_losses.size(); ++i) {
            CHECK(a.update_losses[i].loss == b.update_losses[i].loss);
        }
    }

    SUBCASE("one update per post-warm-up step") {
        const auto config = tiny_config();
        const auto environment = env::make_env(config.env_id);
        const auto result = training::train(config, environment);
        REQUIRE_FALSE(result.aborted);
        CHECK(static_cast<long>(result.update_losses.size()) ==
              config.total_timesteps - config.start_training_timestep);
        // Timesteps attached to updates are non-decreasing and within range.
        long last = 0;
        for (const auto& u : result.update_losses) {
            CHECK(u.timestep >= last);
            CHECK(u.timestep <= config.total_timesteps);
            last = u.timestep;
        }
    }

    SUBCASE("invalid configuration is rejected with the field name") {
        auto config = tiny_config();
        config.total_timesteps = 0;
        const auto environment = env::make_env("point-robot-sparse");
        CHECK_THROWS_WITH_AS(training::train(config, environment),
                             "total_timesteps: must be >= 1", std::invalid_argument);
    }
}
