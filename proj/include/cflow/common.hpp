#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace cflow {

// All numerics run in doubles by default; -DCFLOW_REAL_FLOAT switches the
// whole library to single precision as a speed option.
#ifdef CFLOW_REAL_FLOAT
using Real = float;
#else
using Real = double;
#endif

inline constexpr const char* kVersion = "0.1.0";

// splitmix64 finalizer; used to derive independent stream seeds from one
// master seed so a single integer reproduces a whole run.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Stream ids are small constants (see below); worker/round streams fold the
// extra indices in by repeated mixing.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream_id) {
    return mix_seed(master ^ mix_seed(stream_id));
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream_id,
                                 std::uint64_t sub_id) {
    return mix_seed(derive_seed(master, stream_id) ^ mix_seed(sub_id + 0x51ed270b0a1ULL));
}

// Fixed stream ids. Every RNG consumer in the project draws from its own
// stream so reordering one consumer never perturbs another.
enum class Stream : std::uint64_t {
    flow_init = 1,
    retrieval_init = 2,
    episode_actions = 3,
    loss_actions = 4,
    minibatch = 5,
    eval_rollout = 6,
    analysis = 7,
    pretrain_shuffle = 8,
};

inline std::mt19937_64 make_rng(std::uint64_t master, Stream stream,
                                std::uint64_t sub_id = 0) {
    return std::mt19937_64(
        derive_seed(master, static_cast<std::uint64_t>(stream), sub_id));
}

} // namespace cflow
