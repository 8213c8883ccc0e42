#pragma once

#include <cstdint>
#include <random>

namespace slode {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Purposes for derived streams, so that e.g. data noise and inference noise for the same
/// series never share draws.
enum class StreamTag : std::uint64_t {
    series = 1,
    split = 2,
    init = 3,
    shuffle = 4,
    train_noise = 5,
    val_noise = 6,
    inference = 7,
    prior = 8,
    eval_noise = 9,
};

/// Independent generator for (seed, tag, id).
inline std::mt19937_64 derive_stream(std::uint64_t seed, StreamTag tag, std::uint64_t id = 0) {
    std::uint64_t h = splitmix64(seed);
    h = splitmix64(h ^ static_cast<std::uint64_t>(tag));
    h = splitmix64(h ^ id);
    return std::mt19937_64(h);
}

} // namespace slode
