#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace clipcap {

// 64-bit FNV-1a. Used for seed derivation and file digests.
constexpr std::uint64_t fnv1a64(std::string_view data,
                                std::uint64_t hash = 0xcbf29ce484222325ULL) noexcept {
    for (unsigned char c : data) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

// Explicit random stream. Every consumer receives one of these by reference;
// nothing in the library touches global random state.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Independent stream for a named consumer. Changing the name or the root
    // seed of one stage never perturbs another stage's stream.
    static Rng substream(std::uint64_t root_seed, std::string_view name) {
        std::uint64_t h = fnv1a64(name, 0xcbf29ce484222325ULL ^ (root_seed * 0x9e3779b97f4a7c15ULL));
        return Rng(h);
    }

    // Inclusive on both ends, like Python's random.randint.
    std::int64_t randint(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }

    std::uint64_t next_u64() { return engine_(); }

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace clipcap
