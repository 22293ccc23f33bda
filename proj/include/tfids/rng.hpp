#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace tfids {

// Single seeded generator behind every random draw in the toolkit.
// Draw order at each call site is fixed, so a run is reproducible from
// (seed, input) alone.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    float uniform01() {
        return std::uniform_real_distribution<float>(0.0f, 1.0f)(engine_);
    }

    float uniform(float lo, float hi) {
        return std::uniform_real_distribution<float>(lo, hi)(engine_);
    }

    // Standard normal. The distribution object is a member so its cached
    // spare value survives between calls.
    float normal() { return normal_(engine_); }

    bool bernoulli(float p) { return uniform01() < p; }

    // Inclusive bounds.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        std::shuffle(v.begin(), v.end(), engine_);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<float> normal_{0.0f, 1.0f};
};

} // namespace tfids
