#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace lg {

constexpr uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 1099511628211ull;
    }
    return h;
}

// Derives a per-stage seed from the run seed so stages can be rerun in
// isolation: stage_seed = splitmix64(run_seed ^ fnv1a64(stage_name)).
inline uint64_t derive_seed(uint64_t base, std::string_view stage) {
    uint64_t x = base ^ fnv1a64(stage);
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// mt19937_64 engine with hand-rolled distributions. The engine's output
// sequence is pinned by the standard, and rolling the distributions ourselves
// keeps results identical across standard library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform in [0, n). Rejection sampling, unbiased.
    size_t index(size_t n) {
        const uint64_t m = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % m;
        uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return static_cast<size_t>(x % m);
    }

    // Uniform integer in [lo, hi], inclusive.
    int64_t range(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(index(static_cast<size_t>(hi - lo + 1)));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; one spare cached per pair.
    double normal(double mean = 0.0, double sd = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + sd * spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return mean + sd * r * std::cos(theta);
    }

    // Normal rejected until |x - mean| <= cap * sd.
    double truncated_normal(double mean, double sd, double cap) {
        if (sd <= 0.0) return mean;
        double x;
        do {
            x = normal(mean, sd);
        } while (std::abs(x - mean) > cap * sd);
        return x;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[index(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace lg
