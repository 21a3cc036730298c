#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace proctrain {

// splitmix64 finalizer; used to mix seeds and derive per-stream seeds.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t seed, uint64_t v) {
    return mix64(seed ^ mix64(v));
}

inline uint64_t hash_str(uint64_t seed, std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return hash_combine(seed, h);
}

// Deterministic RNG: the engine is std::mt19937_64 (fully specified by the
// standard, so streams are reproducible across platforms); the distributions
// are implemented here because the standard leaves theirs unspecified.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // [0, n)
    int64_t uniform_int(int64_t n) {
        return static_cast<int64_t>(
            (static_cast<unsigned __int128>(next_u64()) * static_cast<uint64_t>(n)) >> 64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller, one value per call (no cached spare: keeps the stream a
    // pure function of the call sequence).
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(2.0 * M_PI * u2);
    }

    float normal_f(float mean, float stddev) {
        return static_cast<float>(normal(mean, stddev));
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace proctrain
