#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace biembed {

// Deterministic random source. std::mt19937_64 is fully specified by the
// standard, but the std:: distributions are not, so we implement our own
// draws on top of the raw engine. Identical seeds give identical streams
// on every platform, which the reproducibility contract depends on.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of randomness.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection-free modulo is fine here; the
    // bias for n << 2^64 is far below anything our tests can observe, and
    // the draw stays deterministic.
    std::uint64_t uniform_index(std::uint64_t n) {
        return n == 0 ? 0 : engine_() % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller, one value per call (the spare is discarded to keep the
    // stream position easy to reason about).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stdev) { return mean + stdev * normal(); }

    // Weighted categorical draw over non-negative weights.
    std::size_t categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double r = uniform() * total;
        double acc = 0.0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            if (r < acc) return i;
        }
        return weights.empty() ? 0 : weights.size() - 1;
    }

    // In-place Fisher-Yates shuffle.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent child stream; used to give each pipeline
    // component its own seed from one master seed.
    Rng fork(std::uint64_t salt) {
        return Rng(mix(engine_() ^ (0x9e3779b97f4a7c15ULL * (salt + 1))));
    }

    static std::uint64_t mix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

private:
    std::mt19937_64 engine_;
};

// 64-bit FNV-1a; stable string hashing for shingles and LSH buckets.
inline std::uint64_t fnv1a64(const void* data, std::size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

}  // namespace biembed
