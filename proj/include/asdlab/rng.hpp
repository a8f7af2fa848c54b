#pragma once

#include <cmath>
#include <cstdint>

namespace asdlab {

// Deterministic 64-bit generator (splitmix64). std::uniform_real_distribution
// is implementation-defined, so seed-replay byte equality requires owning the
// whole sampling path.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double u01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

    /// Standard normal via Box-Muller. No cached spare value, so the
    /// consumed-stream length is exactly two draws per call.
    double normal() {
        double u1 = u01();
        while (u1 <= 0.0) u1 = u01();
        const double u2 = u01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Integer in [0, n). n must be > 0 and far below 2^64 (modulo bias is
    /// negligible for the range sizes used here).
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    bool bernoulli(double p) { return u01() < p; }

    /// Derives a substream seed, e.g. one per scene, so generation order
    /// cannot affect per-item streams.
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
        Rng r(seed ^ (0xD1B54A32D192ED03ull * (stream + 1)));
        r.next_u64();
        return r.next_u64();
    }

private:
    std::uint64_t state_;
};

} // namespace asdlab
