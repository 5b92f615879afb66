#pragma once

#include <cmath>
#include <cstdint>

namespace poguise {

// Deterministic splitmix64 stream. Used everywhere instead of std::
// distributions so that runs are bit-reproducible across library versions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
    }

    // Box-Muller, one value per call (no cached pair, keeps replay trivial).
    double normal() {
        double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.28318530717958647692 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::uint64_t state_;
};

// Derives an independent per-item stream from a master seed (splitmix-style
// mixing), so items can be generated in any order with identical results.
inline Rng derive_rng(std::uint64_t master_seed, std::uint64_t stream) {
    Rng mixer(master_seed ^ (0xD1B54A32D192ED03ULL * (stream + 1)));
    return Rng(mixer.next_u64());
}

} // namespace poguise
