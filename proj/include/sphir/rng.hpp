#pragma once

#include <cstdint>
#include <string_view>

namespace sphir {

/// Deterministic counter-free PRNG (splitmix64 core) with in-house uniform
/// and normal draws, so sequences are bit-reproducible independent of the
/// standard library's distribution implementations. Named streams derive
/// independent sequences from one run seed, which keeps every consumer's
/// randomness position-independent (required for exact mid-run resume).
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    static Rng stream(uint64_t seed, std::string_view name, uint64_t index = 0);

    uint64_t next_u64();
    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);
    int uniform_int(int lo, int hi);        // inclusive bounds
    double normal();                        // standard normal, Box-Muller
    double normal(double mean, double sigma) { return mean + sigma * normal(); }

private:
    uint64_t state_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

uint64_t fnv1a64(std::string_view bytes);

}  // namespace sphir
