#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace ibattr {

// SplitMix64: a 64-bit counter-based generator (Steele, Lea & Flood 2014).
// The state advances by a fixed odd constant, so each output is a pure mix
// of `seed + n*gamma`; identical sequences on every platform.
//
// Streams: `child(seed, tag)` derives an independent stream per tag (one per
// sample id, per training run, per attribution run, ...), which keeps
// generation order-independent and safe to fan out across workers.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1), 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; two fresh uniforms per draw.
    double normal() {
        double u1 = uniform();
        if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;  // log(0) guard
        const double u2 = uniform();
        const double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Uniform integer in [0, n) via the multiply-shift reduction.
    std::uint64_t next_below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Independent child stream for (seed, tag). FNV-1a over the tag, then one
    // extra scramble round so nearby seeds do not produce nearby streams.
    static SplitMix64 child(std::uint64_t seed, std::string_view tag) {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const char c : tag) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        SplitMix64 mix(seed ^ (h * 0x9E3779B97F4A7C15ull));
        return SplitMix64(mix.next_u64());
    }

private:
    std::uint64_t state_;
};

}  // namespace ibattr
