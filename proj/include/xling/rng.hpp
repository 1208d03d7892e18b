#pragma once

#include <cstdint>
#include <vector>

namespace xling {

// SplitMix64 output function. Also used as a counter-based generator for
// dropout masks: mix64(seed + counter) gives a reproducible stream that can
// be regenerated in the backward pass without storing the mask.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Deterministic sequential generator. std::mt19937 is avoided on purpose:
// the standard distributions are implementation-defined, and bit-identical
// runs are part of the contract.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return mix64(state_++); }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform integer in [0, n). Multiply-shift map; bias is < 2^-53 for the
    // small n used here.
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent stream derived from this generator's seed, without
    // advancing it. Used so per-epoch randomness does not depend on how many
    // draws earlier epochs consumed.
    Rng derive(std::uint64_t stream) const {
        return Rng(mix64(state_ ^ (stream * 0xD1B54A32D192ED03ULL + 1)));
    }

private:
    std::uint64_t state_;
};

// One dropout-mask bit from a counter-based stream: true means "keep".
inline bool dropout_keep(std::uint64_t seed, std::uint64_t counter, double rate) {
    return static_cast<double>(mix64(seed + counter) >> 11) * 0x1.0p-53 >= rate;
}

}  // namespace xling
