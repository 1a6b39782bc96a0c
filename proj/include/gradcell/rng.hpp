#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace gradcell::ad {

namespace detail {

// Stafford mix 13 variant of the splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace detail

// Counter-based random stream: every draw is a pure function of
// (seed, stream_id, counter). Replaying the same triple yields identical
// values, which is what lets a mini-batch recomputation reproduce the
// dropout masks of an earlier no-grad pass.
struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;
    std::uint64_t counter = 0;

    std::uint64_t next_u64() {
        std::uint64_t z = detail::mix64(seed + 0x9e3779b97f4a7c15ULL);
        z = detail::mix64(z ^ detail::mix64(stream_id + 0x7f4a7c159e3779b9ULL));
        z = detail::mix64(z + counter);
        ++counter;
        return z;
    }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; consumes two counters.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }
};

// Derives a child stream id from a tag and up to four indices, so callers can
// key masks by (epoch, batch, sample, layer, pass) without bookkeeping.
inline std::uint64_t substream(std::uint64_t base, std::uint64_t tag, std::uint64_t a = 0,
                               std::uint64_t b = 0, std::uint64_t c = 0, std::uint64_t d = 0) {
    using detail::mix64;
    std::uint64_t h = mix64(base ^ 0xa0761d6478bd642fULL);
    h = mix64(h + mix64(tag + 0xe7037ed1a0b428dbULL));
    h = mix64(h + mix64(a + 0x8ebc6af09c88c6e3ULL));
    h = mix64(h + mix64(b + 0x589965cc75374cc3ULL));
    h = mix64(h + mix64(c + 0x1d8e4e27c47d124fULL));
    h = mix64(h + mix64(d + 0xeb44accab455d165ULL));
    return h;
}

// Stream tags used across the trainer. Values are arbitrary but stable:
// they are part of what makes a training run reproducible from its seed.
namespace stream_tag {
inline constexpr std::uint64_t init = 1;        // parameter initialization
inline constexpr std::uint64_t dropout = 2;     // dropout masks inside encode
inline constexpr std::uint64_t favor = 3;       // FAVOR+ feature draws
inline constexpr std::uint64_t mlm_mask = 4;    // masked-position selection
inline constexpr std::uint64_t data = 5;        // synthetic data generation
inline constexpr std::uint64_t encode = 6;      // per (step, sample, pass) base
inline constexpr std::uint64_t split = 7;       // dataset splits
}  // namespace stream_tag

}  // namespace gradcell::ad
