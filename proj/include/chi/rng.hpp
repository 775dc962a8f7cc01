#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>

namespace chi {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

// Mixes an auxiliary value (factor index, seed offset) into a seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    return detail::splitmix64(seed ^ detail::splitmix64(salt));
}

// Named counter-based random stream: draw i of stream (seed, name) is a pure
// function of (seed, name, i), so replay and checkpoint restore are exact.
class RngStream {
public:
    RngStream() = default;

    RngStream(std::uint64_t seed, std::string_view name)
        : key_(detail::splitmix64(seed ^ detail::fnv1a(name))) {}

    std::uint64_t next_u64() { return detail::splitmix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

    // Uniform in [0, 1) with 53-bit resolution.
    double next_uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

    // Box-Muller; consumes two draws. Avoids std::normal_distribution so the
    // byte stream does not depend on the standard library implementation.
    double next_gaussian() {
        double u1 = next_uniform();
        double u2 = next_uniform();
        if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Uniform integer in [0, n) via 128-bit multiply (no modulo bias worth
    // caring about at 64 bits).
    std::uint64_t next_below(std::uint64_t n) {
        return std::uint64_t((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    std::uint64_t counter() const { return counter_; }
    void set_counter(std::uint64_t c) { counter_ = c; }

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace chi
