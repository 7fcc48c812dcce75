#pragma once

// Deterministic random streams. Every random choice in the library draws from
// a named stream derived from (seed, stream name, salt words), so results are
// reproducible bit for bit regardless of call order elsewhere. Distributions
// are hand-rolled: the C++ standard leaves <random> distributions
// implementation-defined, which would tie outputs to a libstdc++ version.

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace flexchill {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

// xoshiro256** seeded through splitmix64. Never produces an all-zero state.
class Rng {
public:
    using result_type = std::uint64_t;

    Rng(std::uint64_t seed, std::string_view stream,
        std::uint64_t salt_a = 0, std::uint64_t salt_b = 0,
        std::uint64_t salt_c = 0) {
        std::uint64_t mix = seed;
        mix ^= fnv1a64(stream) + 0x9E3779B97F4A7C15ull + (mix << 6) + (mix >> 2);
        mix ^= salt_a + 0x9E3779B97F4A7C15ull + (mix << 6) + (mix >> 2);
        mix ^= salt_b + 0x9E3779B97F4A7C15ull + (mix << 6) + (mix >> 2);
        mix ^= salt_c + 0x9E3779B97F4A7C15ull + (mix << 6) + (mix >> 2);
        for (auto& w : s_) w = splitmix64(mix);
    }

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return ~0ull; }

    result_type operator()() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }
    std::array<std::uint64_t, 4> s_{};
};

// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform in [lo, hi).
inline double uniform(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform01(rng);
}

// Unbiased integer in [0, n) by rejection.
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_below: n must be positive");
    const std::uint64_t limit = ~0ull - (~0ull % n + 1) % n;
    std::uint64_t x;
    do {
        x = rng();
    } while (x > limit);
    return x % n;
}

// Standard normal via Box-Muller; spare value cached by the caller if needed.
inline double normal(Rng& rng) {
    double u1;
    do {
        u1 = uniform01(rng);
    } while (u1 <= 0.0);
    const double u2 = uniform01(rng);
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
}

// Marsaglia-Tsang gamma sampler; the alpha < 1 case boosts through alpha + 1.
inline double gamma_sample(Rng& rng, double alpha) {
    if (!(alpha > 0.0)) throw std::invalid_argument("gamma_sample: alpha must be positive");
    if (alpha < 1.0) {
        double u;
        do {
            u = uniform01(rng);
        } while (u <= 0.0);
        return gamma_sample(rng, alpha + 1.0) * std::pow(u, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = normal(rng);
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = uniform01(rng);
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

inline std::vector<double> dirichlet(Rng& rng, double alpha, std::size_t k) {
    if (k == 0) throw std::invalid_argument("dirichlet: k must be positive");
    std::vector<double> p(k);
    double total = 0.0;
    for (auto& v : p) {
        v = gamma_sample(rng, alpha);
        total += v;
    }
    if (total <= 0.0) {
        for (auto& v : p) v = 1.0 / static_cast<double>(k);
        return p;
    }
    for (auto& v : p) v /= total;
    return p;
}

// Fisher-Yates with our own index draws, so permutations are stable across
// standard-library releases.
template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
    if (items.size() < 2) return;
    for (std::size_t i = items.size() - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(uniform_below(rng, i + 1));
        std::swap(items[i], items[j]);
    }
}

}  // namespace flexchill
