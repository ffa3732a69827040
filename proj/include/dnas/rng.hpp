#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <utility>

namespace dnas {

/// Counter-based generator: the n-th output is a pure function of (seed, n),
/// so streams are reproducible on every platform and compiler. Distributions
/// are implemented here rather than taken from <random> because the standard
/// distributions are not specified bit-exactly across library vendors.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0) noexcept
        : key_(mix(seed ^ mix(stream + 0x632be59bd9b4e019ULL))) {}

    std::uint64_t next_u64() noexcept { return mix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    std::uint64_t below(std::uint64_t n) noexcept {
        if (n <= 1) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    /// Standard normal via Box-Muller (one value per call, no cached spare).
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Gumbel(0, 1) by the inverse-CDF double-log transform, u clamped to [eps, 1 - eps].
    double gumbel(double eps = 1e-12) noexcept {
        double u = uniform();
        if (u < eps) u = eps;
        if (u > 1.0 - eps) u = 1.0 - eps;
        return -std::log(-std::log(u));
    }

    template <class T>
    void shuffle(std::span<T> items) noexcept {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    /// Independent child stream, e.g. one per epoch or per architecture.
    [[nodiscard]] Rng fork(std::uint64_t stream) const noexcept {
        Rng r;
        r.key_ = mix(key_ ^ mix(stream * 0xbf58476d1ce4e5b9ULL + 1));
        return r;
    }

private:
    static std::uint64_t mix(std::uint64_t z) noexcept {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

} // namespace dnas
