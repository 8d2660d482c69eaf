#pragma once

#include <cmath>
#include <cstdint>

#include "ptycho/common.hpp"

namespace ptycho {

// Counter-based deterministic generator (SplitMix64). The i-th draw is a pure
// function of (seed, i), so equal seeds give equal streams on every platform.
// Child generators for parallel work are derived by hashing (seed, stream).
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : seed_(seed), counter_(0) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1]; safe as a log() argument.
    double uniform_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    // Standard normal via Box-Muller; consumes two draws per call.
    double gaussian() {
        const double u1 = uniform_pos();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
    }

    // Poisson sample with mean lambda. Knuth's product method below the
    // cutover, Hormann's PTRS transformed rejection above it.
    std::uint64_t poisson(double lambda) {
        if (lambda < 0.0 || !std::isfinite(lambda))
            throw DomainError("poisson mean must be finite and nonnegative, got " + std::to_string(lambda));
        if (lambda == 0.0) return 0;
        if (lambda < 30.0) return poisson_knuth(lambda);
        return poisson_ptrs(lambda);
    }

    // Deterministic child stream: child i of a child j differs from child j
    // of a child i because the mix is order-sensitive in (seed, index).
    Rng child(std::uint64_t stream_index) const {
        std::uint64_t z = seed_ ^ (0xD1B54A32D192ED03ULL + stream_index * 0x2545F4914F6CDD1DULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return Rng(z ^ (z >> 31));
    }

  private:
    std::uint64_t poisson_knuth(double lambda) {
        const double limit = std::exp(-lambda);
        std::uint64_t k = 0;
        double p = 1.0;
        do {
            ++k;
            p *= uniform_pos();
        } while (p > limit);
        return k - 1;
    }

    std::uint64_t poisson_ptrs(double lambda) {
        // W. Hormann, "The transformed rejection method for generating Poisson
        // random variables" (PTRS), valid for lambda >= 10.
        const double slam = std::sqrt(lambda);
        const double loglam = std::log(lambda);
        const double b = 0.931 + 2.53 * slam;
        const double a = -0.059 + 0.02483 * b;
        const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        const double vr = 0.9277 - 3.6224 / (b - 2.0);
        for (;;) {
            const double u = uniform() - 0.5;
            const double v = uniform_pos();
            const double us = 0.5 - std::abs(u);
            const double kf = std::floor((2.0 * a / us + b) * u + lambda + 0.43);
            if (us >= 0.07 && v <= vr) return static_cast<std::uint64_t>(kf);
            if (kf < 0.0 || (us < 0.013 && v > us)) continue;
            if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
                kf * loglam - lambda - std::lgamma(kf + 1.0))
                return static_cast<std::uint64_t>(kf);
        }
    }

    std::uint64_t seed_;
    std::uint64_t counter_;
};

}  // namespace ptycho
