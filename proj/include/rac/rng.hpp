#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>

namespace rac {

// Deterministic random source. Wraps mt19937_64 but implements all
// distributions by hand so every draw consumes a documented number of raw
// values: uniform and bernoulli take one, normal takes two, below() takes
// one per rejection round. This keeps generation streams replayable and
// independent of standard-library distribution internals.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform double in [0, 1).
    double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; always consumes two uniforms.
    double next_normal() {
        double u1 = 1.0 - next_uniform();  // (0, 1], keeps log finite
        double u2 = next_uniform();
        constexpr double kTwoPi = 6.283185307179586476925287;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
    }

    bool bernoulli(double p) { return next_uniform() < p; }

    // Unbiased integer in [0, n) by rejection.
    uint64_t below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        uint64_t x, r;
        do {
            x = next_u64();
            r = x % n;
        } while (x - r > uint64_t(0) - n);
        return r;
    }

    // Inverse-CDF draw over a probability vector, walking indices in
    // ascending order. Falls back to the last positive entry if rounding
    // pushes the cumulative sum below the drawn uniform.
    size_t categorical(std::span<const double> probs) {
        if (probs.empty()) throw std::invalid_argument("Rng::categorical: empty distribution");
        double u = next_uniform();
        double cum = 0.0;
        size_t last_positive = probs.size();
        for (size_t i = 0; i < probs.size(); ++i) {
            if (probs[i] <= 0.0) continue;
            last_positive = i;
            cum += probs[i];
            if (u < cum) return i;
        }
        if (last_positive == probs.size())
            throw std::invalid_argument("Rng::categorical: no positive mass");
        return last_positive;
    }

  private:
    std::mt19937_64 engine_;
};

}  // namespace rac
