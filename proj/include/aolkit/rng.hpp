#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace aol {

/// Deterministic random stream. Distributions are hand-rolled on top of
/// mt19937_64 so results do not depend on the standard library vendor.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Uniform integer in [0, n).
    int uniform_int(int n) {
        return static_cast<int>(uniform() * n) % n;
    }

    std::uint64_t raw() { return eng_(); }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace aol
