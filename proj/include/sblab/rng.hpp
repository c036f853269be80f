#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace sblab {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seeded generator owned by exactly one run or sampling stream.
/// Gaussian draws use Box-Muller on top of mt19937_64 so the byte stream
/// does not depend on the standard library's distribution implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : root_(seed), eng_(splitmix64(seed)) {}

    /// Independent child stream; children with distinct ids never collide.
    Rng child(std::uint64_t stream) const {
        return Rng(splitmix64(root_ ^ (0x9e3779b97f4a7c15ULL * (stream + 1))));
    }

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform on (0,1), never exactly 0.
    double uniform01() {
        const double u = (next_u64() >> 11) * 0x1.0p-53;
        return u > 0.0 ? u : 0x1.0p-53;
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

private:
    std::uint64_t root_;
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace sblab
