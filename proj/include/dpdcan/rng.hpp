#pragma once

#include <cstdint>
#include <random>

namespace dpdcan {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// One seedable random stream. The trainer owns four independent streams
// (init / data order / noise / augmentation); which stream a draw comes from
// is part of the reproducibility contract, so every consumer takes an
// explicit RngStream rather than sharing a global engine.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed, std::uint64_t salt = 0)
        : eng_(splitmix64(seed ^ splitmix64(salt))) {}

    // Uniform on [0, 1).
    double uniform() { return (eng_() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    // Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    // Standard normal, Box-Muller with one cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double gamma(double shape, double scale) {
        std::gamma_distribution<double> d(shape, scale);
        return d(eng_);
    }

    long poisson(double mean) {
        std::poisson_distribution<long> d(mean);
        return d(eng_);
    }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace dpdcan
