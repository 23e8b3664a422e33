// Seeded random stream with explicitly coded draws. The mt19937_64 core is
// pinned bit-exactly by the standard; distributions are hand-rolled here so
// a seed reproduces the same stream on any toolchain.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "ots/matrix.hpp"

namespace ots {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller, one spare cached.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Uniform integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[static_cast<std::size_t>(below(i))]);
        }
    }

    Matrix uniform_matrix(index_t rows, index_t cols, double lo, double hi) {
        Matrix m(rows, cols);
        for (index_t i = 0; i < m.size(); ++i) m.data()[i] = uniform(lo, hi);
        return m;
    }

    Matrix gaussian_matrix(index_t rows, index_t cols, double sigma = 1.0) {
        Matrix m(rows, cols);
        for (index_t i = 0; i < m.size(); ++i) m.data()[i] = sigma * gaussian();
        return m;
    }

    // Uniform in +-sqrt(6 / (fan_in + fan_out)), the usual fan-based range
    // for a linear map of the given shape.
    Matrix glorot_matrix(index_t rows, index_t cols, index_t fan_in, index_t fan_out) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        return uniform_matrix(rows, cols, -bound, bound);
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace ots
