#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "bratlab/util.hpp"

namespace bratlab {

// Deterministic RNG. mt19937_64 output is pinned by the standard; the
// distributions below are implemented here (std:: distributions are not
// portable across library versions).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    float uniform(float lo, float hi) {
        return lo + static_cast<float>(uniform()) * (hi - lo);
    }

    // [0, n)
    int uniform_int(int n) {
        return static_cast<int>(uniform() * static_cast<double>(n)) % n;
    }

    // Box-Muller with a cached spare.
    float normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586 * u2;
        spare_ = static_cast<float>(r * std::sin(a));
        have_spare_ = true;
        return static_cast<float>(r * std::cos(a));
    }

    std::vector<float> normal_vec(std::size_t n, float stddev = 1.0f) {
        std::vector<float> out(n);
        for (auto& v : out) v = normal() * stddev;
        return out;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[static_cast<std::size_t>(uniform_int(static_cast<int>(i)))]);
        }
    }

    // Independent substream, stable under the label.
    Rng fork(std::string_view label) {
        std::uint64_t h = fnv1a(label.data(), label.size(), eng_());
        return Rng(h);
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    float spare_ = 0.0f;
};

}  // namespace bratlab
