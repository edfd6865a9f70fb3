#pragma once

#include <cmath>
#include <vector>

#include "bratlab/tensor.hpp"

namespace testutil {

inline bool near(float a, float b, float tol) { return std::fabs(a - b) <= tol; }

inline float max_abs(const bratlab::Tensor& t) {
    float m = 0.0f;
    for (std::size_t i = 0; i < t.numel(); ++i) m = std::max(m, std::fabs(t.at(i)));
    return m;
}

inline float max_abs_diff(const bratlab::Tensor& a, const bratlab::Tensor& b) {
    float m = 0.0f;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.at(i) - b.at(i)));
    return m;
}

}  // namespace testutil
