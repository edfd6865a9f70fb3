#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bratlab/tensor.hpp"

namespace bratlab {

struct GradCheckResult {
    std::string op;
    int instances = 0;
    float max_rel_err = 0.0f;
    bool pass = false;
};

// Builds a scalar loss from leaves created on the given tape. The leaves
// mirror `params` in order and shape.
using LossBuilder = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

// Compares reverse-mode gradients of fn against central finite differences
// over every element of every param. Returns the max relative error, where
// rel = |ad - fd| / max(|ad|, |fd|, 1).
float max_fd_rel_err(const std::vector<Tensor>& params, const LossBuilder& fn, float eps = 1e-3f);

// Randomized finite-difference suite covering every differentiable op plus a
// composite 3-layer MLP. Deterministic for a fixed seed.
std::vector<GradCheckResult> run_gradcheck(int instances_per_op, std::uint64_t seed,
                                           float tol = 1e-3f);

// Confirms the harness actually detects a broken gradient (a deliberately
// mis-scaled backward must produce a large relative error).
bool gradcheck_selftest();

}  // namespace bratlab
