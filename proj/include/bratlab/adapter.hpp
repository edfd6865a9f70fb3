#pragma once

#include <string>
#include <vector>

#include "bratlab/nn.hpp"
#include "bratlab/textstack.hpp"

namespace bratlab {

// Per-token affine bridge from encoder A's space into encoder B's
// conditioning space. Square maps start at the identity.
class AdapterMap {
public:
    AdapterMap(int in_width, int out_width, std::uint64_t seed);

    // [N, in_width] -> [N, out_width]; differentiable through the input.
    Tensor adapt(const Tensor& embs, TrainCtx* ctx = nullptr);
    Encoding adapt(const Encoding& enc, TrainCtx* ctx = nullptr);

    int in_width() const { return in_width_; }
    int out_width() const { return out_width_; }

    ParamStore& params() { return params_; }
    std::uint64_t checksum() const { return params_.checksum(); }

    void set_frozen(bool f) { frozen_ = f; }
    bool frozen() const { return frozen_; }

private:
    int in_width_, out_width_;
    bool frozen_ = false;
    ParamStore params_;
};

// Regresses adapt(encA(p)) onto encB(p) over the prompt list (MSE, Adam).
// Both encoders must already be frozen; only the adapter moves.
AdapterMap train_adapter(const std::vector<std::string>& prompts, TextEncoder& enc_a,
                         TextEncoder& enc_b, int steps, std::uint64_t seed = 0);

}  // namespace bratlab
