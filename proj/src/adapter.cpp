#include "bratlab/adapter.hpp"

#include <cmath>

namespace bratlab {

AdapterMap::AdapterMap(int in_width, int out_width, std::uint64_t seed)
    : in_width_(in_width), out_width_(out_width) {
    if (in_width <= 0 || out_width <= 0) throw LabError("adapter widths must be positive");
    Tensor w = Tensor::zeros({out_width, in_width});
    if (in_width == out_width) {
        for (int i = 0; i < in_width; ++i)
            w.raw()[static_cast<std::size_t>(i * in_width + i)] = 1.0f;
    } else {
        Rng rng(seed);
        w = randn_init(rng, {out_width, in_width},
                       1.0f / std::sqrt(static_cast<float>(in_width)));
    }
    params_.add("w", std::move(w));
    params_.add("b", Tensor::zeros({out_width}));
}

Tensor AdapterMap::adapt(const Tensor& embs, TrainCtx* ctx) {
    if (embs.rank() != 2 || embs.dim(1) != in_width_)
        throw LabError("adapter expects [N, " + std::to_string(in_width_) + "] input, got " +
                       shape_str(embs.shape()));
    if (frozen_ && ctx) throw LabError("adapter is frozen; cannot bind its parameters");
    auto param = [&](const char* nm) -> Tensor {
        return ctx ? ctx->bind(params_[nm]) : params_.at(nm);
    };
    Tensor w = param("w");
    Tensor b = param("b");
    return linear(embs, w, b);
}

Encoding AdapterMap::adapt(const Encoding& enc, TrainCtx* ctx) {
    Encoding out;
    out.emb = adapt(enc.emb, ctx);
    out.mask = enc.mask;
    return out;
}

AdapterMap train_adapter(const std::vector<std::string>& prompts, TextEncoder& enc_a,
                         TextEncoder& enc_b, int steps, std::uint64_t seed) {
    if (prompts.empty()) throw LabError("train_adapter: empty prompt set");
    if (!enc_a.frozen() || !enc_b.frozen())
        throw LabError("train_adapter: both encoders must be frozen");

    AdapterMap adapter(enc_a.width(), enc_b.width(), seed);
    if (steps <= 0) return adapter;

    std::vector<Tensor> src, dst;
    src.reserve(prompts.size());
    for (const auto& p : prompts) {
        src.push_back(enc_a.encode_prompt(p).emb);
        dst.push_back(enc_b.encode_prompt(p).emb);
    }

    Adam opt(adapter.params().all(), 1e-2f);
    Rng rng(seed + 1);
    for (int step = 0; step < steps; ++step) {
        auto i = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(src.size())));
        Tape tape;
        TrainCtx ctx(tape);
        Tensor pred = adapter.adapt(src[i], &ctx);
        GradMap grads = tape.backward(mse(pred, dst[i]));
        opt.step(aligned_grads(adapter.params(), ctx, grads));
    }
    return adapter;
}

}  // namespace bratlab
