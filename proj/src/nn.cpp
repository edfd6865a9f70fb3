#include "bratlab/nn.hpp"

#include <cmath>
#include <cstring>
#include <unordered_map>

namespace bratlab {

Tensor& ParamStore::add(const std::string& name, Tensor init) {
    if (has(name)) throw LabError("duplicate parameter '" + name + "'");
    if (init.taped()) throw LabError("parameter '" + name + "' must be untaped");
    params_.push_back(Entry{name, std::move(init)});
    return params_.back().value;
}

Tensor& ParamStore::operator[](const std::string& name) {
    for (auto& e : params_) {
        if (e.name == name) return e.value;
    }
    throw LabError("unknown parameter '" + name + "'");
}

const Tensor& ParamStore::at(const std::string& name) const {
    for (const auto& e : params_) {
        if (e.name == name) return e.value;
    }
    throw LabError("unknown parameter '" + name + "'");
}

bool ParamStore::has(const std::string& name) const {
    for (const auto& e : params_) {
        if (e.name == name) return true;
    }
    return false;
}

std::vector<Tensor*> ParamStore::all() {
    std::vector<Tensor*> out;
    out.reserve(params_.size());
    for (auto& e : params_) out.push_back(&e.value);
    return out;
}

std::uint64_t ParamStore::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& e : params_) {
        h = fnv1a(e.name.data(), e.name.size(), h);
        h = fnv1a(e.value.data(), e.value.numel() * sizeof(float), h);
    }
    return h;
}

std::vector<Tensor> collect_grads(const TrainCtx& ctx, const GradMap& grads) {
    std::vector<Tensor> out;
    out.reserve(ctx.leaves.size());
    for (const auto& leaf : ctx.leaves) out.push_back(grads.at(leaf));
    return out;
}

std::vector<Tensor> aligned_grads(ParamStore& store, const TrainCtx& ctx, const GradMap& grads) {
    std::unordered_map<const Tensor*, std::size_t> index;
    std::vector<Tensor> out;
    out.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
        index.emplace(&store.value(i), i);
        out.push_back(Tensor::zeros(store.value(i).shape()));
    }
    for (std::size_t s = 0; s < ctx.slots.size(); ++s) {
        auto it = index.find(ctx.slots[s]);
        if (it == index.end()) continue;
        const Tensor& g = grads.at(ctx.leaves[s]);
        float* dst = out[it->second].raw();
        for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g.at(i);
    }
    return out;
}

void accumulate(std::vector<Tensor>& acc, const std::vector<Tensor>& grads) {
    if (acc.empty()) {
        acc = grads;
        return;
    }
    if (acc.size() != grads.size()) throw LabError("accumulate: slot count mismatch");
    for (std::size_t i = 0; i < acc.size(); ++i) {
        if (acc[i].numel() != grads[i].numel()) throw LabError("accumulate: shape mismatch");
        float* a = acc[i].raw();
        for (std::size_t j = 0; j < grads[i].numel(); ++j) a[j] += grads[i].at(j);
    }
}

void Sgd::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size()) throw LabError("sgd: param/grad count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        if (p.numel() != grads[i].numel()) throw LabError("sgd: shape mismatch");
        float* pv = p.raw();
        for (std::size_t j = 0; j < p.numel(); ++j) pv[j] -= lr_ * grads[i].at(j);
        if (!all_finite(pv, p.numel())) throw LabError("sgd: non-finite parameter after update");
    }
}

Adam::Adam(std::vector<Tensor*> params, float lr, float beta1, float beta2, float eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto* p : params_) {
        m_.emplace_back(p->numel(), 0.0f);
        v_.emplace_back(p->numel(), 0.0f);
    }
}

void Adam::step(const std::vector<Tensor>& grads) {
    if (grads.size() != params_.size()) throw LabError("adam: param/grad count mismatch");
    ++t_;
    const float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = *params_[i];
        if (p.numel() != grads[i].numel()) throw LabError("adam: shape mismatch");
        float* pv = p.raw();
        for (std::size_t j = 0; j < p.numel(); ++j) {
            const float g = grads[i].at(j);
            m_[i][j] = beta1_ * m_[i][j] + (1.0f - beta1_) * g;
            v_[i][j] = beta2_ * v_[i][j] + (1.0f - beta2_) * g * g;
            const float mh = m_[i][j] / bc1;
            const float vh = v_[i][j] / bc2;
            pv[j] -= lr_ * mh / (std::sqrt(vh) + eps_);
        }
        if (!all_finite(pv, p.numel())) throw LabError("adam: non-finite parameter after update");
    }
}

Tensor randn_init(Rng& rng, Shape s, float stddev) {
    return Tensor::from(std::move(s), rng.normal_vec(shape_numel(s), stddev));
}

Tensor kaiming_init(Rng& rng, Shape s, std::size_t fan_in) {
    const float stddev = std::sqrt(2.0f / static_cast<float>(fan_in));
    return randn_init(rng, std::move(s), stddev);
}

std::vector<float> sinusoidal_features(float position, int width) {
    if (width % 2 != 0) throw LabError("sinusoidal_features: width must be even");
    std::vector<float> out(static_cast<std::size_t>(width));
    const int half = width / 2;
    for (int i = 0; i < half; ++i) {
        const float freq = std::exp(-std::log(10000.0f) * static_cast<float>(i) /
                                    static_cast<float>(half));
        out[static_cast<std::size_t>(i)] = std::sin(position * freq);
        out[static_cast<std::size_t>(half + i)] = std::cos(position * freq);
    }
    return out;
}

}  // namespace bratlab
