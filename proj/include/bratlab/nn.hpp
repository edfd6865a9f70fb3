#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "bratlab/rng.hpp"
#include "bratlab/tensor.hpp"

namespace bratlab {

// Named parameter collection with stable addresses. Parameters stay untaped;
// training code binds them onto a tape per step through TrainCtx.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor init);
    Tensor& operator[](const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const;

    std::size_t size() const { return params_.size(); }
    const std::string& name(std::size_t i) const { return params_[i].name; }
    Tensor& value(std::size_t i) { return params_[i].value; }
    const Tensor& value(std::size_t i) const { return params_[i].value; }

    std::vector<Tensor*> all();

    // Order- and bit-sensitive digest of every parameter (names + payload).
    std::uint64_t checksum() const;

private:
    struct Entry {
        std::string name;
        Tensor value;
    };
    std::deque<Entry> params_;
};

// Binds parameters as differentiable leaves on one tape for one step.
struct TrainCtx {
    explicit TrainCtx(Tape& t) : tape(&t) {}

    Tensor bind(Tensor& param) {
        slots.push_back(&param);
        leaves.push_back(tape->leaf(param));
        return leaves.back();
    }
    void bind_all(ParamStore& store) {
        for (auto* p : store.all()) bind(*p);
    }

    Tape* tape;
    std::vector<Tensor*> slots;
    std::vector<Tensor> leaves;
};

// Gradients for the ctx-bound parameters, in binding order.
std::vector<Tensor> collect_grads(const TrainCtx& ctx, const GradMap& grads);

// Gradients re-keyed to store.all() order: duplicated bindings are summed,
// parameters the forward never touched get zeros, and bindings belonging to
// other stores are ignored.
std::vector<Tensor> aligned_grads(ParamStore& store, const TrainCtx& ctx, const GradMap& grads);

// In-place elementwise addition used for gradient accumulation across
// micro-steps.
void accumulate(std::vector<Tensor>& acc, const std::vector<Tensor>& grads);

class Sgd {
public:
    explicit Sgd(float lr) : lr_(lr) {}
    void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads);
    float lr() const { return lr_; }

private:
    float lr_;
};

class Adam {
public:
    Adam(std::vector<Tensor*> params, float lr, float beta1 = 0.9f, float beta2 = 0.999f,
         float eps = 1e-8f);
    void step(const std::vector<Tensor>& grads);
    const std::vector<Tensor*>& params() const { return params_; }

private:
    std::vector<Tensor*> params_;
    std::vector<std::vector<float>> m_, v_;
    int t_ = 0;
    float lr_, beta1_, beta2_, eps_;
};

// Initializers.
Tensor randn_init(Rng& rng, Shape s, float stddev);
Tensor kaiming_init(Rng& rng, Shape s, std::size_t fan_in);

// Sinusoidal position/timestep features of the given width (even).
std::vector<float> sinusoidal_features(float position, int width);

}  // namespace bratlab
