#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <unordered_map>
#include <vector>

#include "bratlab/util.hpp"

namespace bratlab {

class Tape;

// 32-bit float n-d array in row-major order. Values are immutable once the
// tensor has been placed on a tape; parameters are mutated between steps
// through raw() on their untaped handles.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0f); }
    static Tensor full(Shape s, float v) { return Tensor(std::move(s), v); }
    static Tensor from(Shape s, std::vector<float> vals);
    static Tensor scalar(float v) { return from({}, {v}); }

    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::size_t numel() const { return data_ ? data_->size() : 0; }
    bool defined() const { return static_cast<bool>(data_); }

    const float* data() const { return data_->data(); }
    const std::vector<float>& vec() const { return *data_; }
    // Shared handle to the value buffer; backward closures hold one so the
    // forward values outlive the tensor wrapper.
    std::shared_ptr<const std::vector<float>> data_ptr() const { return data_; }
    float at(std::size_t i) const { return (*data_)[i]; }
    float item() const;

    // Mutable access; only legal while the tensor is not on a tape.
    float* raw();

    bool taped() const { return node_ >= 0; }
    int node() const { return node_; }
    Tape* tape() const { return tape_; }
    bool requires_grad() const { return requires_grad_; }

    Tensor detached() const;

private:
    Tensor(Shape s, float fill)
        : data_(std::make_shared<std::vector<float>>(shape_numel(s), fill)), shape_(std::move(s)) {}

    std::shared_ptr<std::vector<float>> data_;
    Shape shape_;
    Tape* tape_ = nullptr;
    int node_ = -1;
    bool requires_grad_ = false;

    friend class Tape;
};

// Gradients of a scalar loss with respect to the tape's marked leaves,
// keyed by leaf node id.
class GradMap {
public:
    bool contains(const Tensor& leaf) const { return by_node_.count(leaf.node()) != 0; }
    const Tensor& at(const Tensor& leaf) const;
    std::size_t size() const { return by_node_.size(); }

private:
    std::unordered_map<int, Tensor> by_node_;
    friend class Tape;
};

// Ordered record of operations. Ops append nodes in execution order, so a
// single reverse walk is a valid topological order and visits each node once.
class Tape {
public:
    using BackFn = std::function<void(Tape&, const float* grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Register a value as a differentiable (or tracked) input.
    Tensor leaf(const Tensor& value, bool requires_grad = true);

    // Append an op node. Called by the op library, not by user code.
    Tensor emit(Shape shape, std::vector<float> vals, std::vector<int> parents, BackFn back,
                const char* op);

    // Reverse pass from a scalar loss. Every requires_grad leaf gets a
    // gradient (zero if the loss does not depend on it).
    GradMap backward(const Tensor& loss);

    std::size_t num_nodes() const { return nodes_.size(); }

    // Grad buffer access for backward closures.
    float* grad_buf(int node);
    const float* grad_of(int node) const { return grads_[static_cast<std::size_t>(node)].data(); }

private:
    struct Node {
        std::vector<int> parents;
        BackFn back;  // null for leaves
        std::size_t numel = 0;
        const char* op = "";
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;
    std::vector<std::vector<float>> grads_;
};

// ---- op library ----------------------------------------------------------
// All ops work both on taped tensors (recording the backward step) and on
// plain constants (pure evaluation, no tape). Mixing tensors from two
// different tapes is an error. Any non-finite output aborts with the op name.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
Tensor add_scalar(const Tensor& a, float c);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor cosine_sim(const Tensor& a, const Tensor& b);

Tensor matmul(const Tensor& a, const Tensor& b);                       // [m,k]x[k,n]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);      // x[n,i] w[o,i] b[o]
Tensor stack_rows(const std::vector<Tensor>& rows);                    // n x [d] -> [n,d]

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);  // 3x3, pad 1
Tensor upsample_nearest2(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor patchify(const Tensor& x, int p);                 // [C,H,W] -> [HW/p^2, C*p*p]
Tensor unpatchify(const Tensor& t, int c, int h, int w, int p);
Tensor chw_to_rows(const Tensor& x);                     // [C,H,W] -> [H*W, C]
Tensor rows_to_chw(const Tensor& x, int c, int h, int w);
Tensor reshape(const Tensor& x, Shape s);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);
Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softmax_rows(const Tensor& x);

// Scaled dot-product attention, single head. mask (optional, length m,
// 0/1) removes key positions; a fully masked row falls back to uniform.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const std::vector<float>* key_mask = nullptr);

Tensor affine_rows(const Tensor& x, const Tensor& s, const Tensor& t);      // per-column
Tensor affine_channels(const Tensor& x, const Tensor& s, const Tensor& t);  // per-channel
Tensor global_avg_pool(const Tensor& x);                                    // [C,H,W] -> [C]
Tensor masked_mean_rows(const Tensor& x, const std::vector<float>& mask);   // [n,d] -> [d]

// ---- non-taped utilities ---------------------------------------------------

// Scales the collection so its global L2 norm is at most max_norm; returns
// the original global norm. Direction is preserved.
float clip_grad_norm(std::vector<Tensor>& grads, float max_norm);

}  // namespace bratlab
