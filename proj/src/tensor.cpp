#include "bratlab/tensor.hpp"

#include <cmath>
#include <cstring>

namespace bratlab {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw LabError(msg);
}

void check_finite(const std::vector<float>& v, const char* op) {
    if (!all_finite(v.data(), v.size())) {
        throw LabError(std::string("non-finite value in forward op '") + op + "'");
    }
}

Tape* tape_of(std::initializer_list<const Tensor*> ts) {
    Tape* tp = nullptr;
    for (const Tensor* t : ts) {
        if (t->tape() == nullptr) continue;
        if (tp == nullptr) tp = t->tape();
        require(tp == t->tape(), "operands belong to different tapes");
    }
    return tp;
}

Tensor finish(Tape* tp, Shape shape, std::vector<float> vals, std::vector<int> parents,
              Tape::BackFn back, const char* op) {
    check_finite(vals, op);
    if (tp == nullptr) return Tensor::from(std::move(shape), std::move(vals));
    return tp->emit(std::move(shape), std::move(vals), std::move(parents), std::move(back), op);
}

float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::from(Shape s, std::vector<float> vals) {
    require(shape_numel(s) == vals.size(),
            "tensor init: shape " + shape_str(s) + " does not match " + std::to_string(vals.size()) +
                " values");
    Tensor t;
    t.shape_ = std::move(s);
    t.data_ = std::make_shared<std::vector<float>>(std::move(vals));
    return t;
}

float Tensor::item() const {
    require(numel() == 1, "item() on tensor with " + std::to_string(numel()) + " elements");
    return (*data_)[0];
}

float* Tensor::raw() {
    require(!taped(), "mutating a taped tensor");
    return data_->data();
}

Tensor Tensor::detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
}

const Tensor& GradMap::at(const Tensor& leaf) const {
    auto it = by_node_.find(leaf.node());
    require(it != by_node_.end(), "no gradient recorded for this leaf");
    return it->second;
}

// ---- Tape ------------------------------------------------------------------

Tensor Tape::leaf(const Tensor& value, bool requires_grad) {
    require(value.defined(), "leaf() on undefined tensor");
    require(!value.taped(), "leaf() on a tensor already taped");
    check_finite(*value.data_, "leaf");
    Tensor t;
    t.shape_ = value.shape_;
    t.data_ = value.data_;
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size());
    t.requires_grad_ = requires_grad;
    nodes_.push_back(Node{{}, nullptr, value.numel(), "leaf", requires_grad});
    return t;
}

Tensor Tape::emit(Shape shape, std::vector<float> vals, std::vector<int> parents, BackFn back,
                  const char* op) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<float>>(std::move(vals));
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{std::move(parents), std::move(back), t.data_->size(), op, false});
    return t;
}

float* Tape::grad_buf(int node) {
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(node)].numel, 0.0f);
    return g.data();
}

GradMap Tape::backward(const Tensor& loss) {
    require(loss.tape() == this, "loss does not belong to this tape");
    require(loss.numel() == 1, "backward() needs a scalar loss");
    grads_.assign(nodes_.size(), {});
    grads_[static_cast<std::size_t>(loss.node())] = {1.0f};

    for (int i = loss.node(); i >= 0; --i) {
        auto& node = nodes_[static_cast<std::size_t>(i)];
        auto& g = grads_[static_cast<std::size_t>(i)];
        if (g.empty()) continue;  // not an ancestor of the loss
        if (!all_finite(g.data(), g.size())) {
            throw LabError(std::string("non-finite gradient at op '") + node.op + "'");
        }
        if (node.back) {
            node.back(*this, g.data());
            g.clear();
            g.shrink_to_fit();
        }
    }

    GradMap out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (!nodes_[i].requires_grad) continue;
        auto& g = grads_[i];
        Tensor gt = Tensor::zeros(Shape{static_cast<int>(nodes_[i].numel)});
        if (!g.empty()) std::memcpy(gt.raw(), g.data(), g.size() * sizeof(float));
        out.by_node_.emplace(static_cast<int>(i), std::move(gt));
    }
    grads_.clear();
    return out;
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::size_t n = a.numel();
    std::vector<float> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = a.at(i) + b.at(i);
    auto back = [pa = a.node(), pb = b.node(), n](Tape& t, const float* g) {
        if (pa >= 0) {
            float* ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (pb >= 0) {
            float* gb = t.grad_buf(pb);
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
        }
    };
    return finish(tape_of({&a, &b}), a.shape(), std::move(vals), {a.node(), b.node()}, back, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "sub: shape mismatch");
    std::size_t n = a.numel();
    std::vector<float> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = a.at(i) - b.at(i);
    auto back = [pa = a.node(), pb = b.node(), n](Tape& t, const float* g) {
        if (pa >= 0) {
            float* ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (pb >= 0) {
            float* gb = t.grad_buf(pb);
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
    };
    return finish(tape_of({&a, &b}), a.shape(), std::move(vals), {a.node(), b.node()}, back, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch");
    std::size_t n = a.numel();
    std::vector<float> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = a.at(i) * b.at(i);
    auto back = [pa = a.node(), pb = b.node(), da = a.data_ptr(), db = b.data_ptr(), n](
                    Tape& t, const float* g) {
        if (pa >= 0) {
            float* ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * (*db)[i];
        }
        if (pb >= 0) {
            float* gb = t.grad_buf(pb);
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * (*da)[i];
        }
    };
    return finish(tape_of({&a, &b}), a.shape(), std::move(vals), {a.node(), b.node()}, back, "mul");
}

Tensor scale(const Tensor& a, float c) {
    std::size_t n = a.numel();
    std::vector<float> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = a.at(i) * c;
    auto back = [pa = a.node(), c, n](Tape& t, const float* g) {
        if (pa >= 0) {
            float* ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * c;
        }
    };
    return finish(tape_of({&a}), a.shape(), std::move(vals), {a.node()}, back, "scale");
}

Tensor add_scalar(const Tensor& a, float c) {
    std::size_t n = a.numel();
    std::vector<float> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = a.at(i) + c;
    auto back = [pa = a.node(), n](Tape& t, const float* g) {
        if (pa >= 0) {
            float* ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
    };
    return finish(tape_of({&a}), a.shape(), std::move(vals), {a.node()}, back, "add_scalar");
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
    std::size_t n = x.numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x.at(i);
    auto back = [px = x.node(), n](Tape& t, const float* g) {
        if (px >= 0) {
            float* gx = t.grad_buf(px);
            for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
        }
    };
    return finish(tape_of({&x}), {}, {static_cast<float>(acc)}, {x.node()}, back, "sum");
}

Tensor mean(const Tensor& x) {
    std::size_t n = x.numel();
    require(n > 0, "mean of empty tensor");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x.at(i);
    float inv = 1.0f / static_cast<float>(n);
    auto back = [px = x.node(), n, inv](Tape& t, const float* g) {
        if (px >= 0) {
            float* gx = t.grad_buf(px);
            for (std::size_t i = 0; i < n; ++i) gx[i] += g[0] * inv;
        }
    };
    return finish(tape_of({&x}), {}, {static_cast<float>(acc / static_cast<double>(n))}, {x.node()},
                  back, "mean");
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mse: shape mismatch");
    std::size_t n = a.numel();
    require(n > 0, "mse of empty tensors");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = static_cast<double>(a.at(i)) - static_cast<double>(b.at(i));
        acc += d * d;
    }
    float inv = 2.0f / static_cast<float>(n);
    auto back = [pa = a.node(), pb = b.node(), da = a.data_ptr(), db = b.data_ptr(), n, inv](
                    Tape& t, const float* g) {
        if (pa >= 0) {
            float* ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[0] * inv * ((*da)[i] - (*db)[i]);
        }
        if (pb >= 0) {
            float* gb = t.grad_buf(pb);
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[0] * inv * ((*da)[i] - (*db)[i]);
        }
    };
    return finish(tape_of({&a, &b}), {}, {static_cast<float>(acc / static_cast<double>(n))},
                  {a.node(), b.node()}, back, "mse");
}

Tensor cosine_sim(const Tensor& a, const Tensor& b) {
    require(a.numel() == b.numel(), "cosine_sim: length mismatch");
    std::size_t n = a.numel();
    require(n > 0, "cosine_sim of empty tensors");
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        dot += static_cast<double>(a.at(i)) * b.at(i);
        na2 += static_cast<double>(a.at(i)) * a.at(i);
        nb2 += static_cast<double>(b.at(i)) * b.at(i);
    }
    require(na2 > 0.0 && nb2 > 0.0, "cosine_sim: zero-norm input");
    const float na = static_cast<float>(std::sqrt(na2));
    const float nb = static_cast<float>(std::sqrt(nb2));
    const float c = static_cast<float>(dot / (std::sqrt(na2) * std::sqrt(nb2)));
    auto back = [pa = a.node(), pb = b.node(), da = a.data_ptr(), db = b.data_ptr(), n, na, nb, c](
                    Tape& t, const float* g) {
        if (pa >= 0) {
            float* ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < n; ++i) {
                ga[i] += g[0] * ((*db)[i] / (na * nb) - c * (*da)[i] / (na * na));
            }
        }
        if (pb >= 0) {
            float* gb = t.grad_buf(pb);
            for (std::size_t i = 0; i < n; ++i) {
                gb[i] += g[0] * ((*da)[i] / (na * nb) - c * (*db)[i] / (nb * nb));
            }
        }
    };
    return finish(tape_of({&a, &b}), {}, {c}, {a.node(), b.node()}, back, "cosine_sim");
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
            "matmul: bad shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.dim(0), kk = a.dim(1), nn = b.dim(1);
    std::vector<float> vals(static_cast<std::size_t>(m) * nn, 0.0f);
    const float* pa = a.data();
    const float* pb = b.data();
    for (int i = 0; i < m; ++i) {
        for (int k = 0; k < kk; ++k) {
            const float av = pa[i * kk + k];
            const float* brow = pb + k * nn;
            float* orow = vals.data() + i * nn;
            for (int j = 0; j < nn; ++j) orow[j] += av * brow[j];
        }
    }
    auto back = [paN = a.node(), pbN = b.node(), da = a.data_ptr(), db = b.data_ptr(), m, kk, nn](
                    Tape& t, const float* g) {
        if (paN >= 0) {  // dA = G B^T
            float* ga = t.grad_buf(paN);
            for (int i = 0; i < m; ++i) {
                for (int k = 0; k < kk; ++k) {
                    float acc = 0.0f;
                    const float* grow = g + i * nn;
                    const float* brow = db->data() + k * nn;
                    for (int j = 0; j < nn; ++j) acc += grow[j] * brow[j];
                    ga[i * kk + k] += acc;
                }
            }
        }
        if (pbN >= 0) {  // dB = A^T G
            float* gb = t.grad_buf(pbN);
            for (int i = 0; i < m; ++i) {
                const float* arow = da->data() + i * kk;
                const float* grow = g + i * nn;
                for (int k = 0; k < kk; ++k) {
                    float* gbrow = gb + k * nn;
                    const float av = arow[k];
                    for (int j = 0; j < nn; ++j) gbrow[j] += av * grow[j];
                }
            }
        }
    };
    return finish(tape_of({&a, &b}), {m, nn}, std::move(vals), {a.node(), b.node()}, back, "matmul");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    require(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, "linear: bad ranks");
    const int n = x.dim(0), in = x.dim(1), out = w.dim(0);
    require(w.dim(1) == in && b.dim(0) == out, "linear: shape mismatch");
    std::vector<float> vals(static_cast<std::size_t>(n) * out);
    const float* px = x.data();
    const float* pw = w.data();
    const float* pbv = b.data();
    for (int i = 0; i < n; ++i) {
        const float* xrow = px + i * in;
        float* orow = vals.data() + i * out;
        for (int o = 0; o < out; ++o) {
            const float* wrow = pw + o * in;
            float acc = pbv[o];
            for (int j = 0; j < in; ++j) acc += xrow[j] * wrow[j];
            orow[o] = acc;
        }
    }
    auto back = [pxN = x.node(), pwN = w.node(), pbN = b.node(), dx = x.data_ptr(),
                 dw = w.data_ptr(), n, in, out](Tape& t, const float* g) {
        if (pxN >= 0) {  // dX = G W
            float* gx = t.grad_buf(pxN);
            for (int i = 0; i < n; ++i) {
                const float* grow = g + i * out;
                float* gxrow = gx + i * in;
                for (int o = 0; o < out; ++o) {
                    const float gv = grow[o];
                    const float* wrow = dw->data() + o * in;
                    for (int j = 0; j < in; ++j) gxrow[j] += gv * wrow[j];
                }
            }
        }
        if (pwN >= 0) {  // dW = G^T X
            float* gw = t.grad_buf(pwN);
            for (int i = 0; i < n; ++i) {
                const float* grow = g + i * out;
                const float* xrow = dx->data() + i * in;
                for (int o = 0; o < out; ++o) {
                    const float gv = grow[o];
                    float* gwrow = gw + o * in;
                    for (int j = 0; j < in; ++j) gwrow[j] += gv * xrow[j];
                }
            }
        }
        if (pbN >= 0) {  // db = colsum G
            float* gb = t.grad_buf(pbN);
            for (int i = 0; i < n; ++i) {
                const float* grow = g + i * out;
                for (int o = 0; o < out; ++o) gb[o] += grow[o];
            }
        }
    };
    return finish(tape_of({&x, &w, &b}), {n, out}, std::move(vals), {x.node(), w.node(), b.node()},
                  back, "linear");
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
    require(!rows.empty(), "stack_rows: empty input");
    const std::size_t d = rows[0].numel();
    const int n = static_cast<int>(rows.size());
    std::vector<float> vals(static_cast<std::size_t>(n) * d);
    std::vector<int> parents(rows.size());
    Tape* tp = nullptr;
    for (int i = 0; i < n; ++i) {
        const Tensor& r = rows[static_cast<std::size_t>(i)];
        require(r.numel() == d, "stack_rows: ragged rows");
        std::memcpy(vals.data() + i * d, r.data(), d * sizeof(float));
        parents[static_cast<std::size_t>(i)] = r.node();
        if (r.tape() != nullptr) {
            if (tp == nullptr) tp = r.tape();
            require(tp == r.tape(), "stack_rows: operands on different tapes");
        }
    }
    auto pcopy = parents;
    auto back = [pcopy, d](Tape& t, const float* g) {
        for (std::size_t i = 0; i < pcopy.size(); ++i) {
            if (pcopy[i] < 0) continue;
            float* gr = t.grad_buf(pcopy[i]);
            const float* grow = g + i * d;
            for (std::size_t j = 0; j < d; ++j) gr[j] += grow[j];
        }
    };
    return finish(tp, {n, static_cast<int>(d)}, std::move(vals), std::move(parents), back,
                  "stack_rows");
}

// ---- conv / spatial --------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
    require(x.rank() == 3 && w.rank() == 4 && b.rank() == 1, "conv2d: bad ranks");
    require(w.dim(2) == 3 && w.dim(3) == 3, "conv2d: kernel must be 3x3");
    require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
    const int ci = x.dim(0), h = x.dim(1), ww = x.dim(2);
    const int co = w.dim(0);
    require(w.dim(1) == ci && b.dim(0) == co, "conv2d: channel mismatch");
    const int oh = (h + stride - 1) / stride;  // pad 1, kernel 3
    const int ow = (ww + stride - 1) / stride;
    std::vector<float> vals(static_cast<std::size_t>(co) * oh * ow);
    const float* px = x.data();
    const float* pw = w.data();
    const float* pb = b.data();
    for (int o = 0; o < co; ++o) {
        float* oplane = vals.data() + static_cast<std::size_t>(o) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) oplane[oy * ow + ox] = pb[o];
        }
        for (int c = 0; c < ci; ++c) {
            const float* xplane = px + static_cast<std::size_t>(c) * h * ww;
            const float* kern = pw + (static_cast<std::size_t>(o) * ci + c) * 9;
            for (int oy = 0; oy < oh; ++oy) {
                const int iy0 = oy * stride - 1;
                for (int ky = 0; ky < 3; ++ky) {
                    const int iy = iy0 + ky;
                    if (iy < 0 || iy >= h) continue;
                    const float* xrow = xplane + iy * ww;
                    float* orow = oplane + oy * ow;
                    for (int kx = 0; kx < 3; ++kx) {
                        const float kv = kern[ky * 3 + kx];
                        if (kv == 0.0f) continue;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * stride - 1 + kx;
                            if (ix < 0 || ix >= ww) continue;
                            orow[ox] += kv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
    auto back = [pxN = x.node(), pwN = w.node(), pbN = b.node(), dx = x.data_ptr(),
                 dw = w.data_ptr(), ci, h, ww, co, oh, ow, stride](Tape& t, const float* g) {
        if (pbN >= 0) {
            float* gb = t.grad_buf(pbN);
            for (int o = 0; o < co; ++o) {
                const float* gplane = g + static_cast<std::size_t>(o) * oh * ow;
                float acc = 0.0f;
                for (int i = 0; i < oh * ow; ++i) acc += gplane[i];
                gb[o] += acc;
            }
        }
        if (pwN >= 0) {
            float* gw = t.grad_buf(pwN);
            for (int o = 0; o < co; ++o) {
                const float* gplane = g + static_cast<std::size_t>(o) * oh * ow;
                for (int c = 0; c < ci; ++c) {
                    const float* xplane = dx->data() + static_cast<std::size_t>(c) * h * ww;
                    float* kern = gw + (static_cast<std::size_t>(o) * ci + c) * 9;
                    for (int ky = 0; ky < 3; ++ky) {
                        for (int kx = 0; kx < 3; ++kx) {
                            float acc = 0.0f;
                            for (int oy = 0; oy < oh; ++oy) {
                                const int iy = oy * stride - 1 + ky;
                                if (iy < 0 || iy >= h) continue;
                                const float* xrow = xplane + iy * ww;
                                const float* grow = gplane + oy * ow;
                                for (int ox = 0; ox < ow; ++ox) {
                                    const int ix = ox * stride - 1 + kx;
                                    if (ix < 0 || ix >= ww) continue;
                                    acc += grow[ox] * xrow[ix];
                                }
                            }
                            kern[ky * 3 + kx] += acc;
                        }
                    }
                }
            }
        }
        if (pxN >= 0) {
            float* gx = t.grad_buf(pxN);
            for (int o = 0; o < co; ++o) {
                const float* gplane = g + static_cast<std::size_t>(o) * oh * ow;
                for (int c = 0; c < ci; ++c) {
                    float* gxplane = gx + static_cast<std::size_t>(c) * h * ww;
                    const float* kern = dw->data() + (static_cast<std::size_t>(o) * ci + c) * 9;
                    for (int oy = 0; oy < oh; ++oy) {
                        const float* grow = gplane + oy * ow;
                        for (int ky = 0; ky < 3; ++ky) {
                            const int iy = oy * stride - 1 + ky;
                            if (iy < 0 || iy >= h) continue;
                            float* gxrow = gxplane + iy * ww;
                            for (int kx = 0; kx < 3; ++kx) {
                                const float kv = kern[ky * 3 + kx];
                                if (kv == 0.0f) continue;
                                for (int ox = 0; ox < ow; ++ox) {
                                    const int ix = ox * stride - 1 + kx;
                                    if (ix < 0 || ix >= ww) continue;
                                    gxrow[ix] += kv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    return finish(tape_of({&x, &w, &b}), {co, oh, ow}, std::move(vals),
                  {x.node(), w.node(), b.node()}, back, "conv2d");
}

Tensor upsample_nearest2(const Tensor& x) {
    require(x.rank() == 3, "upsample_nearest2: want [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<float> vals(static_cast<std::size_t>(c) * 4 * h * w);
    const float* px = x.data();
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < 2 * h; ++y) {
            for (int xx = 0; xx < 2 * w; ++xx) {
                vals[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx] =
                    px[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2];
            }
        }
    }
    auto back = [pxN = x.node(), c, h, w](Tape& t, const float* g) {
        if (pxN < 0) return;
        float* gx = t.grad_buf(pxN);
        for (int ch = 0; ch < c; ++ch) {
            for (int y = 0; y < 2 * h; ++y) {
                for (int xx = 0; xx < 2 * w; ++xx) {
                    gx[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2] +=
                        g[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx];
                }
            }
        }
    };
    return finish(tape_of({&x}), {c, 2 * h, 2 * w}, std::move(vals), {x.node()}, back,
                  "upsample_nearest2");
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require(a.rank() == 3 && b.rank() == 3 && a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2),
            "concat_channels: spatial mismatch");
    const int ca = a.dim(0), cb = b.dim(0), h = a.dim(1), w = a.dim(2);
    std::vector<float> vals(a.numel() + b.numel());
    std::memcpy(vals.data(), a.data(), a.numel() * sizeof(float));
    std::memcpy(vals.data() + a.numel(), b.data(), b.numel() * sizeof(float));
    auto back = [pa = a.node(), pb = b.node(), na = a.numel(), nb = b.numel()](Tape& t,
                                                                               const float* g) {
        if (pa >= 0) {
            float* ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
        }
        if (pb >= 0) {
            float* gb = t.grad_buf(pb);
            for (std::size_t i = 0; i < nb; ++i) gb[i] += g[na + i];
        }
    };
    return finish(tape_of({&a, &b}), {ca + cb, h, w}, std::move(vals), {a.node(), b.node()}, back,
                  "concat_channels");
}

namespace {
// index maps for patchify: token-major layout [n_tokens, c*p*p]
inline std::size_t patch_src_index(int c, int h, int w, int p, std::size_t dst) {
    const int plane = p * p;
    const int token_w = w / p;
    const int d = c * plane;
    const int tok = static_cast<int>(dst) / d;
    const int rem = static_cast<int>(dst) % d;
    const int ch = rem / plane;
    const int off = rem % plane;
    const int ty = tok / token_w, tx = tok % token_w;
    const int py = off / p, px = off % p;
    return (static_cast<std::size_t>(ch) * h + (ty * p + py)) * w + (tx * p + px);
}
}  // namespace

Tensor patchify(const Tensor& x, int p) {
    require(x.rank() == 3 && x.dim(1) % p == 0 && x.dim(2) % p == 0, "patchify: bad shape");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int ntok = (h / p) * (w / p), d = c * p * p;
    std::vector<float> vals(static_cast<std::size_t>(ntok) * d);
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = x.at(patch_src_index(c, h, w, p, i));
    auto back = [pxN = x.node(), c, h, w, p, n = vals.size()](Tape& t, const float* g) {
        if (pxN < 0) return;
        float* gx = t.grad_buf(pxN);
        for (std::size_t i = 0; i < n; ++i) gx[patch_src_index(c, h, w, p, i)] += g[i];
    };
    return finish(tape_of({&x}), {ntok, d}, std::move(vals), {x.node()}, back, "patchify");
}

Tensor unpatchify(const Tensor& tks, int c, int h, int w, int p) {
    require(tks.rank() == 2, "unpatchify: want [tokens, d]");
    require(tks.dim(0) == (h / p) * (w / p) && tks.dim(1) == c * p * p, "unpatchify: bad shape");
    std::vector<float> vals(static_cast<std::size_t>(c) * h * w);
    for (std::size_t i = 0; i < tks.numel(); ++i) vals[patch_src_index(c, h, w, p, i)] = tks.at(i);
    auto back = [pN = tks.node(), c, h, w, p, n = tks.numel()](Tape& t, const float* g) {
        if (pN < 0) return;
        float* gt = t.grad_buf(pN);
        for (std::size_t i = 0; i < n; ++i) gt[i] += g[patch_src_index(c, h, w, p, i)];
    };
    return finish(tape_of({&tks}), {c, h, w}, std::move(vals), {tks.node()}, back, "unpatchify");
}

Tensor chw_to_rows(const Tensor& x) {
    require(x.rank() == 3, "chw_to_rows: want [C,H,W]");
    const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
    std::vector<float> vals(x.numel());
    for (int pos = 0; pos < hw; ++pos) {
        for (int ch = 0; ch < c; ++ch) {
            vals[static_cast<std::size_t>(pos) * c + ch] = x.at(static_cast<std::size_t>(ch) * hw + pos);
        }
    }
    auto back = [pxN = x.node(), c, hw](Tape& t, const float* g) {
        if (pxN < 0) return;
        float* gx = t.grad_buf(pxN);
        for (int pos = 0; pos < hw; ++pos) {
            for (int ch = 0; ch < c; ++ch) {
                gx[static_cast<std::size_t>(ch) * hw + pos] += g[static_cast<std::size_t>(pos) * c + ch];
            }
        }
    };
    return finish(tape_of({&x}), {hw, c}, std::move(vals), {x.node()}, back, "chw_to_rows");
}

Tensor rows_to_chw(const Tensor& x, int c, int h, int w) {
    require(x.rank() == 2 && x.dim(0) == h * w && x.dim(1) == c, "rows_to_chw: bad shape");
    const int hw = h * w;
    std::vector<float> vals(x.numel());
    for (int pos = 0; pos < hw; ++pos) {
        for (int ch = 0; ch < c; ++ch) {
            vals[static_cast<std::size_t>(ch) * hw + pos] = x.at(static_cast<std::size_t>(pos) * c + ch);
        }
    }
    auto back = [pxN = x.node(), c, hw](Tape& t, const float* g) {
        if (pxN < 0) return;
        float* gx = t.grad_buf(pxN);
        for (int pos = 0; pos < hw; ++pos) {
            for (int ch = 0; ch < c; ++ch) {
                gx[static_cast<std::size_t>(pos) * c + ch] += g[static_cast<std::size_t>(ch) * hw + pos];
            }
        }
    };
    return finish(tape_of({&x}), {c, h, w}, std::move(vals), {x.node()}, back, "rows_to_chw");
}

Tensor reshape(const Tensor& x, Shape s) {
    require(shape_numel(s) == x.numel(), "reshape: element count mismatch");
    std::vector<float> vals(x.vec());
    auto back = [pxN = x.node(), n = x.numel()](Tape& t, const float* g) {
        if (pxN < 0) return;
        float* gx = t.grad_buf(pxN);
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
    };
    return finish(tape_of({&x}), std::move(s), std::move(vals), {x.node()}, back, "reshape");
}

// ---- normalization / nonlinearity ------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    require(x.rank() == 2, "layer_norm: want [n,d]");
    const int n = x.dim(0), d = x.dim(1);
    require(gamma.numel() == static_cast<std::size_t>(d) && beta.numel() == static_cast<std::size_t>(d),
            "layer_norm: affine shape mismatch");
    std::vector<float> vals(x.numel());
    auto xhat = std::make_shared<std::vector<float>>(x.numel());
    auto rstd = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const float* row = x.data() + i * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double dv = row[j] - mu;
            var += dv * dv;
        }
        var /= d;
        const float rs = 1.0f / std::sqrt(static_cast<float>(var) + eps);
        (*rstd)[static_cast<std::size_t>(i)] = rs;
        for (int j = 0; j < d; ++j) {
            const float xh = (row[j] - static_cast<float>(mu)) * rs;
            (*xhat)[static_cast<std::size_t>(i * d + j)] = xh;
            vals[static_cast<std::size_t>(i * d + j)] = xh * gamma.at(static_cast<std::size_t>(j)) +
                                                        beta.at(static_cast<std::size_t>(j));
        }
    }
    auto back = [pxN = x.node(), pgN = gamma.node(), pbN = beta.node(), dg = gamma.data_ptr(), xhat,
                 rstd, n, d](Tape& t, const float* g) {
        if (pgN >= 0) {
            float* gg = t.grad_buf(pgN);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) {
                    gg[j] += g[i * d + j] * (*xhat)[static_cast<std::size_t>(i * d + j)];
                }
            }
        }
        if (pbN >= 0) {
            float* gb = t.grad_buf(pbN);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) gb[j] += g[i * d + j];
            }
        }
        if (pxN >= 0) {
            float* gx = t.grad_buf(pxN);
            for (int i = 0; i < n; ++i) {
                double s1 = 0.0, s2 = 0.0;
                for (int j = 0; j < d; ++j) {
                    const float dxh = g[i * d + j] * (*dg)[static_cast<std::size_t>(j)];
                    s1 += dxh;
                    s2 += dxh * (*xhat)[static_cast<std::size_t>(i * d + j)];
                }
                s1 /= d;
                s2 /= d;
                const float rs = (*rstd)[static_cast<std::size_t>(i)];
                for (int j = 0; j < d; ++j) {
                    const float dxh = g[i * d + j] * (*dg)[static_cast<std::size_t>(j)];
                    gx[i * d + j] += rs * (dxh - static_cast<float>(s1) -
                                           (*xhat)[static_cast<std::size_t>(i * d + j)] *
                                               static_cast<float>(s2));
                }
            }
        }
    };
    return finish(tape_of({&x, &gamma, &beta}), x.shape(), std::move(vals),
                  {x.node(), gamma.node(), beta.node()}, back, "layer_norm");
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, float eps) {
    require(x.rank() == 3, "group_norm: want [C,H,W]");
    const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
    require(c % groups == 0, "group_norm: groups must divide channels");
    require(gamma.numel() == static_cast<std::size_t>(c) && beta.numel() == static_cast<std::size_t>(c),
            "group_norm: affine shape mismatch");
    const int gc = c / groups;           // channels per group
    const int gn = gc * hw;              // elements per group
    std::vector<float> vals(x.numel());
    auto xhat = std::make_shared<std::vector<float>>(x.numel());
    auto rstd = std::make_shared<std::vector<float>>(static_cast<std::size_t>(groups));
    for (int gi = 0; gi < groups; ++gi) {
        const float* base = x.data() + static_cast<std::size_t>(gi) * gn;
        double mu = 0.0;
        for (int j = 0; j < gn; ++j) mu += base[j];
        mu /= gn;
        double var = 0.0;
        for (int j = 0; j < gn; ++j) {
            const double dv = base[j] - mu;
            var += dv * dv;
        }
        var /= gn;
        const float rs = 1.0f / std::sqrt(static_cast<float>(var) + eps);
        (*rstd)[static_cast<std::size_t>(gi)] = rs;
        for (int j = 0; j < gn; ++j) {
            const std::size_t idx = static_cast<std::size_t>(gi) * gn + j;
            const int ch = static_cast<int>(idx) / hw;
            const float xh = (base[j] - static_cast<float>(mu)) * rs;
            (*xhat)[idx] = xh;
            vals[idx] = xh * gamma.at(static_cast<std::size_t>(ch)) + beta.at(static_cast<std::size_t>(ch));
        }
    }
    auto back = [pxN = x.node(), pgN = gamma.node(), pbN = beta.node(), dg = gamma.data_ptr(), xhat,
                 rstd, groups, gn, hw](Tape& t, const float* g) {
        if (pgN >= 0) {
            float* gg = t.grad_buf(pgN);
            const std::size_t total = static_cast<std::size_t>(groups) * gn;
            for (std::size_t idx = 0; idx < total; ++idx) {
                gg[idx / static_cast<std::size_t>(hw)] += g[idx] * (*xhat)[idx];
            }
        }
        if (pbN >= 0) {
            float* gb = t.grad_buf(pbN);
            const std::size_t total = static_cast<std::size_t>(groups) * gn;
            for (std::size_t idx = 0; idx < total; ++idx) gb[idx / static_cast<std::size_t>(hw)] += g[idx];
        }
        if (pxN >= 0) {
            float* gx = t.grad_buf(pxN);
            for (int gi = 0; gi < groups; ++gi) {
                double s1 = 0.0, s2 = 0.0;
                for (int j = 0; j < gn; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(gi) * gn + j;
                    const float dxh = g[idx] * (*dg)[idx / static_cast<std::size_t>(hw)];
                    s1 += dxh;
                    s2 += dxh * (*xhat)[idx];
                }
                s1 /= gn;
                s2 /= gn;
                const float rs = (*rstd)[static_cast<std::size_t>(gi)];
                for (int j = 0; j < gn; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(gi) * gn + j;
                    const float dxh = g[idx] * (*dg)[idx / static_cast<std::size_t>(hw)];
                    gx[idx] += rs * (dxh - static_cast<float>(s1) -
                                     (*xhat)[idx] * static_cast<float>(s2));
                }
            }
        }
    };
    return finish(tape_of({&x, &gamma, &beta}), x.shape(), std::move(vals),
                  {x.node(), gamma.node(), beta.node()}, back, "group_norm");
}

Tensor silu(const Tensor& x) {
    std::size_t n = x.numel();
    std::vector<float> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = x.at(i) * sigmoidf(x.at(i));
    auto back = [pxN = x.node(), dx = x.data_ptr(), n](Tape& t, const float* g) {
        if (pxN < 0) return;
        float* gx = t.grad_buf(pxN);
        for (std::size_t i = 0; i < n; ++i) {
            const float s = sigmoidf((*dx)[i]);
            gx[i] += g[i] * s * (1.0f + (*dx)[i] * (1.0f - s));
        }
    };
    return finish(tape_of({&x}), x.shape(), std::move(vals), {x.node()}, back, "silu");
}

Tensor gelu(const Tensor& x) {
    // tanh approximation
    constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
    constexpr float kA = 0.044715f;
    std::size_t n = x.numel();
    std::vector<float> vals(n);
    for (std::size_t i = 0; i < n; ++i) {
        const float v = x.at(i);
        const float u = kC * (v + kA * v * v * v);
        vals[i] = 0.5f * v * (1.0f + std::tanh(u));
    }
    auto back = [pxN = x.node(), dx = x.data_ptr(), n](Tape& t, const float* g) {
        if (pxN < 0) return;
        float* gx = t.grad_buf(pxN);
        for (std::size_t i = 0; i < n; ++i) {
            const float v = (*dx)[i];
            const float u = kC * (v + kA * v * v * v);
            const float th = std::tanh(u);
            const float du = kC * (1.0f + 3.0f * kA * v * v);
            gx[i] += g[i] * (0.5f * (1.0f + th) + 0.5f * v * (1.0f - th * th) * du);
        }
    };
    return finish(tape_of({&x}), x.shape(), std::move(vals), {x.node()}, back, "gelu");
}

Tensor softmax_rows(const Tensor& x) {
    require(x.rank() == 2, "softmax_rows: want [n,d]");
    const int n = x.dim(0), d = x.dim(1);
    std::vector<float> vals(x.numel());
    for (int i = 0; i < n; ++i) {
        const float* row = x.data() + i * d;
        float mx = row[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < d; ++j) {
            const float e = std::exp(row[j] - mx);
            vals[static_cast<std::size_t>(i * d + j)] = e;
            z += e;
        }
        for (int j = 0; j < d; ++j) vals[static_cast<std::size_t>(i * d + j)] /= static_cast<float>(z);
    }
    auto probs = std::make_shared<std::vector<float>>(vals);
    auto back = [pxN = x.node(), probs, n, d](Tape& t, const float* g) {
        if (pxN < 0) return;
        float* gx = t.grad_buf(pxN);
        for (int i = 0; i < n; ++i) {
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += g[i * d + j] * (*probs)[static_cast<std::size_t>(i * d + j)];
            for (int j = 0; j < d; ++j) {
                const float p = (*probs)[static_cast<std::size_t>(i * d + j)];
                gx[i * d + j] += p * (g[i * d + j] - static_cast<float>(dot));
            }
        }
    };
    return finish(tape_of({&x}), x.shape(), std::move(vals), {x.node()}, back, "softmax_rows");
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const std::vector<float>* key_mask) {
    require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention: want 2-d inputs");
    const int n = q.dim(0), d = q.dim(1), m = k.dim(0), dv = v.dim(1);
    require(k.dim(1) == d && v.dim(0) == m, "attention: shape mismatch");
    if (key_mask) require(static_cast<int>(key_mask->size()) == m, "attention: mask length mismatch");
    const float invs = 1.0f / std::sqrt(static_cast<float>(d));

    bool any_valid = !key_mask;
    if (key_mask) {
        for (float f : *key_mask) any_valid = any_valid || (f != 0.0f);
    }
    const bool uniform_fallback = !any_valid;  // every key masked out
    const bool use_mask = key_mask && any_valid;

    auto probs = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n) * m);
    std::vector<float> vals(static_cast<std::size_t>(n) * dv, 0.0f);
    std::vector<float> srow(static_cast<std::size_t>(m));
    for (int i = 0; i < n; ++i) {
        const float* qrow = q.data() + i * d;
        if (uniform_fallback) {
            const float p = 1.0f / static_cast<float>(m);
            for (int j = 0; j < m; ++j) (*probs)[static_cast<std::size_t>(i * m + j)] = p;
        } else {
            for (int j = 0; j < m; ++j) {
                if (use_mask && (*key_mask)[static_cast<std::size_t>(j)] == 0.0f) {
                    srow[static_cast<std::size_t>(j)] = -1e30f;
                    continue;
                }
                const float* krow = k.data() + j * d;
                float acc = 0.0f;
                for (int c = 0; c < d; ++c) acc += qrow[c] * krow[c];
                srow[static_cast<std::size_t>(j)] = acc * invs;
            }
            float mx = srow[0];
            for (int j = 1; j < m; ++j) mx = std::max(mx, srow[static_cast<std::size_t>(j)]);
            double z = 0.0;
            for (int j = 0; j < m; ++j) {
                const float e = std::exp(srow[static_cast<std::size_t>(j)] - mx);
                (*probs)[static_cast<std::size_t>(i * m + j)] = e;
                z += e;
            }
            for (int j = 0; j < m; ++j) {
                (*probs)[static_cast<std::size_t>(i * m + j)] /= static_cast<float>(z);
            }
        }
        for (int j = 0; j < m; ++j) {
            const float p = (*probs)[static_cast<std::size_t>(i * m + j)];
            const float* vrow = v.data() + j * dv;
            float* orow = vals.data() + i * dv;
            for (int c = 0; c < dv; ++c) orow[c] += p * vrow[c];
        }
    }
    auto back = [pqN = q.node(), pkN = k.node(), pvN = v.node(), dq = q.data_ptr(), dk = k.data_ptr(),
                 dvp = v.data_ptr(), probs, n, d, m, dv, invs,
                 uniform_fallback](Tape& t, const float* g) {
        std::vector<float> dprow(static_cast<std::size_t>(m));
        for (int i = 0; i < n; ++i) {
            const float* grow = g + i * dv;
            // dV[j] += P[i,j] * grow
            if (pvN >= 0) {
                float* gv = t.grad_buf(pvN);
                for (int j = 0; j < m; ++j) {
                    const float p = (*probs)[static_cast<std::size_t>(i * m + j)];
                    if (p == 0.0f) continue;
                    float* gvrow = gv + j * dv;
                    for (int c = 0; c < dv; ++c) gvrow[c] += p * grow[c];
                }
            }
            // uniform weights do not depend on the scores, so q/k get nothing
            if (uniform_fallback) continue;
            // dP[i,j] = grow . V[j]
            for (int j = 0; j < m; ++j) {
                const float* vrow = dvp->data() + j * dv;
                float acc = 0.0f;
                for (int c = 0; c < dv; ++c) acc += grow[c] * vrow[c];
                dprow[static_cast<std::size_t>(j)] = acc;
            }
            // dS = P o (dP - sum(dP o P)); masked entries have P == 0
            double dot = 0.0;
            for (int j = 0; j < m; ++j) {
                dot += dprow[static_cast<std::size_t>(j)] * (*probs)[static_cast<std::size_t>(i * m + j)];
            }
            for (int j = 0; j < m; ++j) {
                const float p = (*probs)[static_cast<std::size_t>(i * m + j)];
                const float ds = p * (dprow[static_cast<std::size_t>(j)] - static_cast<float>(dot)) * invs;
                if (ds == 0.0f) continue;
                if (pqN >= 0) {
                    float* gq = t.grad_buf(pqN);
                    const float* krow = dk->data() + j * d;
                    float* gqrow = gq + i * d;
                    for (int c = 0; c < d; ++c) gqrow[c] += ds * krow[c];
                }
                if (pkN >= 0) {
                    float* gk = t.grad_buf(pkN);
                    const float* qrow = dq->data() + i * d;
                    float* gkrow = gk + j * d;
                    for (int c = 0; c < d; ++c) gkrow[c] += ds * qrow[c];
                }
            }
        }
    };
    return finish(tape_of({&q, &k, &v}), {n, dv}, std::move(vals), {q.node(), k.node(), v.node()},
                  back, "attention");
}

Tensor affine_rows(const Tensor& x, const Tensor& s, const Tensor& t) {
    require(x.rank() == 2, "affine_rows: want [n,d]");
    const int n = x.dim(0), d = x.dim(1);
    require(s.numel() == static_cast<std::size_t>(d) && t.numel() == static_cast<std::size_t>(d),
            "affine_rows: shape mismatch");
    std::vector<float> vals(x.numel());
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) {
            vals[static_cast<std::size_t>(i * d + j)] =
                x.at(static_cast<std::size_t>(i * d + j)) * s.at(static_cast<std::size_t>(j)) +
                t.at(static_cast<std::size_t>(j));
        }
    }
    auto back = [pxN = x.node(), psN = s.node(), ptN = t.node(), dx = x.data_ptr(), ds = s.data_ptr(),
                 n, d](Tape& tp, const float* g) {
        if (pxN >= 0) {
            float* gx = tp.grad_buf(pxN);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) gx[i * d + j] += g[i * d + j] * (*ds)[static_cast<std::size_t>(j)];
            }
        }
        if (psN >= 0) {
            float* gs = tp.grad_buf(psN);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) gs[j] += g[i * d + j] * (*dx)[static_cast<std::size_t>(i * d + j)];
            }
        }
        if (ptN >= 0) {
            float* gt = tp.grad_buf(ptN);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) gt[j] += g[i * d + j];
            }
        }
    };
    return finish(tape_of({&x, &s, &t}), x.shape(), std::move(vals), {x.node(), s.node(), t.node()},
                  back, "affine_rows");
}

Tensor affine_channels(const Tensor& x, const Tensor& s, const Tensor& t) {
    require(x.rank() == 3, "affine_channels: want [C,H,W]");
    const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
    require(s.numel() == static_cast<std::size_t>(c) && t.numel() == static_cast<std::size_t>(c),
            "affine_channels: shape mismatch");
    std::vector<float> vals(x.numel());
    for (int ch = 0; ch < c; ++ch) {
        for (int j = 0; j < hw; ++j) {
            vals[static_cast<std::size_t>(ch * hw + j)] =
                x.at(static_cast<std::size_t>(ch * hw + j)) * s.at(static_cast<std::size_t>(ch)) +
                t.at(static_cast<std::size_t>(ch));
        }
    }
    auto back = [pxN = x.node(), psN = s.node(), ptN = t.node(), dx = x.data_ptr(), ds = s.data_ptr(),
                 c, hw](Tape& tp, const float* g) {
        if (pxN >= 0) {
            float* gx = tp.grad_buf(pxN);
            for (int ch = 0; ch < c; ++ch) {
                for (int j = 0; j < hw; ++j) gx[ch * hw + j] += g[ch * hw + j] * (*ds)[static_cast<std::size_t>(ch)];
            }
        }
        if (psN >= 0) {
            float* gs = tp.grad_buf(psN);
            for (int ch = 0; ch < c; ++ch) {
                float acc = 0.0f;
                for (int j = 0; j < hw; ++j) acc += g[ch * hw + j] * (*dx)[static_cast<std::size_t>(ch * hw + j)];
                gs[ch] += acc;
            }
        }
        if (ptN >= 0) {
            float* gt = tp.grad_buf(ptN);
            for (int ch = 0; ch < c; ++ch) {
                float acc = 0.0f;
                for (int j = 0; j < hw; ++j) acc += g[ch * hw + j];
                gt[ch] += acc;
            }
        }
    };
    return finish(tape_of({&x, &s, &t}), x.shape(), std::move(vals), {x.node(), s.node(), t.node()},
                  back, "affine_channels");
}

Tensor global_avg_pool(const Tensor& x) {
    require(x.rank() == 3, "global_avg_pool: want [C,H,W]");
    const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
    std::vector<float> vals(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int j = 0; j < hw; ++j) acc += x.at(static_cast<std::size_t>(ch * hw + j));
        vals[static_cast<std::size_t>(ch)] = static_cast<float>(acc / hw);
    }
    auto back = [pxN = x.node(), c, hw](Tape& t, const float* g) {
        if (pxN < 0) return;
        float* gx = t.grad_buf(pxN);
        const float inv = 1.0f / static_cast<float>(hw);
        for (int ch = 0; ch < c; ++ch) {
            for (int j = 0; j < hw; ++j) gx[ch * hw + j] += g[ch] * inv;
        }
    };
    return finish(tape_of({&x}), {c}, std::move(vals), {x.node()}, back, "global_avg_pool");
}

Tensor masked_mean_rows(const Tensor& x, const std::vector<float>& mask) {
    require(x.rank() == 2 && mask.size() == static_cast<std::size_t>(x.dim(0)),
            "masked_mean_rows: bad shapes");
    const int n = x.dim(0), d = x.dim(1);
    double wsum = 0.0;
    for (float f : mask) wsum += f;
    require(wsum > 0.0, "masked_mean_rows: empty mask");
    std::vector<float> vals(static_cast<std::size_t>(d), 0.0f);
    for (int i = 0; i < n; ++i) {
        const float wi = mask[static_cast<std::size_t>(i)];
        if (wi == 0.0f) continue;
        for (int j = 0; j < d; ++j) vals[static_cast<std::size_t>(j)] += wi * x.at(static_cast<std::size_t>(i * d + j));
    }
    const float inv = 1.0f / static_cast<float>(wsum);
    for (auto& v : vals) v *= inv;
    auto back = [pxN = x.node(), mask, n, d, inv](Tape& t, const float* g) {
        if (pxN < 0) return;
        float* gx = t.grad_buf(pxN);
        for (int i = 0; i < n; ++i) {
            const float wi = mask[static_cast<std::size_t>(i)] * inv;
            if (wi == 0.0f) continue;
            for (int j = 0; j < d; ++j) gx[i * d + j] += g[j] * wi;
        }
    };
    return finish(tape_of({&x}), {d}, std::move(vals), {x.node()}, back, "masked_mean_rows");
}

// ---- gradient utilities ------------------------------------------------------

float clip_grad_norm(std::vector<Tensor>& grads, float max_norm) {
    require(max_norm > 0.0f, "clip_grad_norm: max_norm must be positive");
    double sq = 0.0;
    for (const auto& g : grads) {
        for (std::size_t i = 0; i < g.numel(); ++i) sq += static_cast<double>(g.at(i)) * g.at(i);
    }
    const float norm = static_cast<float>(std::sqrt(sq));
    if (norm > max_norm) {
        const float s = max_norm / norm;
        for (auto& g : grads) {
            float* p = g.raw();
            for (std::size_t i = 0; i < g.numel(); ++i) p[i] *= s;
        }
    }
    return norm;
}

}  // namespace bratlab
