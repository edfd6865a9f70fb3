#include "bratlab/gradcheck.hpp"

#include <cmath>

#include "bratlab/rng.hpp"

namespace bratlab {

namespace {

Tensor rand_tensor(Rng& rng, Shape s, float stddev = 1.0f) {
    return Tensor::from(std::move(s), rng.normal_vec(shape_numel(s), stddev));
}

// Reduce an arbitrary op output to a scalar with fixed random weights so the
// incoming gradient is not uniform.
Tensor weigh(const Tensor& out, const Tensor& w) { return mean(mul(out, w)); }

float eval_loss(const std::vector<Tensor>& params, const LossBuilder& fn) {
    Tape tape;
    std::vector<Tensor> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(tape.leaf(p));
    return fn(tape, leaves).item();
}

}  // namespace

float max_fd_rel_err(const std::vector<Tensor>& params, const LossBuilder& fn, float eps) {
    Tape tape;
    std::vector<Tensor> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(tape.leaf(p));
    Tensor loss = fn(tape, leaves);
    GradMap grads = tape.backward(loss);

    float worst = 0.0f;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const Tensor& g = grads.at(leaves[pi]);
        for (std::size_t j = 0; j < params[pi].numel(); ++j) {
            std::vector<Tensor> bumped = params;
            std::vector<float> vals = params[pi].vec();
            const float orig = vals[j];
            vals[j] = orig + eps;
            bumped[pi] = Tensor::from(params[pi].shape(), vals);
            const float lp = eval_loss(bumped, fn);
            vals[j] = orig - eps;
            bumped[pi] = Tensor::from(params[pi].shape(), vals);
            const float lm = eval_loss(bumped, fn);
            const float fd = (lp - lm) / (2.0f * eps);
            const float ad = g.at(j);
            const float denom = std::max({std::fabs(ad), std::fabs(fd), 1.0f});
            worst = std::max(worst, std::fabs(ad - fd) / denom);
        }
    }
    return worst;
}

namespace {

struct Case {
    const char* name;
    std::function<float(Rng&)> run;  // one randomized instance -> max rel err
};

std::vector<Case> build_cases() {
    std::vector<Case> cases;
    auto add_case = [&](const char* name, std::function<float(Rng&)> run) {
        cases.push_back(Case{name, std::move(run)});
    };

    add_case("add", [](Rng& rng) {
        auto a = rand_tensor(rng, {3, 4});
        auto b = rand_tensor(rng, {3, 4});
        auto w = rand_tensor(rng, {3, 4});
        return max_fd_rel_err({a, b}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(add(l[0], l[1]), w);
        });
    });
    add_case("sub", [](Rng& rng) {
        auto a = rand_tensor(rng, {3, 4});
        auto b = rand_tensor(rng, {3, 4});
        auto w = rand_tensor(rng, {3, 4});
        return max_fd_rel_err({a, b}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(sub(l[0], l[1]), w);
        });
    });
    add_case("mul", [](Rng& rng) {
        auto a = rand_tensor(rng, {3, 4});
        auto b = rand_tensor(rng, {3, 4});
        auto w = rand_tensor(rng, {3, 4});
        return max_fd_rel_err({a, b}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(mul(l[0], l[1]), w);
        });
    });
    add_case("scale", [](Rng& rng) {
        auto a = rand_tensor(rng, {10});
        auto w = rand_tensor(rng, {10});
        const float c = rng.uniform(-2.0f, 2.0f);
        return max_fd_rel_err({a}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(scale(l[0], c), w);
        });
    });
    add_case("add_scalar", [](Rng& rng) {
        auto a = rand_tensor(rng, {10});
        auto w = rand_tensor(rng, {10});
        const float c = rng.uniform(-2.0f, 2.0f);
        return max_fd_rel_err({a}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(add_scalar(l[0], c), w);
        });
    });
    add_case("sum", [](Rng& rng) {
        auto a = rand_tensor(rng, {11});
        return max_fd_rel_err(
            {a}, [&](Tape&, const std::vector<Tensor>& l) { return sum(l[0]); });
    });
    add_case("mean", [](Rng& rng) {
        auto a = rand_tensor(rng, {11});
        return max_fd_rel_err(
            {a}, [&](Tape&, const std::vector<Tensor>& l) { return mean(l[0]); });
    });
    add_case("mse", [](Rng& rng) {
        auto a = rand_tensor(rng, {3, 5});
        auto b = rand_tensor(rng, {3, 5});
        return max_fd_rel_err(
            {a, b}, [&](Tape&, const std::vector<Tensor>& l) { return mse(l[0], l[1]); });
    });
    add_case("cosine_sim", [](Rng& rng) {
        auto a = rand_tensor(rng, {8});
        auto b = rand_tensor(rng, {8});
        return max_fd_rel_err({a, b}, [&](Tape&, const std::vector<Tensor>& l) {
            return cosine_sim(l[0], l[1]);
        });
    });
    add_case("matmul", [](Rng& rng) {
        auto a = rand_tensor(rng, {3, 4});
        auto b = rand_tensor(rng, {4, 5});
        auto w = rand_tensor(rng, {3, 5});
        return max_fd_rel_err({a, b}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(matmul(l[0], l[1]), w);
        });
    });
    add_case("linear", [](Rng& rng) {
        auto x = rand_tensor(rng, {4, 6});
        auto wt = rand_tensor(rng, {3, 6});
        auto b = rand_tensor(rng, {3});
        auto w = rand_tensor(rng, {4, 3});
        return max_fd_rel_err({x, wt, b}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(linear(l[0], l[1], l[2]), w);
        });
    });
    add_case("stack_rows", [](Rng& rng) {
        auto a = rand_tensor(rng, {5});
        auto b = rand_tensor(rng, {5});
        auto c = rand_tensor(rng, {5});
        auto w = rand_tensor(rng, {3, 5});
        return max_fd_rel_err({a, b, c}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(stack_rows({l[0], l[1], l[2]}), w);
        });
    });
    add_case("conv2d_s1", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 5, 5});
        auto k = rand_tensor(rng, {3, 2, 3, 3}, 0.5f);
        auto b = rand_tensor(rng, {3});
        auto w = rand_tensor(rng, {3, 5, 5});
        return max_fd_rel_err({x, k, b}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(conv2d(l[0], l[1], l[2], 1), w);
        });
    });
    add_case("conv2d_s2", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 6, 6});
        auto k = rand_tensor(rng, {3, 2, 3, 3}, 0.5f);
        auto b = rand_tensor(rng, {3});
        auto w = rand_tensor(rng, {3, 3, 3});
        return max_fd_rel_err({x, k, b}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(conv2d(l[0], l[1], l[2], 2), w);
        });
    });
    add_case("upsample_nearest2", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 3, 3});
        auto w = rand_tensor(rng, {2, 6, 6});
        return max_fd_rel_err({x}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(upsample_nearest2(l[0]), w);
        });
    });
    add_case("concat_channels", [](Rng& rng) {
        auto a = rand_tensor(rng, {2, 4, 4});
        auto b = rand_tensor(rng, {3, 4, 4});
        auto w = rand_tensor(rng, {5, 4, 4});
        return max_fd_rel_err({a, b}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(concat_channels(l[0], l[1]), w);
        });
    });
    add_case("patchify", [](Rng& rng) {
        auto x = rand_tensor(rng, {3, 4, 4});
        auto w = rand_tensor(rng, {4, 12});
        return max_fd_rel_err({x}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(patchify(l[0], 2), w);
        });
    });
    add_case("unpatchify", [](Rng& rng) {
        auto x = rand_tensor(rng, {4, 12});
        auto w = rand_tensor(rng, {3, 4, 4});
        return max_fd_rel_err({x}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(unpatchify(l[0], 3, 4, 4, 2), w);
        });
    });
    add_case("chw_to_rows", [](Rng& rng) {
        auto x = rand_tensor(rng, {3, 2, 4});
        auto w = rand_tensor(rng, {8, 3});
        return max_fd_rel_err({x}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(chw_to_rows(l[0]), w);
        });
    });
    add_case("rows_to_chw", [](Rng& rng) {
        auto x = rand_tensor(rng, {8, 3});
        auto w = rand_tensor(rng, {3, 2, 4});
        return max_fd_rel_err({x}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(rows_to_chw(l[0], 3, 2, 4), w);
        });
    });
    add_case("reshape", [](Rng& rng) {
        auto x = rand_tensor(rng, {3, 4});
        auto w = rand_tensor(rng, {12});
        return max_fd_rel_err({x}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(reshape(l[0], {12}), w);
        });
    });
    add_case("layer_norm", [](Rng& rng) {
        auto x = rand_tensor(rng, {3, 6});
        auto gm = rand_tensor(rng, {6});
        auto bt = rand_tensor(rng, {6});
        auto w = rand_tensor(rng, {3, 6});
        return max_fd_rel_err({x, gm, bt}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(layer_norm(l[0], l[1], l[2]), w);
        });
    });
    add_case("group_norm", [](Rng& rng) {
        auto x = rand_tensor(rng, {4, 3, 3});
        auto gm = rand_tensor(rng, {4});
        auto bt = rand_tensor(rng, {4});
        auto w = rand_tensor(rng, {4, 3, 3});
        return max_fd_rel_err({x, gm, bt}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(group_norm(l[0], 2, l[1], l[2]), w);
        });
    });
    add_case("silu", [](Rng& rng) {
        auto x = rand_tensor(rng, {12});
        auto w = rand_tensor(rng, {12});
        return max_fd_rel_err(
            {x}, [&](Tape&, const std::vector<Tensor>& l) { return weigh(silu(l[0]), w); });
    });
    add_case("gelu", [](Rng& rng) {
        auto x = rand_tensor(rng, {12});
        auto w = rand_tensor(rng, {12});
        return max_fd_rel_err(
            {x}, [&](Tape&, const std::vector<Tensor>& l) { return weigh(gelu(l[0]), w); });
    });
    add_case("softmax_rows", [](Rng& rng) {
        auto x = rand_tensor(rng, {3, 5});
        auto w = rand_tensor(rng, {3, 5});
        return max_fd_rel_err({x}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(softmax_rows(l[0]), w);
        });
    });
    add_case("attention", [](Rng& rng) {
        auto q = rand_tensor(rng, {4, 6});
        auto k = rand_tensor(rng, {5, 6});
        auto v = rand_tensor(rng, {5, 7});
        auto w = rand_tensor(rng, {4, 7});
        return max_fd_rel_err({q, k, v}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(attention(l[0], l[1], l[2]), w);
        });
    });
    add_case("attention_masked", [](Rng& rng) {
        auto q = rand_tensor(rng, {4, 6});
        auto k = rand_tensor(rng, {5, 6});
        auto v = rand_tensor(rng, {5, 7});
        auto w = rand_tensor(rng, {4, 7});
        auto mask = std::make_shared<std::vector<float>>(std::vector<float>{1, 1, 1, 0, 0});
        return max_fd_rel_err({q, k, v}, [&, mask](Tape&, const std::vector<Tensor>& l) {
            return weigh(attention(l[0], l[1], l[2], mask.get()), w);
        });
    });
    add_case("affine_rows", [](Rng& rng) {
        auto x = rand_tensor(rng, {4, 5});
        auto s = rand_tensor(rng, {5});
        auto t = rand_tensor(rng, {5});
        auto w = rand_tensor(rng, {4, 5});
        return max_fd_rel_err({x, s, t}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(affine_rows(l[0], l[1], l[2]), w);
        });
    });
    add_case("affine_channels", [](Rng& rng) {
        auto x = rand_tensor(rng, {3, 4, 4});
        auto s = rand_tensor(rng, {3});
        auto t = rand_tensor(rng, {3});
        auto w = rand_tensor(rng, {3, 4, 4});
        return max_fd_rel_err({x, s, t}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(affine_channels(l[0], l[1], l[2]), w);
        });
    });
    add_case("global_avg_pool", [](Rng& rng) {
        auto x = rand_tensor(rng, {3, 4, 4});
        auto w = rand_tensor(rng, {3});
        return max_fd_rel_err({x}, [&](Tape&, const std::vector<Tensor>& l) {
            return weigh(global_avg_pool(l[0]), w);
        });
    });
    add_case("masked_mean_rows", [](Rng& rng) {
        auto x = rand_tensor(rng, {6, 4});
        auto w = rand_tensor(rng, {4});
        std::vector<float> mask{1, 1, 0, 1, 0, 0};
        return max_fd_rel_err({x}, [&, mask](Tape&, const std::vector<Tensor>& l) {
            return weigh(masked_mean_rows(l[0], mask), w);
        });
    });
    add_case("mlp3", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 6});
        auto w1 = rand_tensor(rng, {8, 6}, 0.3f);
        auto b1 = rand_tensor(rng, {8}, 0.1f);
        auto w2 = rand_tensor(rng, {8, 8}, 0.3f);
        auto b2 = rand_tensor(rng, {8}, 0.1f);
        auto w3 = rand_tensor(rng, {4, 8}, 0.3f);
        auto b3 = rand_tensor(rng, {4}, 0.1f);
        auto tgt = rand_tensor(rng, {2, 4}, 0.5f);
        return max_fd_rel_err(
            {x, w1, b1, w2, b2, w3, b3}, [&](Tape&, const std::vector<Tensor>& l) {
                Tensor h1 = silu(linear(l[0], l[1], l[2]));
                Tensor h2 = gelu(linear(h1, l[3], l[4]));
                return mse(linear(h2, l[5], l[6]), tgt);
            });
    });
    return cases;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck(int instances_per_op, std::uint64_t seed, float tol) {
    std::vector<GradCheckResult> results;
    for (auto& c : build_cases()) {
        Rng base(seed);
        Rng rng = base.fork(c.name);
        GradCheckResult r;
        r.op = c.name;
        r.instances = instances_per_op;
        for (int i = 0; i < instances_per_op; ++i) {
            r.max_rel_err = std::max(r.max_rel_err, c.run(rng));
        }
        r.pass = r.max_rel_err < tol;
        results.push_back(std::move(r));
    }
    return results;
}

bool gradcheck_selftest() {
    // A linear map whose backward deliberately doubles the true gradient.
    Rng rng(7);
    auto x = rand_tensor(rng, {6});
    auto w = rand_tensor(rng, {6});
    const float err = max_fd_rel_err({x}, [&](Tape& tape, const std::vector<Tensor>& l) {
        std::vector<float> vals(6);
        for (int i = 0; i < 6; ++i) vals[static_cast<std::size_t>(i)] = l[0].at(static_cast<std::size_t>(i));
        Tensor bad = tape.emit(
            {6}, std::move(vals), {l[0].node()},
            [px = l[0].node()](Tape& t, const float* g) {
                float* gx = t.grad_buf(px);
                for (int i = 0; i < 6; ++i) gx[i] += 2.0f * g[i];
            },
            "broken_identity");
        return weigh(bad, w);
    });
    return err > 0.1f;
}

}  // namespace bratlab
