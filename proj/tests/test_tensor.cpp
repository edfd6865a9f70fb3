#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bratlab/gradcheck.hpp"
#include "bratlab/rng.hpp"
#include "bratlab/tensor.hpp"
#include "testutil.hpp"

using namespace bratlab;
using testutil::max_abs;
using testutil::max_abs_diff;

TEST_CASE("square loss gradient") {
    Tape tape;
    Tensor x = tape.leaf(Tensor::scalar(3.0f));
    Tensor loss = mul(x, x);
    GradMap grads = tape.backward(loss);
    CHECK(grads.at(x).item() == doctest::Approx(6.0f));
}

TEST_CASE("sum of softmax has zero gradient") {
    Tape tape;
    Tensor v = tape.leaf(Tensor::from({1, 5}, {0.3f, -1.2f, 2.0f, 0.0f, 0.7f}));
    Tensor loss = sum(softmax_rows(v));
    CHECK(loss.item() == doctest::Approx(1.0f));
    GradMap grads = tape.backward(loss);
    CHECK(max_abs(grads.at(v)) <= 1e-6f);
}

TEST_CASE("three layer mlp matches finite differences") {
    auto results = run_gradcheck(3, 99);
    bool found = false;
    for (const auto& r : results) {
        if (r.op == "mlp3") {
            found = true;
            CHECK(r.max_rel_err < 1e-3f);
        }
    }
    CHECK(found);
}

TEST_CASE("every op passes the finite-difference suite") {
    for (const auto& r : run_gradcheck(2, 1234)) {
        INFO(r.op);
        CHECK(r.pass);
        CHECK(r.max_rel_err < 1e-3f);
    }
}

TEST_CASE("gradcheck harness catches a broken backward") { CHECK(gradcheck_selftest()); }

TEST_CASE("cosine similarity values") {
    CHECK(cosine_sim(Tensor::from({2}, {1, 0}), Tensor::from({2}, {0, 1})).item() ==
          doctest::Approx(0.0f));
    CHECK(cosine_sim(Tensor::from({2}, {2, 0}), Tensor::from({2}, {1, 0})).item() ==
          doctest::Approx(1.0f));
    CHECK(cosine_sim(Tensor::from({2}, {1, 1}), Tensor::from({2}, {1, 0})).item() ==
          doctest::Approx(0.7071f).epsilon(1e-4));
}

TEST_CASE("cosine similarity rejects zero norm") {
    CHECK_THROWS_AS(cosine_sim(Tensor::zeros({3}), Tensor::from({3}, {1, 2, 3})), LabError);
}

TEST_CASE("cosine similarity gradient flows to both sides") {
    Tape tape;
    Tensor a = tape.leaf(Tensor::from({3}, {1.0f, 0.5f, -0.25f}));
    Tensor b = tape.leaf(Tensor::from({3}, {0.2f, -1.0f, 0.8f}));
    GradMap grads = tape.backward(cosine_sim(a, b));
    CHECK(max_abs(grads.at(a)) > 0.0f);
    CHECK(max_abs(grads.at(b)) > 0.0f);
}

TEST_CASE("clip_grad_norm scales to the cap") {
    std::vector<Tensor> grads{Tensor::from({2}, {20, 0})};
    const float norm = clip_grad_norm(grads, 10.0f);
    CHECK(norm == doctest::Approx(20.0f));
    CHECK(grads[0].at(0) == doctest::Approx(10.0f));
    CHECK(grads[0].at(1) == doctest::Approx(0.0f));
}

TEST_CASE("clip_grad_norm is a no-op under the cap") {
    std::vector<Tensor> grads{Tensor::from({2}, {3, 4})};
    const float norm = clip_grad_norm(grads, 10.0f);
    CHECK(norm == doctest::Approx(5.0f));
    CHECK(grads[0].at(0) == doctest::Approx(3.0f));
    CHECK(grads[0].at(1) == doctest::Approx(4.0f));
}

TEST_CASE("clip_grad_norm uses the global norm across tensors") {
    std::vector<Tensor> grads{Tensor::from({2}, {3, 0}), Tensor::from({2}, {4, 0})};
    const float norm = clip_grad_norm(grads, 1.0f);
    CHECK(norm == doctest::Approx(5.0f));
    CHECK(grads[0].at(0) == doctest::Approx(0.6f));
    CHECK(grads[1].at(0) == doctest::Approx(0.8f));
}

TEST_CASE("backward is linear in the loss") {
    auto grad_of = [](float a, float b) {
        Tape tape;
        Tensor x = tape.leaf(Tensor::from({3}, {0.4f, -1.1f, 2.2f}));
        Tensor f = mean(mul(x, x));
        Tensor g = sum(silu(x));
        Tensor loss = add(scale(f, a), scale(g, b));
        return tape.backward(loss).at(x);
    };
    Tensor combined = grad_of(2.0f, -3.0f);
    Tensor fa = grad_of(1.0f, 0.0f);
    Tensor gb = grad_of(0.0f, 1.0f);
    for (std::size_t i = 0; i < combined.numel(); ++i) {
        CHECK(combined.at(i) ==
              doctest::Approx(2.0f * fa.at(i) - 3.0f * gb.at(i)).epsilon(1e-5));
    }
}

TEST_CASE("identical seeds give bitwise identical forward and gradients") {
    auto run = [] {
        Rng rng(2024);
        Tape tape;
        Tensor x = tape.leaf(Tensor::from({4, 6}, rng.normal_vec(24)));
        Tensor w = tape.leaf(Tensor::from({3, 6}, rng.normal_vec(18)));
        Tensor b = tape.leaf(Tensor::from({3}, rng.normal_vec(3)));
        Tensor out = gelu(linear(x, w, b));
        Tensor loss = mse(out, Tensor::from({4, 3}, rng.normal_vec(12)));
        GradMap grads = tape.backward(loss);
        std::vector<float> flat{loss.item()};
        for (const Tensor* t : {&x, &w, &b}) {
            const Tensor& g = grads.at(*t);
            flat.insert(flat.end(), g.vec().begin(), g.vec().end());
        }
        return flat;
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("non-finite forward value aborts with the op name") {
    Tensor big = Tensor::full({2}, 3e38f);
    try {
        add(big, big);
        FAIL("expected an error");
    } catch (const LabError& e) {
        CHECK(std::string(e.what()).find("add") != std::string::npos);
    }
}

TEST_CASE("backward requires a scalar loss") {
    Tape tape;
    Tensor x = tape.leaf(Tensor::from({2}, {1, 2}));
    Tensor y = scale(x, 2.0f);
    CHECK_THROWS_AS(tape.backward(y), LabError);
}

TEST_CASE("taped tensors reject mutation") {
    Tape tape;
    Tensor x = tape.leaf(Tensor::from({2}, {1, 2}));
    CHECK_THROWS_AS(x.raw(), LabError);
}

TEST_CASE("unmarked leaves get no gradient entry") {
    Tape tape;
    Tensor x = tape.leaf(Tensor::from({2}, {1, 2}));
    Tensor frozen = tape.leaf(Tensor::from({2}, {3, 4}), false);
    GradMap grads = tape.backward(sum(mul(x, frozen)));
    CHECK(grads.contains(x));
    CHECK_FALSE(grads.contains(frozen));
    CHECK(grads.size() == 1);
}

TEST_CASE("leaf untouched by the loss still gets a zero gradient") {
    Tape tape;
    Tensor x = tape.leaf(Tensor::from({2}, {1, 2}));
    Tensor unused = tape.leaf(Tensor::from({3}, {1, 2, 3}));
    GradMap grads = tape.backward(sum(x));
    CHECK(grads.contains(unused));
    CHECK(max_abs(grads.at(unused)) == 0.0f);
}

TEST_CASE("constant-only ops evaluate without a tape") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor out = matmul(a, a);
    CHECK_FALSE(out.taped());
    CHECK(out.at(0) == doctest::Approx(7.0f));
    CHECK(out.at(3) == doctest::Approx(22.0f));
}

TEST_CASE("attention mask removes key positions") {
    Rng rng(5);
    Tensor q = Tensor::from({2, 4}, rng.normal_vec(8));
    Tensor k = Tensor::from({3, 4}, rng.normal_vec(12));
    Tensor v = Tensor::from({3, 5}, rng.normal_vec(15));
    std::vector<float> mask{1, 0, 1};

    Tensor masked = attention(q, k, v, &mask);

    // same result as dropping the masked key entirely
    std::vector<float> k2vals, v2vals;
    for (int j : {0, 2}) {
        for (int c = 0; c < 4; ++c) k2vals.push_back(k.at(static_cast<std::size_t>(j * 4 + c)));
        for (int c = 0; c < 5; ++c) v2vals.push_back(v.at(static_cast<std::size_t>(j * 5 + c)));
    }
    Tensor dropped = attention(q, Tensor::from({2, 4}, k2vals), Tensor::from({2, 5}, v2vals));
    CHECK(max_abs_diff(masked, dropped) < 1e-6f);
}

TEST_CASE("fully masked attention falls back to uniform averaging") {
    Rng rng(6);
    Tensor q = Tensor::from({2, 4}, rng.normal_vec(8));
    Tensor k = Tensor::from({3, 4}, rng.normal_vec(12));
    Tensor v = Tensor::from({3, 5}, rng.normal_vec(15));
    std::vector<float> mask{0, 0, 0};
    Tensor out = attention(q, k, v, &mask);
    for (int i = 0; i < 2; ++i) {
        for (int c = 0; c < 5; ++c) {
            float avg = (v.at(static_cast<std::size_t>(c)) + v.at(static_cast<std::size_t>(5 + c)) +
                         v.at(static_cast<std::size_t>(10 + c))) /
                        3.0f;
            CHECK(out.at(static_cast<std::size_t>(i * 5 + c)) == doctest::Approx(avg));
        }
    }
}

TEST_CASE("patchify and unpatchify invert each other") {
    Rng rng(7);
    Tensor x = Tensor::from({4, 8, 8}, rng.normal_vec(256));
    Tensor back = unpatchify(patchify(x, 2), 4, 8, 8, 2);
    CHECK(max_abs_diff(x, back) == 0.0f);
}

TEST_CASE("chw/rows layout round trip") {
    Rng rng(8);
    Tensor x = Tensor::from({3, 4, 5}, rng.normal_vec(60));
    Tensor back = rows_to_chw(chw_to_rows(x), 3, 4, 5);
    CHECK(max_abs_diff(x, back) == 0.0f);
}

TEST_CASE("mixing tapes is rejected") {
    Tape t1, t2;
    Tensor a = t1.leaf(Tensor::from({2}, {1, 2}));
    Tensor b = t2.leaf(Tensor::from({2}, {3, 4}));
    CHECK_THROWS_AS(add(a, b), LabError);
}
