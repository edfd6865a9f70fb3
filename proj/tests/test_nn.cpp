#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bratlab/nn.hpp"
#include "testutil.hpp"

using namespace bratlab;
using testutil::near;

TEST_CASE("param store rejects duplicates and keeps order") {
    ParamStore ps;
    ps.add("w", Tensor::full({2}, 1.0f));
    ps.add("b", Tensor::zeros({2}));
    CHECK(ps.size() == 2);
    CHECK(ps.name(0) == "w");
    CHECK_THROWS_AS(ps.add("w", Tensor::zeros({2})), LabError);
    CHECK_THROWS_AS(ps.at("missing"), LabError);
    CHECK(ps.has("b"));
}

TEST_CASE("checksum is order and byte sensitive") {
    ParamStore a, b;
    a.add("w", Tensor::from({2}, {1.0f, 2.0f}));
    b.add("w", Tensor::from({2}, {1.0f, 2.0f}));
    CHECK(a.checksum() == b.checksum());
    b["w"].raw()[1] = 2.0000002f;
    CHECK(a.checksum() != b.checksum());

    ParamStore c;
    c.add("v", Tensor::from({2}, {1.0f, 2.0f}));
    CHECK(a.checksum() != c.checksum());
}

TEST_CASE("sgd applies the plain update rule") {
    Tensor w = Tensor::from({3}, {1.0f, -2.0f, 0.5f});
    std::vector<Tensor> g = {Tensor::from({3}, {0.5f, 0.5f, -1.0f})};
    Sgd opt(0.1f);
    opt.step({&w}, g);
    CHECK(near(w.at(0), 0.95f, 1e-7f));
    CHECK(near(w.at(1), -2.05f, 1e-7f));
    CHECK(near(w.at(2), 0.6f, 1e-7f));
}

TEST_CASE("sgd refuses non-finite gradients") {
    Tensor w = Tensor::from({1}, {1.0f});
    std::vector<Tensor> g = {Tensor::from({1}, {std::nanf("")})};
    Sgd opt(0.1f);
    CHECK_THROWS_AS(opt.step({&w}, g), LabError);
}

TEST_CASE("adam first step moves by lr toward the gradient sign") {
    Tensor w = Tensor::from({2}, {0.0f, 0.0f});
    Adam opt({&w}, 0.01f);
    opt.step({Tensor::from({2}, {3.0f, -0.2f})});
    CHECK(near(w.at(0), -0.01f, 1e-4f));
    CHECK(near(w.at(1), 0.01f, 1e-4f));
}

TEST_CASE("binding and accumulation mirror manual sums") {
    Tensor w = Tensor::from({2}, {1.0f, 2.0f});
    std::vector<Tensor> acc;
    for (int step = 0; step < 3; ++step) {
        Tape tape;
        TrainCtx ctx(tape);
        Tensor leaf = ctx.bind(w);
        GradMap grads = tape.backward(mean(mul(leaf, leaf)));
        accumulate(acc, collect_grads(ctx, grads));
    }
    // d/dw mean(w*w) = w, accumulated three times
    CHECK(near(acc[0].at(0), 3.0f, 1e-5f));
    CHECK(near(acc[0].at(1), 6.0f, 1e-5f));
}

TEST_CASE("sinusoidal features are bounded and distinguish positions") {
    auto a = sinusoidal_features(0.0f, 8);
    auto b = sinusoidal_features(17.0f, 8);
    REQUIRE(a.size() == 8);
    CHECK(near(a[0], 0.0f, 1e-7f));   // sin(0)
    CHECK(near(a[4], 1.0f, 1e-7f));   // cos(0)
    float diff = 0.0f;
    for (int i = 0; i < 8; ++i) {
        CHECK(std::fabs(b[static_cast<std::size_t>(i)]) <= 1.0f);
        diff += std::fabs(a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(i)]);
    }
    CHECK(diff > 0.1f);
}

TEST_CASE("initializers are seeded") {
    Rng r1(5), r2(5);
    Tensor a = randn_init(r1, {16}, 0.05f);
    Tensor b = randn_init(r2, {16}, 0.05f);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
}
