#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bratlab/adapter.hpp"
#include "bratlab/gradcheck.hpp"
#include "bratlab/toydata.hpp"
#include "testutil.hpp"

using namespace bratlab;
using testutil::max_abs_diff;
using testutil::near;

TEST_CASE("square adapter starts as the identity") {
    AdapterMap a(6, 6, 1);
    Rng rng(2);
    Tensor x = randn_init(rng, {3, 6}, 1.0f);
    Tensor y = a.adapt(x);
    CHECK(max_abs_diff(x, y) == 0.0f);
}

TEST_CASE("zero input returns the bias on every row") {
    AdapterMap a(6, 5, 1);
    for (int i = 0; i < 5; ++i) a.params()["b"].raw()[static_cast<std::size_t>(i)] = 0.5f + i;
    Tensor y = a.adapt(Tensor::zeros({3, 6}));
    for (int r = 0; r < 3; ++r)
        for (int i = 0; i < 5; ++i)
            CHECK(y.at(static_cast<std::size_t>(r * 5 + i)) == 0.5f + i);
}

TEST_CASE("the map is affine") {
    AdapterMap a(6, 5, 7);
    Rng rng(3);
    Tensor x = randn_init(rng, {2, 6}, 1.0f);
    Tensor y1 = a.adapt(x);
    Tensor y3 = a.adapt(scale(x, 3.0f));
    Tensor b = a.params().at("b");
    for (int r = 0; r < 2; ++r)
        for (int i = 0; i < 5; ++i) {
            const auto at = static_cast<std::size_t>(r * 5 + i);
            const float bias = b.at(static_cast<std::size_t>(i));
            CHECK(near(y3.at(at) - bias, 3.0f * (y1.at(at) - bias), 1e-4f));
        }
}

TEST_CASE("width mismatch is rejected") {
    AdapterMap a(6, 5, 1);
    CHECK_THROWS_AS(a.adapt(Tensor::zeros({3, 7})), LabError);
    CHECK_THROWS_AS(a.adapt(Tensor::zeros({6})), LabError);
}

TEST_CASE("input gradients match finite differences") {
    AdapterMap a(6, 5, 9);
    Rng rng(4);
    Tensor x0 = randn_init(rng, {3, 6}, 0.8f);
    Tensor w = randn_init(rng, {3, 5}, 0.5f);
    float err = max_fd_rel_err({x0}, [&](Tape& tape, const std::vector<Tensor>& ps) {
        (void)tape;
        return mean(mul(a.adapt(ps[0]), w.detached()));
    });
    CHECK(err < 1e-3f);
}

TEST_CASE("frozen adapter refuses binding but still maps") {
    AdapterMap a(6, 6, 1);
    a.set_frozen(true);
    Tensor x = Tensor::full({2, 6}, 1.0f);
    CHECK(a.adapt(x).numel() == 12);
    Tape tape;
    TrainCtx ctx(tape);
    CHECK_THROWS_AS(a.adapt(x, &ctx), LabError);
}

TEST_CASE("training regresses one encoder onto the other") {
    Vocabulary vocab = build_vocabulary(corpus_vocab_texts());
    TextEncoder enc_a("a", &vocab, 24, 11);
    TextEncoder enc_b("b", &vocab, 32, 12);

    CHECK_THROWS_AS(train_adapter({"a photo"}, enc_a, enc_b, 10), LabError);  // not frozen
    enc_a.set_frozen(true);
    enc_b.set_frozen(true);
    CHECK_THROWS_AS(train_adapter({}, enc_a, enc_b, 10), LabError);

    auto corpus = gen_corpus(5, 240, {});
    std::vector<std::string> train_prompts, held_out;
    for (std::size_t i = 0; i < corpus.size(); ++i)
        (i % 6 == 0 ? held_out : train_prompts).push_back(corpus[i].caption);

    auto mse_on = [&](AdapterMap& m) {
        double acc = 0.0;
        for (const auto& p : held_out) {
            Tensor pred = m.adapt(enc_a.encode_prompt(p).emb);
            acc += mse(pred, enc_b.encode_prompt(p).emb).item();
        }
        return acc / static_cast<double>(held_out.size());
    };

    AdapterMap untrained = train_adapter(train_prompts, enc_a, enc_b, 0, 77);
    AdapterMap trained = train_adapter(train_prompts, enc_a, enc_b, 2500, 77);
    const double before = mse_on(untrained);
    const double after = mse_on(trained);
    CHECK(after < 0.5 * before);

    const auto ca = enc_a.checksum();
    const auto cb = enc_b.checksum();
    train_adapter(train_prompts, enc_a, enc_b, 50, 3);
    CHECK(enc_a.checksum() == ca);
    CHECK(enc_b.checksum() == cb);
}

TEST_CASE("zero-step training leaves the adapter at its init") {
    Vocabulary vocab = build_vocabulary({"a photo of a star"});
    TextEncoder enc_a("a", &vocab, 8, 1);
    TextEncoder enc_b("b", &vocab, 8, 2);
    enc_a.set_frozen(true);
    enc_b.set_frozen(true);
    AdapterMap fresh(8, 8, 0);
    AdapterMap zero = train_adapter({"a photo"}, enc_a, enc_b, 0, 0);
    CHECK(zero.checksum() == fresh.checksum());
}
