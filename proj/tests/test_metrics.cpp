#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "bratlab/metrics.hpp"
#include "testutil.hpp"

using namespace bratlab;
using testutil::max_abs_diff;
using testutil::near;

namespace {

Tensor basis(int dim, int axis) {
    Tensor t = Tensor::zeros({dim});
    t.raw()[static_cast<std::size_t>(axis)] = 1.0f;
    return t;
}

Tensor random_vec(Rng& rng, int dim) {
    Tensor t = Tensor::zeros({dim});
    for (std::size_t i = 0; i < t.numel(); ++i) t.raw()[i] = rng.normal();
    return t;
}

float cos_of(const Tensor& a, const Tensor& b) { return cosine_sim(a, b).item(); }

const std::vector<ImageExample>& shared_corpus() {
    static std::vector<ImageExample> corpus = gen_corpus(21, 4000, {}, 32);
    return corpus;
}

ImageProbe& shared_probe() {
    static ImageProbe probe = train_probe(shared_corpus(), 3500, 5);
    return probe;
}

DiffusionStack& tiny_stack() {
    static DiffusionStack stack = [] {
        PretrainOptions o;
        o.corpus_size = 16;
        o.vae_steps = 5;
        o.denoiser_steps = 5;
        o.distill_steps = 5;
        o.adapter_steps = 5;
        o.seed = 3;
        return pretrain_stack(o);
    }();
    return stack;
}

JointEmbedder& shared_joint() {
    static JointEmbedder joint = [] {
        std::vector<ImageExample> slice(shared_corpus().begin(), shared_corpus().begin() + 2000);
        return train_joint(*tiny_stack().enc_a, shared_probe(), slice, 2500, 11);
    }();
    return joint;
}

InversionResult plain_run(int width) {
    InversionResult run;
    run.total_steps = 6;
    run.width = width;
    run.kind = DenoiserKind::mini_unet;
    TokenRecord tok;
    tok.name = "<sks>";
    tok.role = TokenRole::placeholder;
    tok.init_word = "circle";
    Rng rng(99);
    for (int i = 0; i < width; ++i) tok.values.push_back(0.1f * rng.normal());
    run.tokens.push_back(tok);
    return run;
}

}  // namespace

TEST_CASE("set similarity equals the brute force mean over all pairs") {
    CHECK(near(set_similarity({basis(4, 1)}, {basis(4, 1)}), 1.0f, 1e-6f));
    CHECK(near(set_similarity({basis(4, 0)}, {basis(4, 2)}), 0.0f, 1e-6f));

    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Tensor> src, gen;
        for (int i = 0; i < 5; ++i) src.push_back(random_vec(rng, 9));
        for (int i = 0; i < 7; ++i) gen.push_back(random_vec(rng, 9));
        double want = 0.0;
        for (const auto& s : src)
            for (const auto& g : gen) want += cos_of(s, g);
        want /= 35.0;
        CHECK(near(set_similarity(src, gen), static_cast<float>(want), 1e-6f));
    }
}

TEST_CASE("set similarity is permutation and rescale invariant") {
    Rng rng(32);
    std::vector<Tensor> src, gen;
    for (int i = 0; i < 4; ++i) src.push_back(random_vec(rng, 6));
    for (int i = 0; i < 5; ++i) gen.push_back(random_vec(rng, 6));
    const float base = set_similarity(src, gen);

    std::vector<Tensor> src_rev(src.rbegin(), src.rend());
    std::vector<Tensor> gen_rev(gen.rbegin(), gen.rend());
    CHECK(near(set_similarity(src_rev, gen_rev), base, 1e-6f));

    std::vector<Tensor> src_scaled, gen_scaled;
    for (const auto& s : src) src_scaled.push_back(scale(s, 3.7f));
    for (const auto& g : gen) gen_scaled.push_back(scale(g, 0.25f));
    CHECK(near(set_similarity(src_scaled, gen_scaled), base, 1e-5f));

    CHECK_THROWS_AS(set_similarity({}, gen), LabError);
    CHECK_THROWS_AS(set_similarity(src, {}), LabError);
}

TEST_CASE("set consistency averages unordered distinct pairs") {
    std::vector<Tensor> same(4, basis(5, 2));
    CHECK(near(set_consistency(same), 1.0f, 1e-6f));
    CHECK(near(set_consistency({basis(5, 0), basis(5, 1), basis(5, 2)}), 0.0f, 1e-6f));

    Rng rng(33);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Tensor> gen;
        for (int i = 0; i < 6; ++i) gen.push_back(random_vec(rng, 8));
        double want = 0.0;
        for (int i = 0; i < 6; ++i)
            for (int j = i + 1; j < 6; ++j) want += cos_of(gen[i], gen[j]);
        want /= 15.0;
        CHECK(near(set_consistency(gen), static_cast<float>(want), 1e-6f));

        std::vector<Tensor> rev(gen.rbegin(), gen.rend());
        CHECK(near(set_consistency(rev), static_cast<float>(want), 1e-6f));
    }
    CHECK_THROWS_AS(set_consistency({}), LabError);
    CHECK_THROWS_AS(set_consistency({basis(5, 0)}), LabError);
}

TEST_CASE("reports round trip bitwise through the text format") {
    MetricsReport r;
    r.sim = 1.0f / 3.0f;
    r.cons = -0.0f;
    r.content_sim = 1e-30f;
    r.content_cons = 0.9999999f;
    r.style_sim = -0.725f;
    r.style_cons = 3.1415927f;
    r.prompt_sim = -1e-8f;
    r.oracle_acc = 0.625f;
    r.n_images = 48;
    r.n_prompts = 16;

    const std::string path = (std::filesystem::temp_directory_path() / "bratlab_report.txt").string();
    write_report(path, r);
    MetricsReport back = read_report(path);
    CHECK(std::memcmp(&r.sim, &back.sim, sizeof(float)) == 0);
    CHECK(std::memcmp(&r.cons, &back.cons, sizeof(float)) == 0);
    CHECK(std::memcmp(&r.content_sim, &back.content_sim, sizeof(float)) == 0);
    CHECK(std::memcmp(&r.content_cons, &back.content_cons, sizeof(float)) == 0);
    CHECK(std::memcmp(&r.style_sim, &back.style_sim, sizeof(float)) == 0);
    CHECK(std::memcmp(&r.style_cons, &back.style_cons, sizeof(float)) == 0);
    CHECK(std::memcmp(&r.prompt_sim, &back.prompt_sim, sizeof(float)) == 0);
    REQUIRE(back.oracle_acc.has_value());
    CHECK(*back.oracle_acc == 0.625f);
    CHECK(back.n_images == 48);
    CHECK(back.n_prompts == 16);
    std::filesystem::remove(path);

    MetricsReport plain;
    const std::string path2 =
        (std::filesystem::temp_directory_path() / "bratlab_report2.txt").string();
    write_report(path2, plain);
    CHECK_FALSE(read_report(path2).oracle_acc.has_value());
    std::filesystem::remove(path2);

    CHECK_THROWS_AS(read_report("/nonexistent/bratlab/report.txt"), LabError);
}

TEST_CASE("external scorer feeds paths on stdin and reads one score per line") {
    std::vector<std::string> paths = {"a.ppm", "b.ppm", "c.ppm"};
    std::vector<float> scores = external_scores("awk '{ print 0.5 }'", paths);
    REQUIRE(scores.size() == 3);
    for (float s : scores) CHECK(s == 0.5f);

    scores = external_scores("awk '{ print NR * 0.25 }'", paths);
    REQUIRE(scores.size() == 3);
    CHECK(near(scores[1], 0.5f, 1e-6f));

    CHECK_THROWS_AS(external_scores("head -n 1", paths), LabError);  // wrong count
    CHECK_THROWS_AS(external_scores("exit 3", paths), LabError);     // nonzero exit
    CHECK_THROWS_AS(external_scores("", paths), LabError);
    CHECK_THROWS_AS(external_scores("cat", {}), LabError);
}

TEST_CASE("probe validates inputs and refuses untrained embedding") {
    ImageProbe fresh(123);
    Tensor img = Tensor::zeros({3, 32, 32});
    CHECK_THROWS_AS(content_embed(fresh, img), LabError);
    CHECK_THROWS_AS(style_embed(fresh, img), LabError);
    CHECK_THROWS_AS(oracle_accuracy(fresh, {img}, ConceptSpec{}), LabError);

    CHECK_THROWS_AS(fresh.forward(Tensor::zeros({1, 32, 32})), LabError);
    CHECK_THROWS_AS(fresh.forward(Tensor::zeros({3, 30, 32})), LabError);
    CHECK_THROWS_AS(fresh.forward(Tensor::zeros({3, 32})), LabError);

    CHECK(ImageProbe(7).checksum() == ImageProbe(7).checksum());
    CHECK(ImageProbe(7).checksum() != ImageProbe(8).checksum());

    fresh.set_frozen(true);
    Tape tape;
    TrainCtx ctx(tape);
    CHECK_THROWS_AS(fresh.forward(img, &ctx), LabError);
}

TEST_CASE("content and style embeddings are deterministic unit vectors") {
    ImageProbe& probe = shared_probe();
    Rng rng(71);
    Tensor img = render_concept({2, 1, 0, 1}, 32, rng);

    Tensor c1 = content_embed(probe, img);
    Tensor c2 = content_embed(probe, img);
    Tensor s1 = style_embed(probe, img);
    Tensor s2 = style_embed(probe, img);
    REQUIRE(c1.numel() == static_cast<std::size_t>(ImageProbe::kFeatureDim));
    REQUIRE(s1.numel() == static_cast<std::size_t>(ImageProbe::kStyleDim));
    CHECK(max_abs_diff(c1, c2) == 0.0f);
    CHECK(max_abs_diff(s1, s2) == 0.0f);
    CHECK(near(cos_of(c1, c2), 1.0f, 1e-6f));
    CHECK(near(cos_of(s1, s2), 1.0f, 1e-6f));

    auto norm = [](const Tensor& t) {
        double ss = 0.0;
        for (std::size_t i = 0; i < t.numel(); ++i) ss += static_cast<double>(t.at(i)) * t.at(i);
        return std::sqrt(ss);
    };
    CHECK(near(static_cast<float>(norm(c1)), 1.0f, 1e-4f));
    CHECK(near(static_cast<float>(norm(s1)), 1.0f, 1e-4f));
}

TEST_CASE("content embedding ranks a jittered instance above a styled other concept") {
    ImageProbe& probe = shared_probe();
    Rng rng(404);
    int ok = 0, n = 0;
    for (int i = 0; i < 200; ++i) {
        ConceptSpec a{rng.uniform_int(kNumShapes), rng.uniform_int(kNumColors),
                      rng.uniform_int(kNumTextures), rng.uniform_int(kNumBackgrounds)};
        ConceptSpec b{rng.uniform_int(kNumShapes), rng.uniform_int(kNumColors),
                      rng.uniform_int(kNumTextures), rng.uniform_int(kNumBackgrounds)};
        if (a.shape == b.shape && a.color == b.color) continue;
        Rng r1 = rng.fork("a1"), r2 = rng.fork("a2"), r3 = rng.fork("b");
        Tensor anchor = render_concept(a, 32, r1);
        Tensor jitter = render_concept(a, 32, r2);
        Tensor other = apply_style(render_concept(b, 32, r3), rng.uniform_int(num_styles()));
        Tensor ea = content_embed(probe, anchor);
        ok += cos_of(ea, content_embed(probe, jitter)) > cos_of(ea, content_embed(probe, other));
        ++n;
    }
    CHECK(n > 150);
    CHECK(static_cast<float>(ok) / static_cast<float>(n) >= 0.80f);
}

TEST_CASE("shared style outranks shared content on styled pairs") {
    ImageProbe& probe = shared_probe();
    Rng rng(405);
    int ok = 0, n = 0;
    for (int i = 0; i < 200; ++i) {
        int style = rng.uniform_int(num_styles());
        ConceptSpec a{rng.uniform_int(kNumShapes), rng.uniform_int(kNumColors),
                      rng.uniform_int(kNumTextures), rng.uniform_int(kNumBackgrounds)};
        ConceptSpec b{rng.uniform_int(kNumShapes), rng.uniform_int(kNumColors),
                      rng.uniform_int(kNumTextures), rng.uniform_int(kNumBackgrounds)};
        if (a.shape == b.shape && a.color == b.color) continue;
        Rng r1 = rng.fork("p1"), r2 = rng.fork("p2");
        Tensor ia = apply_style(render_concept(a, 32, r1), style);
        Tensor ib = apply_style(render_concept(b, 32, r2), style);
        const float style_cos = cos_of(style_embed(probe, ia), style_embed(probe, ib));
        const float content_cos = cos_of(content_embed(probe, ia), content_embed(probe, ib));
        ok += style_cos > content_cos;
        ++n;
    }
    CHECK(n > 150);
    CHECK(static_cast<float>(ok) / static_cast<float>(n) >= 0.80f);
}

TEST_CASE("oracle accuracy scores direct renders of the planted concept") {
    ImageProbe& probe = shared_probe();
    ConceptSpec planted{0, 1, 0, 0};
    auto inst = gen_subject_instances(planted, 40, 17);
    std::vector<Tensor> imgs;
    for (const auto& ex : inst) imgs.push_back(ex.pixels);
    const float own = oracle_accuracy(probe, imgs, planted);

    ConceptSpec other{2, 3, 0, 0};
    const float foreign = oracle_accuracy(probe, imgs, other);
    CHECK(own > foreign + 0.3f);
    CHECK(foreign <= 0.10f);
    CHECK_THROWS_AS(oracle_accuracy(probe, {}, planted), LabError);
}

TEST_CASE("joint embedder validates widths") {
    CHECK_THROWS_AS(JointEmbedder(0, 8, 1), LabError);
    CHECK_THROWS_AS(JointEmbedder(8, -1, 1), LabError);
    JointEmbedder j(8, 12, 1);
    CHECK_THROWS_AS(j.project_text(Tensor::zeros({9})), LabError);
    CHECK_THROWS_AS(j.project_image(Tensor::zeros({8})), LabError);
    CHECK(j.project_text(Tensor::zeros({8})).numel() ==
          static_cast<std::size_t>(JointEmbedder::kDim));

    ImageProbe& probe = shared_probe();
    Rng rng(5);
    Tensor img = render_concept({0, 0, 0, 0}, 32, rng);
    CHECK_THROWS_AS(prompt_similarity(j, *tiny_stack().enc_a, probe, "a photo", img), LabError);
}

TEST_CASE("joint embedder orders matching pairs above mismatches on held out data") {
    JointEmbedder& joint = shared_joint();
    ImageProbe& probe = shared_probe();
    TextEncoder& enc = *tiny_stack().enc_a;

    std::vector<ImageExample> held;
    const auto& corpus = shared_corpus();
    for (std::size_t i = 0; i < 2000; i += 5) held.push_back(corpus[i]);
    const float acc = joint_ordering_accuracy(joint, enc, probe, held, 61);
    CHECK(acc >= 0.75f);
}

TEST_CASE("prompt similarity is deterministic, bounded, and remaps foreign pseudowords") {
    JointEmbedder& joint = shared_joint();
    ImageProbe& probe = shared_probe();
    TextEncoder& enc = *tiny_stack().enc_a;

    Rng rng(81);
    for (int i = 0; i < 50; ++i) {
        const auto& ex = shared_corpus()[static_cast<std::size_t>(
            rng.uniform_int(static_cast<int>(shared_corpus().size())))];
        const float s = prompt_similarity(joint, enc, probe, ex.caption, ex.pixels);
        CHECK(s >= -1.0f);
        CHECK(s <= 1.0f);
        CHECK(prompt_similarity(joint, enc, probe, ex.caption, ex.pixels) == s);
    }

    // a pseudoword the encoder never learned reads as <unk>
    enc.vocab().add_pseudoword("<zzz>");
    Rng rr(82);
    Tensor img = render_concept({1, 2, 0, 1}, 32, rr);
    const float with_foreign = prompt_similarity(joint, enc, probe, "a photo of a <zzz>", img);
    const float with_unk = prompt_similarity(joint, enc, probe, "a photo of a <unk>", img);
    CHECK(near(with_foreign, with_unk, 1e-6f));
}

TEST_CASE("evaluate run generates per template, scores, and is reproducible") {
    DiffusionStack& stack = tiny_stack();
    ImageProbe& probe = shared_probe();
    JointEmbedder& joint = shared_joint();

    InversionResult run = plain_run(stack.enc_b->width());

    const auto dir = std::filesystem::temp_directory_path() / "bratlab_eval_imgs";
    std::filesystem::remove_all(dir);

    EvalContext ev;
    ev.stack = &stack;
    ev.probe = &probe;
    ev.joint = &joint;
    ev.sources = gen_subject_instances({0, 0, 0, 0}, 3, 42);
    ev.planted = ConceptSpec{0, 0, 0, 0};
    ev.task = Task::subject;
    ev.n_per_prompt = 1;
    ev.inference_steps = 6;
    ev.seed = 1234;
    ev.image_dir = dir.string();

    MetricsReport a = evaluate_run(run, ev);
    CHECK(a.n_prompts == 16);
    CHECK(a.n_images == 16);
    REQUIRE(a.oracle_acc.has_value());
    for (float v : {a.sim, a.cons, a.content_sim, a.content_cons, a.style_sim, a.style_cons,
                    a.prompt_sim}) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }
    CHECK(*a.oracle_acc >= 0.0f);
    CHECK(*a.oracle_acc <= 1.0f);

    int ppm = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        ppm += e.path().extension() == ".ppm";
    CHECK(ppm == 16);
    CHECK(std::filesystem::exists(dir / "p00_s00.ppm"));
    CHECK(std::filesystem::exists(dir / "p15_s00.ppm"));

    ev.image_dir.clear();
    MetricsReport b = evaluate_run(run, ev);
    CHECK(report_text(a) == report_text(b));

    EvalContext bad = ev;
    bad.sources.clear();
    CHECK_THROWS_AS(evaluate_run(run, bad), LabError);
    bad = ev;
    bad.probe = nullptr;
    CHECK_THROWS_AS(evaluate_run(run, bad), LabError);
    bad = ev;
    bad.n_per_prompt = 0;
    CHECK_THROWS_AS(evaluate_run(run, bad), LabError);
    std::filesystem::remove_all(dir);
}
