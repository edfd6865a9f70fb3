#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "bratlab/inversion.hpp"
#include "testutil.hpp"

using namespace bratlab;
using testutil::max_abs_diff;
using testutil::near;

namespace {

Tensor basis(int dim, int axis, float v = 1.0f) {
    Tensor t = Tensor::zeros({dim});
    t.raw()[static_cast<std::size_t>(axis)] = v;
    return t;
}

DiffusionStack& tiny_stack() {
    static DiffusionStack stack = [] {
        PretrainOptions o;
        o.corpus_size = 16;
        o.vae_steps = 5;
        o.denoiser_steps = 5;
        o.distill_steps = 5;
        o.adapter_steps = 5;
        o.train_unet = true;
        o.train_dit = true;
        o.seed = 3;
        return pretrain_stack(o);
    }();
    return stack;
}

std::vector<ImageExample> tiny_images() {
    return gen_subject_instances(ConceptSpec{1, 2, 0, 0}, 4, 11);
}

InversionConfig tiny_config(StrategyKind kind) {
    InversionConfig cfg;
    cfg.strategy.kind = kind;
    cfg.strategy.k = 5;
    cfg.epochs = 2;
    cfg.grad_accum = 2;
    cfg.init_word = "circle";
    cfg.seed = 21;
    return cfg;
}

std::filesystem::path tmp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("strategy names round trip") {
    for (StrategyKind k : {StrategyKind::default_, StrategyKind::multi_k, StrategyKind::negative,
                           StrategyKind::bonus, StrategyKind::triple_bonus})
        CHECK(strategy_from_name(strategy_name(k)) == k);
    CHECK_THROWS_AS(strategy_from_name("fancy"), LabError);

    TokenStrategy s;
    s.kind = StrategyKind::triple_bonus;
    CHECK(s.bonus_count() == 3);
    CHECK(s.trainable_count() == 4);
    s.kind = StrategyKind::bonus;
    CHECK(s.bonus_count() == 1);
    CHECK(s.trainable_count() == 2);
    s.kind = StrategyKind::multi_k;
    s.k = 7;
    CHECK(s.bonus_count() == 0);
    CHECK(s.trainable_count() == 7);
    s.kind = StrategyKind::negative;
    CHECK(s.trainable_count() == 2);
}

TEST_CASE("pair orthogonality penalty takes its pinned values") {
    Tensor v = basis(4, 0);
    Tensor w = basis(4, 1);
    CHECK(near(spare_loss({v, v}, 0.01f).item(), 0.01f, 1e-7f));
    CHECK(near(spare_loss({v, scale(v, -1.0f)}, 0.01f).item(), 0.01f, 1e-7f));
    CHECK(spare_loss({v, w}, 0.01f).item() == 0.0f);

    std::vector<Tensor> collinear = {v, scale(v, 2.0f), scale(v, -1.0f), scale(v, -4.0f)};
    CHECK(near(spare_loss(collinear, 0.01f).item(), 0.06f, 1e-7f));

    CHECK_THROWS_AS(spare_loss({v}, 0.01f), LabError);
    CHECK_THROWS_AS(spare_loss({v, w}, -0.1f), LabError);
    CHECK_THROWS_AS(spare_loss({v, Tensor::zeros({4})}, 0.01f), LabError);
}

TEST_CASE("the penalty only sees directions") {
    Rng rng(5);
    Tensor a = Tensor::from({8}, rng.normal_vec(8));
    Tensor b = Tensor::from({8}, rng.normal_vec(8));
    float base = spare_loss({a, b}, 0.01f).item();
    float scaled = spare_loss({scale(a, 2.0f), scale(b, 0.25f)}, 0.01f).item();
    CHECK(near(base, scaled, 1e-6f));
}

TEST_CASE("descending the penalty alone orthogonalizes a small set") {
    Rng rng(6);
    std::vector<Tensor> vecs;
    for (int i = 0; i < 3; ++i) vecs.push_back(Tensor::from({8}, rng.normal_vec(8)));
    Sgd opt(0.5f);
    std::vector<Tensor*> slots;
    for (auto& v : vecs) slots.push_back(&v);
    for (int step = 0; step < 1500; ++step) {
        Tape tape;
        std::vector<Tensor> leaves;
        for (auto& v : vecs) leaves.push_back(tape.leaf(v));
        GradMap grads = tape.backward(spare_loss(leaves, 1.0f));
        std::vector<Tensor> g;
        for (const auto& leaf : leaves) g.push_back(grads.at(leaf));
        opt.step(slots, g);
    }
    for (std::size_t i = 0; i < vecs.size(); ++i)
        for (std::size_t j = i + 1; j < vecs.size(); ++j)
            CHECK(std::fabs(cosine_sim(vecs[i], vecs[j]).item()) < 0.01f);
}

TEST_CASE("negative combination interpolates past the positive branch") {
    Rng rng(7);
    Tensor a = Tensor::from({2, 3}, rng.normal_vec(6));
    Tensor b = Tensor::from({2, 3}, rng.normal_vec(6));

    CHECK(max_abs_diff(negative_combine(a, b, 1.0f), a) == 0.0f);
    CHECK(max_abs_diff(negative_combine(a, b, 0.0f), b) == 0.0f);

    Tensor g5 = negative_combine(a, b, 5.0f);
    for (std::size_t i = 0; i < a.numel(); ++i)
        CHECK(near(g5.at(i), b.at(i) + 5.0f * (a.at(i) - b.at(i)), 1e-5f));

    // affine in gamma: midpoint of f(0) and f(2) is f(1)
    Tensor lo = negative_combine(a, b, 0.0f);
    Tensor hi = negative_combine(a, b, 2.0f);
    Tensor mid = scale(add(lo, hi), 0.5f);
    CHECK(max_abs_diff(mid, a) < 1e-6f);

    CHECK_THROWS_AS(negative_combine(a, Tensor::zeros({3, 2}), 5.0f), LabError);
}

TEST_CASE("per-step token index walks the ladder in order") {
    CHECK(token_for_step(0, 50, 10) == 0);
    CHECK(token_for_step(4, 50, 10) == 0);
    CHECK(token_for_step(5, 50, 10) == 1);
    CHECK(token_for_step(49, 50, 50) == 49);
    CHECK(token_for_timestep(999, 1000, 10) == 9);
    CHECK(token_for_timestep(0, 1000, 10) == 0);

    for (int k : {1, 3, 7, 10, 50}) {
        int prev = 0;
        std::vector<int> seen(static_cast<std::size_t>(k), 0);
        for (int step = 0; step < 50; ++step) {
            int idx = token_for_step(step, 50, k);
            CHECK(idx >= prev);
            prev = idx;
            seen[static_cast<std::size_t>(idx)] += 1;
        }
        for (int count : seen) CHECK(count > 0);
        CHECK(prev == k - 1);
    }

    CHECK_THROWS_AS(token_for_step(-1, 50, 10), LabError);
    CHECK_THROWS_AS(token_for_step(50, 50, 10), LabError);
    CHECK_THROWS_AS(token_for_step(0, 50, 0), LabError);
    CHECK_THROWS_AS(token_for_step(0, 50, 51), LabError);
    CHECK_THROWS_AS(token_for_step(0, 0, 1), LabError);
}

TEST_CASE("token strings and name lists per strategy") {
    TokenStrategy s;
    s.kind = StrategyKind::default_;
    CHECK(token_string(s) == "<sks>");
    CHECK(strategy_token_names(s) == std::vector<std::string>{"<sks>"});
    CHECK_FALSE(negative_prompt(s).has_value());

    s.kind = StrategyKind::negative;
    CHECK(token_string(s) == "<sks>");
    CHECK(strategy_token_names(s) == std::vector<std::string>{"<sks>", "<neg>"});
    CHECK(negative_prompt(s) == "<neg>");

    s.kind = StrategyKind::bonus;
    CHECK(token_string(s) == "<sks> <fkf>");
    CHECK(strategy_token_names(s) == std::vector<std::string>{"<sks>", "<fkf>"});

    s.kind = StrategyKind::triple_bonus;
    CHECK(token_string(s) == "<sks> <fkf1> <fkf2> <fkf3>");
    CHECK(strategy_token_names(s) ==
          std::vector<std::string>{"<sks>", "<fkf1>", "<fkf2>", "<fkf3>"});

    s.kind = StrategyKind::multi_k;
    s.k = 3;
    CHECK(token_string(s, 2) == "<sks_k2>");
    CHECK(strategy_token_names(s) ==
          std::vector<std::string>{"<sks_k0>", "<sks_k1>", "<sks_k2>"});
    CHECK_THROWS_AS(token_string(s, 3), LabError);
    CHECK_THROWS_AS(token_string(s, -1), LabError);
}

TEST_CASE("prompt building substitutes the strategy tokens") {
    TokenStrategy s;
    CHECK(build_prompt("a photo of a {}", s, Phase::train) == "a photo of a <sks>");

    s.kind = StrategyKind::bonus;
    CHECK(build_prompt("a photo of a {}", s, Phase::eval) == "a photo of a <sks> <fkf>");

    s.kind = StrategyKind::multi_k;
    s.k = 10;
    CHECK(build_prompt("a photo of a {}", s, Phase::eval, 5) == "a photo of a <sks_k1>");
    CHECK(build_prompt("{} up close", s, Phase::eval, 49) == "<sks_k9> up close");
    CHECK_THROWS_AS(build_prompt("a photo of a {}", s, Phase::eval), LabError);

    s.kind = StrategyKind::default_;
    CHECK_THROWS_AS(build_prompt("no placeholder here", s, Phase::train), LabError);
}

TEST_CASE("registering a strategy seeds every token from the init word") {
    Vocabulary vocab = build_vocabulary(corpus_vocab_texts());
    TextEncoder enc("probe", &vocab, 24, 77);

    TokenStrategy s;
    s.kind = StrategyKind::triple_bonus;
    auto entries = register_strategy_tokens(enc, s, "star");
    REQUIRE(entries.size() == 4);
    CHECK(entries[0]->role == TokenRole::placeholder);
    for (int i = 1; i < 4; ++i) CHECK(entries[static_cast<std::size_t>(i)]->role == TokenRole::bonus);
    Tensor row = enc.table_row("star");
    for (auto* e : entries) CHECK(max_abs_diff(e->embedding, row) == 0.0f);
    enc.clear_pseudowords();

    s.kind = StrategyKind::negative;
    auto neg_entries = register_strategy_tokens(enc, s, "circle");
    REQUIRE(neg_entries.size() == 2);
    CHECK(neg_entries[0]->role == TokenRole::placeholder);
    CHECK(neg_entries[1]->role == TokenRole::negative);
    enc.clear_pseudowords();

    s.kind = StrategyKind::multi_k;
    s.k = 3;
    auto multi = register_strategy_tokens(enc, s, "circle");
    REQUIRE(multi.size() == 3);
    for (auto* e : multi) CHECK(e->role == TokenRole::per_step);
    enc.clear_pseudowords();
}

TEST_CASE("embedding files round trip bitwise") {
    InversionResult run;
    run.strategy.kind = StrategyKind::negative;
    run.strategy.gamma = 7.25f;
    run.strategy.lambda = 0.01f;
    run.total_steps = 50;
    run.width = 4;
    run.use_adapter = true;
    run.kind = DenoiserKind::mini_dit;
    TokenRecord a;
    a.name = "<sks>";
    a.role = TokenRole::placeholder;
    a.init_word = "star";
    a.values = {1.0f / 3.0f, -0.0f, 1e-30f, std::nextafterf(1.0f, 2.0f)};
    TokenRecord b;
    b.name = "<neg>";
    b.role = TokenRole::negative;
    b.init_word = "star";
    b.values = {-1e8f, 0.1f, 2.5f, -3.0f};
    run.tokens = {a, b};

    auto path = tmp_file("bratlab_test_tokens.json");
    save_embeddings(path.string(), run);
    InversionResult back = load_embeddings(path.string());

    CHECK(back.strategy.kind == StrategyKind::negative);
    CHECK(back.strategy.gamma == 7.25f);
    CHECK(back.strategy.lambda == 0.01f);
    CHECK(back.total_steps == 50);
    CHECK(back.width == 4);
    CHECK(back.use_adapter);
    CHECK(back.kind == DenoiserKind::mini_dit);
    REQUIRE(back.tokens.size() == 2);
    CHECK(back.tokens[0].name == "<sks>");
    CHECK(back.tokens[0].role == TokenRole::placeholder);
    CHECK(back.tokens[1].init_word == "star");
    for (std::size_t i = 0; i < 2; ++i)
        CHECK(std::memcmp(back.tokens[i].values.data(), run.tokens[i].values.data(),
                          4 * sizeof(float)) == 0);

    // identical saves produce identical bytes
    auto path2 = tmp_file("bratlab_test_tokens2.json");
    save_embeddings(path2.string(), run);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    CHECK(!s1.empty());

    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("embedding files reject version and shape drift") {
    auto path = tmp_file("bratlab_test_bad_tokens.json");
    {
        std::ofstream f(path);
        f << R"({"version": 2, "strategy": "default", "lambda": "0.01", "total_steps": 50,)"
          << R"( "width": 2, "use_adapter": false, "tokens": []})";
    }
    CHECK_THROWS_AS(load_embeddings(path.string()), LabError);
    {
        std::ofstream f(path);
        f << R"({"version": 1, "strategy": "default", "lambda": "0.01", "total_steps": 50,)"
          << R"( "width": 2, "use_adapter": false, "tokens": [{"name": "<sks>",)"
          << R"( "role": "placeholder", "init_word": "star", "dim": 3, "values": ["1", "2"]}]})";
    }
    CHECK_THROWS_AS(load_embeddings(path.string()), LabError);
    {
        std::ofstream f(path);
        f << R"({"version": 1, "strategy": "default", "lambda": "0.01", "total_steps": 50,)"
          << R"( "width": 2, "use_adapter": false, "tokens": []})";
    }
    CHECK_THROWS_AS(load_embeddings(path.string()), LabError);
    CHECK_THROWS_AS(load_embeddings("/nonexistent/tokens.json"), LabError);
    std::filesystem::remove(path);
}

TEST_CASE("training moves only the pseudowords and leaves the stack untouched") {
    DiffusionStack& stack = tiny_stack();
    auto images = tiny_images();

    const auto vae_sum = stack.vae->checksum();
    const auto enc_a_sum = stack.enc_a->checksum();
    const auto enc_b_sum = stack.enc_b->checksum();
    const auto adapter_sum = stack.adapter->checksum();
    const auto unet_sum = stack.denoiser(DenoiserKind::mini_unet).checksum();
    const auto dit_sum = stack.denoiser(DenoiserKind::mini_dit).checksum();

    for (StrategyKind kind : {StrategyKind::default_, StrategyKind::multi_k,
                              StrategyKind::negative, StrategyKind::bonus,
                              StrategyKind::triple_bonus}) {
        InversionConfig cfg = tiny_config(kind);
        InversionResult run = train_inversion(stack, images, cfg);
        CHECK(run.tokens.size() == static_cast<std::size_t>(cfg.strategy.trainable_count()));
        CHECK(run.trace.size() == 2);
        CHECK(run.width == stack.enc_b->width());

        CHECK(stack.vae->checksum() == vae_sum);
        CHECK(stack.enc_a->checksum() == enc_a_sum);
        CHECK(stack.enc_b->checksum() == enc_b_sum);
        CHECK(stack.adapter->checksum() == adapter_sum);
        CHECK(stack.denoiser(DenoiserKind::mini_unet).checksum() == unet_sum);
        CHECK(stack.denoiser(DenoiserKind::mini_dit).checksum() == dit_sum);
        stack.enc_b->clear_pseudowords();
    }
}

TEST_CASE("training is seed deterministic and actually moves the tokens") {
    DiffusionStack& stack = tiny_stack();
    auto images = tiny_images();
    InversionConfig cfg = tiny_config(StrategyKind::bonus);

    InversionResult r1 = train_inversion(stack, images, cfg);
    stack.enc_b->clear_pseudowords();
    InversionResult r2 = train_inversion(stack, images, cfg);
    stack.enc_b->clear_pseudowords();
    REQUIRE(r1.tokens.size() == r2.tokens.size());
    for (std::size_t i = 0; i < r1.tokens.size(); ++i)
        CHECK(std::memcmp(r1.tokens[i].values.data(), r2.tokens[i].values.data(),
                          r1.tokens[i].values.size() * sizeof(float)) == 0);
    REQUIRE(r1.trace.size() == r2.trace.size());
    for (std::size_t i = 0; i < r1.trace.size(); ++i) {
        CHECK(r1.trace[i].loss_ldm == r2.trace[i].loss_ldm);
        CHECK(r1.trace[i].loss_spare == r2.trace[i].loss_spare);
    }
    for (const auto& st : r1.trace) CHECK(st.loss_spare > 0.0f);

    InversionConfig frozen_cfg = cfg;
    frozen_cfg.epochs = 0;
    InversionResult init = train_inversion(stack, images, frozen_cfg);
    stack.enc_b->clear_pseudowords();
    bool moved = false;
    for (std::size_t i = 0; i < r1.tokens.size(); ++i)
        if (std::memcmp(r1.tokens[i].values.data(), init.tokens[i].values.data(),
                        r1.tokens[i].values.size() * sizeof(float)) != 0)
            moved = true;
    CHECK(moved);
}

TEST_CASE("the negative strategy trains its negative token too") {
    DiffusionStack& stack = tiny_stack();
    auto images = tiny_images();
    InversionConfig cfg = tiny_config(StrategyKind::negative);
    InversionResult run = train_inversion(stack, images, cfg);
    stack.enc_b->clear_pseudowords();

    InversionConfig zero = cfg;
    zero.epochs = 0;
    InversionResult init = train_inversion(stack, images, zero);
    stack.enc_b->clear_pseudowords();

    REQUIRE(run.tokens.size() == 2);
    CHECK(run.tokens[1].name == "<neg>");
    CHECK(std::memcmp(run.tokens[1].values.data(), init.tokens[1].values.data(),
                      run.tokens[1].values.size() * sizeof(float)) != 0);
}

TEST_CASE("the adapter path trains in the narrow embedding space") {
    DiffusionStack& stack = tiny_stack();
    auto images = tiny_images();
    InversionConfig cfg = tiny_config(StrategyKind::default_);
    cfg.use_adapter = true;
    const auto enc_a_sum = stack.enc_a->checksum();
    const auto adapter_sum = stack.adapter->checksum();
    InversionResult run = train_inversion(stack, images, cfg);
    stack.enc_a->clear_pseudowords();
    CHECK(run.width == stack.enc_a->width());
    CHECK(run.use_adapter);
    CHECK(stack.enc_a->checksum() == enc_a_sum);
    CHECK(stack.adapter->checksum() == adapter_sum);
}

TEST_CASE("training rejects bad configurations") {
    DiffusionStack& stack = tiny_stack();
    auto images = tiny_images();

    InversionConfig cfg = tiny_config(StrategyKind::default_);
    CHECK_THROWS_AS(train_inversion(stack, {}, cfg), LabError);

    InversionConfig no_init = cfg;
    no_init.init_word = "";
    CHECK_THROWS_AS(train_inversion(stack, images, no_init), LabError);

    InversionConfig bad_k = tiny_config(StrategyKind::multi_k);
    bad_k.strategy.k = 51;
    CHECK_THROWS_AS(train_inversion(stack, images, bad_k), LabError);

    stack.enc_b->set_frozen(false);
    CHECK_THROWS_AS(train_inversion(stack, images, cfg), LabError);
    stack.enc_b->set_frozen(true);
    stack.enc_b->clear_pseudowords();
}

TEST_CASE("a poisoned weight aborts with the step position") {
    DiffusionStack& stack = tiny_stack();
    auto images = tiny_images();
    InversionConfig cfg = tiny_config(StrategyKind::default_);

    ParamStore& store = stack.denoiser(DenoiserKind::mini_unet).params();
    Tensor& w = store.value(0);
    const float saved = w.at(0);
    w.raw()[0] = std::numeric_limits<float>::infinity();

    bool threw = false;
    try {
        train_inversion(stack, images, cfg);
    } catch (const LabError& e) {
        threw = true;
        CHECK(std::string(e.what()).find("epoch 0 micro 0") != std::string::npos);
    }
    CHECK(threw);
    w.raw()[0] = saved;
    stack.enc_b->clear_pseudowords();
}

TEST_CASE("installed tokens drive per-step conditioning") {
    DiffusionStack& stack = tiny_stack();
    auto images = tiny_images();
    InversionConfig cfg = tiny_config(StrategyKind::negative);
    InversionResult run = train_inversion(stack, images, cfg);
    stack.enc_b->clear_pseudowords();

    auto path = tmp_file("bratlab_test_install.json");
    save_embeddings(path.string(), run);
    InversionResult loaded = load_embeddings(path.string());
    std::filesystem::remove(path);

    CHECK_THROWS_AS(install_tokens(*stack.enc_a, loaded), LabError);  // width 48 vs 64

    auto installed = install_tokens(*stack.enc_b, loaded);
    REQUIRE(installed.size() == 2);
    CHECK(max_abs_diff(installed[0]->embedding, Tensor::from({run.width}, run.tokens[0].values)) ==
          0.0f);

    CondProvider provider =
        make_cond_provider(stack, loaded.strategy, "a photo of a {}", false, 50);
    StepCond sc = provider(0);
    CHECK(sc.pos.emb.dim(0) == Vocabulary::kPromptLen);
    CHECK(sc.pos.emb.dim(1) == stack.enc_b->width());
    REQUIRE(sc.neg.has_value());
    CHECK(sc.gamma == loaded.strategy.gamma);
    CHECK(max_abs_diff(sc.pos.emb, sc.neg->emb) > 0.0f);
    stack.enc_b->clear_pseudowords();

    // per-step strings change the conditioning only across block boundaries
    InversionConfig mcfg = tiny_config(StrategyKind::multi_k);
    InversionResult mrun = train_inversion(stack, images, mcfg);
    stack.enc_b->clear_pseudowords();
    install_tokens(*stack.enc_b, mrun);
    CondProvider mp = make_cond_provider(stack, mrun.strategy, "a photo of a {}", false, 50);
    CHECK(max_abs_diff(mp(0).pos.emb, mp(9).pos.emb) == 0.0f);
    CHECK(max_abs_diff(mp(0).pos.emb, mp(10).pos.emb) > 0.0f);
    stack.enc_b->clear_pseudowords();
}

TEST_CASE("run logs append with a single header") {
    auto path = tmp_file("bratlab_test_runlog.csv");
    std::filesystem::remove(path);
    std::vector<EpochStats> trace = {{0, 0.5f, 0.01f, 0.9f}, {1, 0.4f, 0.009f, 0.5f}};
    append_run_log(path.string(), trace);
    append_run_log(path.string(), trace);
    std::ifstream f(path);
    std::string line;
    int lines = 0, headers = 0;
    while (std::getline(f, line)) {
        ++lines;
        if (line.rfind("epoch,", 0) == 0) ++headers;
    }
    CHECK(lines == 5);
    CHECK(headers == 1);
    std::filesystem::remove(path);
}
