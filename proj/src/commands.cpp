#include "bratlab/commands.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <ostream>

#include "bratlab/gradcheck.hpp"
#include "bratlab/inversion.hpp"
#include "bratlab/metrics.hpp"
#include "bratlab/serialize.hpp"

namespace bratlab {

namespace {

std::vector<std::string> name_words(const std::string& name) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : name) {
        if (ch == '_' || std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) words.push_back(cur);
            cur.clear();
        } else {
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

std::optional<int> match_shape(const std::string& w) {
    for (int i = 0; i < kNumShapes; ++i)
        if (w == shape_name(i)) return i;
    return std::nullopt;
}

std::optional<int> match_color(const std::string& w) {
    for (int i = 0; i < kNumColors; ++i)
        if (w == color_name(i)) return i;
    return std::nullopt;
}

std::optional<int> match_texture(const std::string& w) {
    for (int i = 0; i < kNumTextures; ++i)
        if (w == texture_adjective(i)) return i;
    return std::nullopt;
}

std::optional<int> match_background(const std::string& w) {
    for (int i = 0; i < kNumBackgrounds; ++i)
        if (w == background_name(i)) return i;
    return std::nullopt;
}

std::optional<int> match_style(const std::string& w) {
    for (int i = 0; i < num_styles(); ++i)
        if (w == style_name(i)) return i;
    return std::nullopt;
}

// The images a run trains on / is scored against, plus the planted concept
// when the dataset is procedural.
struct ResolvedDataset {
    std::vector<ImageExample> images;
    std::optional<ConceptSpec> planted;
    std::string init_word;
};

ResolvedDataset resolve_dataset(const RunConfig& cfg) {
    if (cfg.dataset.empty())
        throw LabError("no dataset given (folder path or concept name)");
    if (std::filesystem::is_directory(cfg.dataset)) {
        ResolvedDataset out;
        out.images = load_folder(cfg.dataset, cfg.resolution);
        out.init_word = normalize_label(std::filesystem::path(cfg.dataset).filename().string());
        return out;
    }
    std::uint64_t seed = Rng(cfg.seed).fork("dataset").next_u64();
    if (cfg.task == "style") {
        auto words = name_words(cfg.dataset);
        std::optional<int> style;
        for (const auto& w : words)
            if (auto s = match_style(w)) style = s;
        if (!style)
            throw LabError("unknown style dataset '" + cfg.dataset + "'");
        ResolvedDataset out;
        out.images = gen_style_instances(*style, 1, seed, cfg.resolution);
        out.init_word = style_name(*style);
        return out;
    }
    auto concept_spec = parse_concept(cfg.dataset);
    if (!concept_spec)
        throw LabError("dataset '" + cfg.dataset +
                       "' is neither a folder nor a recognizable concept name");
    ResolvedDataset out;
    out.images = gen_subject_instances(*concept_spec, 3, seed, cfg.resolution);
    out.planted = *concept_spec;
    out.init_word = normalize_label(cfg.dataset);
    return out;
}

TokenStrategy strategy_of(const RunConfig& cfg) {
    TokenStrategy s;
    s.kind = strategy_from_name(cfg.strategy);
    s.k = cfg.k;
    s.gamma = cfg.gamma;
    s.lambda = cfg.lambda;
    return s;
}

std::string run_log_path(const std::string& embeddings_path) {
    std::filesystem::path p(embeddings_path);
    return (p.parent_path() / "run_log.csv").string();
}

}  // namespace

std::optional<ConceptSpec> parse_concept(const std::string& name) {
    auto words = name_words(name);
    if (words.empty()) return std::nullopt;
    ConceptSpec c{-1, -1, 0, 0};
    for (std::size_t i = 0; i < words.size(); ++i) {
        const std::string& w = words[i];
        if (w == "on" || w == "a" || w == "photo" || w == "of") continue;
        if (auto s = match_shape(w)) {
            c.shape = *s;
        } else if (auto col = match_color(w)) {
            c.color = *col;
        } else if (auto t = match_texture(w)) {
            c.texture = *t;
        } else if (auto b = match_background(w)) {
            c.background = *b;
        } else {
            return std::nullopt;
        }
    }
    if (c.shape < 0 || c.color < 0) return std::nullopt;
    return c;
}

std::vector<HoldoutRule> parse_holdout(const std::string& text) {
    std::vector<HoldoutRule> rules;
    for (const auto& w : name_words(text)) {
        HoldoutRule r;
        if (auto s = match_shape(w)) {
            r.shape = *s;
        } else if (auto c = match_color(w)) {
            r.color = *c;
        } else if (auto t = match_texture(w)) {
            r.texture = *t;
        } else if (auto b = match_background(w)) {
            r.background = *b;
        } else {
            throw LabError("holdout: unknown attribute word '" + w + "'");
        }
        rules.push_back(r);
    }
    return rules;
}

void cmd_pretrain(const RunConfig& cfg, std::ostream& out) {
    std::vector<HoldoutRule> holdout = parse_holdout(cfg.holdout);

    PretrainOptions opts;
    opts.corpus_size = cfg.corpus_size;
    opts.holdout = holdout;
    opts.res = cfg.resolution;
    opts.denoiser_steps = cfg.pretrain_steps;
    DenoiserKind kind = denoiser_kind_from_name(cfg.denoiser);
    opts.train_unet = kind == DenoiserKind::mini_unet;
    opts.train_dit = kind == DenoiserKind::mini_dit;
    opts.seed = cfg.seed;
    opts.verbose = true;

    out << "pretraining stack (corpus " << opts.corpus_size << ", " << cfg.denoiser << ")\n";
    DiffusionStack stack = pretrain_stack(opts);

    out << "training oracle probe (corpus " << cfg.probe_corpus_size << ", " << cfg.probe_steps
        << " steps)\n";
    auto probe_corpus =
        gen_corpus(Rng(cfg.seed).fork("probe_corpus").next_u64(), cfg.probe_corpus_size, holdout,
                   cfg.resolution);
    // decoder-blurred copies keep the probe readable on sampled images
    const std::size_t plain_count = probe_corpus.size();
    for (std::size_t i = 0; i < plain_count; i += 4) {
        if (!probe_corpus[i].spec) continue;
        ImageExample copy = probe_corpus[i];
        copy.pixels = stack.vae->decode(stack.vae->encode(copy.pixels));
        probe_corpus.push_back(std::move(copy));
    }
    ImageProbe probe = train_probe(probe_corpus, cfg.probe_steps,
                                   Rng(cfg.seed).fork("probe").next_u64(), true);

    out << "training joint embedder (" << cfg.joint_steps << " steps)\n";
    auto joint_corpus = gen_corpus(Rng(cfg.seed).fork("joint_corpus").next_u64(),
                                   std::min(cfg.probe_corpus_size, 2000), holdout, cfg.resolution);
    JointEmbedder joint = train_joint(*stack.enc_a, probe, joint_corpus, cfg.joint_steps,
                                      Rng(cfg.seed).fork("joint").next_u64(), true);

    std::filesystem::path model(cfg.model());
    if (model.has_parent_path()) std::filesystem::create_directories(model.parent_path());
    save_model(model.string(), stack, &probe, &joint);
    out << "wrote " << model.string() << "\n";

    // quality bar: sample from held-out captions, check the probe agrees
    auto bar_corpus = gen_corpus(Rng(cfg.seed).fork("bar").next_u64(), 400, holdout, cfg.resolution);
    int n = 0, hits = 0;
    for (const auto& ex : bar_corpus) {
        if (!ex.spec || ex.style_id >= 0) continue;
        if (n >= 64) break;
        Encoding cond = stack.enc_b->encode_prompt(ex.caption);
        CondProvider provider = [&cond](int) { return StepCond{cond, std::nullopt, 1.0f}; };
        Tensor img = sample_image(stack, kind, provider, cfg.inference_steps,
                                  sampler_from_name(cfg.sampler),
                                  Rng(cfg.seed).fork("bar_img").fork(std::to_string(n)).next_u64());
        ConceptSpec pred = probe.predict(img);
        hits += pred.shape == ex.spec->shape;
        hits += pred.color == ex.spec->color;
        ++n;
    }
    float acc = n ? static_cast<float>(hits) / static_cast<float>(2 * n) : 0.0f;
    out << "held-out caption sampling: oracle attribute accuracy " << acc << " over " << n
        << " samples (quality bar 0.60)\n";
}

void cmd_invert(const RunConfig& cfg, std::ostream& out) {
    LoadedModel model = load_model(cfg.model());
    ResolvedDataset data = resolve_dataset(cfg);
    if (data.images.empty() || data.images.size() > 5)
        throw LabError("inversion expects 1-5 images, got " +
                       std::to_string(data.images.size()));

    InversionConfig icfg;
    icfg.strategy = strategy_of(cfg);
    icfg.task = task_from_name(cfg.task);
    icfg.lr = cfg.lr;
    icfg.epochs = cfg.epochs();
    icfg.grad_accum = cfg.grad_accum;
    icfg.max_grad_norm = cfg.max_grad_norm;
    icfg.total_steps = cfg.inference_steps;
    icfg.kind = denoiser_kind_from_name(cfg.denoiser);
    icfg.use_adapter = cfg.use_adapter;
    icfg.init_word = data.init_word;
    icfg.seed = cfg.seed;
    icfg.verbose = true;

    out << "inverting '" << cfg.dataset << "' (" << cfg.strategy << ", " << icfg.epochs
        << " epochs, init '" << icfg.init_word << "')\n";
    InversionResult run = train_inversion(model.stack, data.images, icfg);

    std::string out_path = cfg.out_path.empty() ? cfg.embeddings() : cfg.out_path;
    std::filesystem::path p(out_path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    save_embeddings(out_path, run);
    append_run_log(run_log_path(out_path), run.trace);
    if (!run.trace.empty())
        out << "final loss " << run.trace.back().loss_ldm << " (spare "
            << run.trace.back().loss_spare << ")\n";
    out << "wrote " << out_path << "\n";
}

void cmd_generate(const RunConfig& cfg, const std::string& prompt_or_template, int count,
                  std::ostream& out) {
    if (count < 1) throw LabError("generate: count must be >= 1");
    LoadedModel model = load_model(cfg.model());
    InversionResult run = load_embeddings(cfg.embeddings());

    int prompt_index = 0;
    std::string tmpl;
    bool is_index = !prompt_or_template.empty() &&
                    prompt_or_template.find_first_not_of("0123456789") == std::string::npos;
    if (is_index) {
        const TemplateSet& templates = get_templates(task_from_name(cfg.task), Phase::eval);
        prompt_index = std::stoi(prompt_or_template);
        if (prompt_index < 0 || prompt_index >= static_cast<int>(templates.templates.size()))
            throw LabError("template index out of range (have " +
                           std::to_string(templates.templates.size()) + ")");
        tmpl = templates.templates[static_cast<std::size_t>(prompt_index)];
    } else {
        tmpl = prompt_or_template;
        if (tmpl.find("{}") == std::string::npos)
            throw LabError("prompt must contain the placeholder \"{}\"");
    }

    DiffusionStack& stack = model.stack;
    TextEncoder& enc = run.use_adapter ? *stack.enc_a : *stack.enc_b;
    install_tokens(enc, run);
    CondProvider provider =
        make_cond_provider(stack, run.strategy, tmpl, run.use_adapter, cfg.inference_steps);

    std::string dir = cfg.out_path.empty() ? cfg.data_root + "/images" : cfg.out_path;
    std::filesystem::create_directories(dir);
    Rng seeds(cfg.seed);
    for (int s = 0; s < count; ++s) {
        Tensor img = sample_image(stack, run.kind, provider, cfg.inference_steps,
                                  sampler_from_name(cfg.sampler), seeds.next_u64());
        char nm[32];
        std::snprintf(nm, sizeof(nm), "p%02d_s%02d.ppm", prompt_index, s);
        std::string path = (std::filesystem::path(dir) / nm).string();
        save_ppm(path, img);
        out << "wrote " << path << "\n";
    }
}

void cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
    LoadedModel model = load_model(cfg.model());
    if (!model.probe || !model.joint)
        throw LabError("model bundle lacks probe/joint sections; rerun pretrain");
    InversionResult run = load_embeddings(cfg.embeddings());
    ResolvedDataset data = resolve_dataset(cfg);

    std::string report_path = cfg.out_path.empty() ? cfg.data_root + "/report.txt" : cfg.out_path;
    std::filesystem::path rp(report_path);
    if (rp.has_parent_path()) std::filesystem::create_directories(rp.parent_path());

    EvalContext ev;
    ev.stack = &model.stack;
    ev.probe = model.probe.get();
    ev.joint = model.joint.get();
    ev.sources = std::move(data.images);
    ev.planted = data.planted;
    ev.task = task_from_name(cfg.task);
    ev.n_per_prompt = cfg.n_per_prompt;
    ev.inference_steps = cfg.inference_steps;
    ev.sampler = sampler_from_name(cfg.sampler);
    ev.seed = cfg.seed;
    ev.image_dir = (rp.parent_path() / (rp.stem().string() + "_images")).string();

    MetricsReport report = evaluate_run(run, ev);
    write_report(report_path, report);
    out << report_text(report);
    out << "wrote " << report_path << "\n";
}

bool cmd_gradcheck(std::ostream& out) {
    auto results = run_gradcheck(100, 0x9e3779b9, 1e-3f);
    bool ok = true;
    for (const auto& r : results) {
        out << (r.pass ? "  ok   " : "  FAIL ") << r.op << "  max rel err " << r.max_rel_err
            << " over " << r.instances << " instances\n";
        ok = ok && r.pass;
    }
    bool harness = gradcheck_selftest();
    out << (harness ? "  ok   " : "  FAIL ") << "harness self-test (planted error detected)\n";
    ok = ok && harness;
    out << (ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
    return ok;
}

}  // namespace bratlab
