#include "bratlab/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace bratlab {

namespace {

Tensor l2_normalize(const Tensor& v) {
    double ss = 0.0;
    for (std::size_t i = 0; i < v.numel(); ++i) ss += static_cast<double>(v.at(i)) * v.at(i);
    const double norm = std::sqrt(ss);
    if (!(norm > 1e-12)) throw LabError("cannot normalize a zero embedding");
    return scale(v, static_cast<float>(1.0 / norm));
}

Tensor onehot_row(int index, int n) {
    Tensor t = Tensor::zeros({1, n});
    t.raw()[static_cast<std::size_t>(index)] = 1.0f;
    return t;
}

int argmax_row(const Tensor& logits) {
    int best = 0;
    for (std::size_t i = 1; i < logits.numel(); ++i) {
        if (logits.at(i) > logits.at(static_cast<std::size_t>(best))) best = static_cast<int>(i);
    }
    return best;
}

double pair_cos(const Tensor& a, const Tensor& b) {
    return static_cast<double>(cosine_sim(a, b).item());
}

}  // namespace

// ---- image probe -----------------------------------------------------------------

ImageProbe::ImageProbe(std::uint64_t seed) {
    Rng rng(seed);
    auto conv = [&](const char* nm, int co, int ci) {
        params_.add(std::string(nm) + ".w", kaiming_init(rng, {co, ci, 3, 3},
                                                         static_cast<std::size_t>(ci) * 9));
        params_.add(std::string(nm) + ".b", Tensor::zeros({co}));
        params_.add(std::string(nm) + ".g", Tensor::full({co}, 1.0f));
        params_.add(std::string(nm) + ".gb", Tensor::zeros({co}));
    };
    conv("c0", 12, 3);
    conv("c1", 16, 12);
    conv("c2", 32, 16);
    conv("c3", 64, 32);
    auto head = [&](const char* nm, int classes) {
        params_.add(std::string(nm) + ".w",
                    randn_init(rng, {classes, kFeatureDim}, 1.0f / 8.0f));
        params_.add(std::string(nm) + ".b", Tensor::zeros({classes}));
    };
    head("shape", kNumShapes);
    head("color", kNumColors);
    head("texture", kNumTextures);
}

ImageProbe::Activations ImageProbe::forward(const Tensor& img, TrainCtx* ctx) {
    if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) % 8 != 0 || img.dim(2) % 8 != 0)
        throw LabError("probe expects a [3,H,W] image with H,W divisible by 8, got " +
                       shape_str(img.shape()));
    if (frozen_ && ctx) throw LabError("probe is frozen; cannot bind its parameters");
    auto p = [&](const std::string& nm) -> Tensor {
        return ctx ? ctx->bind(params_[nm]) : params_.at(nm);
    };
    Tensor raw0, raw1;
    auto stage = [&](const Tensor& x, const char* nm, int groups, int stride,
                     Tensor* raw = nullptr) {
        Tensor w = p(std::string(nm) + ".w");
        Tensor b = p(std::string(nm) + ".b");
        Tensor g = p(std::string(nm) + ".g");
        Tensor gb = p(std::string(nm) + ".gb");
        Tensor conv = conv2d(x, w, b, stride);
        if (raw) *raw = conv;
        return silu(group_norm(conv, groups, g, gb));
    };

    Activations act;
    Tensor c0 = stage(img, "c0", 4, 1, &raw0);  // full-resolution stage keeps 1-2px cues
    act.c1 = stage(c0, "c1", 4, 2, &raw1);
    act.c2 = stage(act.c1, "c2", 8, 2);
    act.c3 = stage(act.c2, "c3", 8, 2);
    act.r0 = raw0;
    act.r1 = raw1;
    // second moments are near-invariant to the renderer's random rotation
    Tensor mean1 = global_avg_pool(act.c3);
    Tensor mean2 = global_avg_pool(mul(act.c3, act.c3));
    act.pooled = reshape(
        concat_channels(reshape(mean1, {64, 1, 1}), reshape(mean2, {64, 1, 1})), {kFeatureDim});
    Tensor feat = reshape(act.pooled, {1, kFeatureDim});
    auto head = [&](const char* nm) {
        Tensor w = p(std::string(nm) + ".w");
        Tensor b = p(std::string(nm) + ".b");
        return linear(feat, w, b);
    };
    act.shape_logits = head("shape");
    act.color_logits = head("color");
    act.texture_logits = head("texture");
    return act;
}

ConceptSpec ImageProbe::predict(const Tensor& img) {
    Activations act = forward(img);
    ConceptSpec c;
    c.shape = argmax_row(act.shape_logits);
    c.color = argmax_row(act.color_logits);
    c.texture = argmax_row(act.texture_logits);
    return c;
}

ImageProbe train_probe(const std::vector<ImageExample>& corpus, int steps, std::uint64_t seed,
                       bool verbose) {
    // palette-remapping styles corrupt color/texture labels but leave the
    // silhouette intact, so styled renders supervise the shape head only
    std::vector<const ImageExample*> labeled;
    for (const auto& ex : corpus) {
        if (ex.spec) labeled.push_back(&ex);
    }
    if (labeled.empty()) throw LabError("train_probe: no labeled examples");

    constexpr int kMicro = 4;
    ImageProbe probe(Rng(seed).fork("init").next_u64());
    Adam opt(probe.params().all(), 3e-3f);
    Rng rng(Rng(seed).fork("steps").next_u64());
    double running = 0.0;
    for (int step = 0; step < steps; ++step) {
        Tape tape;
        TrainCtx ctx(tape);
        Tensor loss;
        for (int m = 0; m < kMicro; ++m) {
            const auto& ex = *labeled[static_cast<std::size_t>(
                rng.uniform_int(static_cast<int>(labeled.size())))];
            ImageProbe::Activations act = probe.forward(ex.pixels, &ctx);
            Tensor l =
                mse(softmax_rows(act.shape_logits), onehot_row(ex.spec->shape, kNumShapes));
            if (ex.style_id < 0) {
                l = add(l, mse(softmax_rows(act.color_logits),
                               onehot_row(ex.spec->color, kNumColors)));
                l = add(l, mse(softmax_rows(act.texture_logits),
                               onehot_row(ex.spec->texture, kNumTextures)));
            }
            loss = loss.defined() ? add(loss, l) : l;
        }
        loss = scale(loss, 1.0f / kMicro);
        GradMap grads = tape.backward(loss);
        opt.step(aligned_grads(probe.params(), ctx, grads));
        running += loss.item();
        if (verbose && (step + 1) % 500 == 0) {
            std::fprintf(stderr, "probe step %d loss %.5f\n", step + 1, running / 500.0);
            running = 0.0;
        }
    }
    probe.set_trained(true);
    probe.set_frozen(true);
    return probe;
}

float probe_accuracy(ImageProbe& probe, const std::vector<ImageExample>& examples) {
    int total = 0, hit = 0;
    for (const auto& ex : examples) {
        if (!ex.spec) continue;
        ++total;
        ConceptSpec pred = probe.predict(ex.pixels);
        if (pred.shape == ex.spec->shape && pred.color == ex.spec->color) ++hit;
    }
    if (total == 0) throw LabError("probe_accuracy: no labeled examples");
    return static_cast<float>(hit) / static_cast<float>(total);
}

namespace {

// removing the scalar mean keeps the cosine from saturating on the shared
// all-positive component the nonlinearities leave behind
Tensor center_and_normalize(std::vector<float> v) {
    double m = 0.0;
    for (float x : v) m += x;
    m /= static_cast<double>(v.size());
    for (float& x : v) x -= static_cast<float>(m);
    const int n = static_cast<int>(v.size());
    return l2_normalize(Tensor::from({n}, std::move(v)));
}

}  // namespace

Tensor content_embed(ImageProbe& probe, const Tensor& img) {
    if (!probe.trained()) throw LabError("content_embed: probe is untrained");
    Tensor pooled = probe.forward(img).pooled;
    return center_and_normalize(std::vector<float>(pooled.data(), pooled.data() + pooled.numel()));
}

Tensor style_embed(ImageProbe& probe, const Tensor& img) {
    if (!probe.trained()) throw LabError("style_embed: probe is untrained");
    ImageProbe::Activations act = probe.forward(img);
    std::vector<float> stats;
    stats.reserve(ImageProbe::kStyleDim);
    for (const Tensor* layer : {&act.r0, &act.r1}) {
        Tensor m = global_avg_pool(*layer);
        Tensor v = sub(global_avg_pool(mul(*layer, *layer)), mul(m, m));
        for (std::size_t i = 0; i < m.numel(); ++i) stats.push_back(m.at(i));
        for (std::size_t i = 0; i < v.numel(); ++i) stats.push_back(v.at(i));
    }
    const int n = static_cast<int>(stats.size());
    if (n != ImageProbe::kStyleDim) throw LabError("style_embed: unexpected statistics width");
    return l2_normalize(Tensor::from({n}, std::move(stats)));
}

// ---- joint embedder ----------------------------------------------------------------

JointEmbedder::JointEmbedder(int text_width, int image_width, std::uint64_t seed)
    : text_width_(text_width), image_width_(image_width) {
    if (text_width <= 0 || image_width <= 0) throw LabError("joint embedder widths must be positive");
    Rng rng(seed);
    params_.add("wt", randn_init(rng, {kDim, text_width},
                                 1.0f / std::sqrt(static_cast<float>(text_width))));
    params_.add("bt", Tensor::zeros({kDim}));
    params_.add("wi", randn_init(rng, {kDim, image_width},
                                 1.0f / std::sqrt(static_cast<float>(image_width))));
    params_.add("bi", Tensor::zeros({kDim}));
}

Tensor JointEmbedder::project_text(const Tensor& feat, TrainCtx* ctx) {
    if (feat.numel() != static_cast<std::size_t>(text_width_))
        throw LabError("joint text feature width mismatch");
    if (frozen_ && ctx) throw LabError("joint embedder is frozen");
    Tensor w = ctx ? ctx->bind(params_["wt"]) : params_.at("wt");
    Tensor b = ctx ? ctx->bind(params_["bt"]) : params_.at("bt");
    return reshape(linear(reshape(feat, {1, text_width_}), w, b), {kDim});
}

Tensor JointEmbedder::project_image(const Tensor& feat, TrainCtx* ctx) {
    if (feat.numel() != static_cast<std::size_t>(image_width_))
        throw LabError("joint image feature width mismatch");
    if (frozen_ && ctx) throw LabError("joint embedder is frozen");
    Tensor w = ctx ? ctx->bind(params_["wi"]) : params_.at("wi");
    Tensor b = ctx ? ctx->bind(params_["bi"]) : params_.at("bi");
    return reshape(linear(reshape(feat, {1, image_width_}), w, b), {kDim});
}

Tensor JointEmbedder::embed_text(TextEncoder& enc, const std::string& prompt) {
    std::vector<int> ids = enc.vocab().tokenize(prompt);
    for (int& id : ids) {
        if (enc.vocab().is_pseudoword_id(id) && !enc.has_pseudoword(enc.vocab().word_of(id)))
            id = enc.vocab().unk_id();
    }
    Encoding e = enc.encode(ids);
    return project_text(masked_mean_rows(e.emb, e.mask));
}

Tensor JointEmbedder::embed_image(ImageProbe& probe, const Tensor& img) {
    return project_image(probe.forward(img).pooled);
}

JointEmbedder train_joint(TextEncoder& enc, ImageProbe& probe,
                          const std::vector<ImageExample>& corpus, int steps, std::uint64_t seed,
                          bool verbose) {
    if (corpus.size() < 2) throw LabError("train_joint: need at least two examples");

    std::vector<Tensor> text_feats, image_feats;
    text_feats.reserve(corpus.size());
    image_feats.reserve(corpus.size());
    for (const auto& ex : corpus) {
        Encoding e = enc.encode_prompt(ex.caption);
        text_feats.push_back(masked_mean_rows(e.emb, e.mask));
        image_feats.push_back(probe.forward(ex.pixels).pooled);
    }

    std::vector<std::size_t> train_idx;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (i % 5 != 0) train_idx.push_back(i);
    }
    if (train_idx.empty()) train_idx.push_back(0);

    JointEmbedder joint(enc.width(), ImageProbe::kFeatureDim, Rng(seed).fork("init").next_u64());
    Adam opt(joint.params().all(), 1e-2f);
    Rng rng(Rng(seed).fork("steps").next_u64());
    double running = 0.0;
    for (int step = 0; step < steps; ++step) {
        const std::size_t i = train_idx[static_cast<std::size_t>(
            rng.uniform_int(static_cast<int>(train_idx.size())))];
        std::size_t j = i;
        for (int attempt = 0; attempt < 100 && corpus[j].caption == corpus[i].caption; ++attempt)
            j = train_idx[static_cast<std::size_t>(
                rng.uniform_int(static_cast<int>(train_idx.size())))];
        if (corpus[j].caption == corpus[i].caption)
            throw LabError("train_joint: corpus captions lack variety");

        Tape tape;
        TrainCtx ctx(tape);
        Tensor t = joint.project_text(text_feats[i], &ctx);
        Tensor pos = joint.project_image(image_feats[i], &ctx);
        Tensor neg = joint.project_image(image_feats[j], &ctx);
        Tensor cpos = cosine_sim(t, pos);
        Tensor cneg = cosine_sim(t, neg);
        Tensor loss = add(add_scalar(scale(cpos, -1.0f), 1.0f), mul(cneg, cneg));
        GradMap grads = tape.backward(loss);
        opt.step(aligned_grads(joint.params(), ctx, grads));
        running += loss.item();
        if (verbose && (step + 1) % 500 == 0) {
            std::fprintf(stderr, "joint step %d loss %.5f\n", step + 1, running / 500.0);
            running = 0.0;
        }
    }
    joint.set_trained(true);
    joint.set_frozen(true);
    return joint;
}

float joint_ordering_accuracy(JointEmbedder& joint, TextEncoder& enc, ImageProbe& probe,
                              const std::vector<ImageExample>& examples, std::uint64_t seed) {
    if (examples.size() < 2) throw LabError("joint_ordering_accuracy: need at least two examples");
    Rng rng(seed);
    int total = 0, hit = 0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        std::size_t j = i;
        for (int attempt = 0; attempt < 100 && examples[j].caption == examples[i].caption;
             ++attempt)
            j = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(examples.size())));
        if (examples[j].caption == examples[i].caption) continue;
        Tensor t = joint.embed_text(enc, examples[i].caption);
        const double cpos = pair_cos(t, joint.embed_image(probe, examples[i].pixels));
        const double cneg = pair_cos(t, joint.embed_image(probe, examples[j].pixels));
        ++total;
        if (cpos > cneg) ++hit;
    }
    if (total == 0) throw LabError("joint_ordering_accuracy: no usable pairs");
    return static_cast<float>(hit) / static_cast<float>(total);
}

float prompt_similarity(JointEmbedder& joint, TextEncoder& enc, ImageProbe& probe,
                        const std::string& prompt, const Tensor& img) {
    if (!joint.trained()) throw LabError("prompt_similarity: joint embedder is untrained");
    return cosine_sim(joint.embed_text(enc, prompt), joint.embed_image(probe, img)).item();
}

// ---- set metrics --------------------------------------------------------------------

float set_similarity(const std::vector<Tensor>& src_embs, const std::vector<Tensor>& gen_embs) {
    if (src_embs.empty() || gen_embs.empty()) throw LabError("set_similarity: empty set");
    double acc = 0.0;
    for (const auto& s : src_embs) {
        for (const auto& g : gen_embs) acc += pair_cos(s, g);
    }
    return static_cast<float>(acc / (static_cast<double>(src_embs.size()) *
                                     static_cast<double>(gen_embs.size())));
}

float set_consistency(const std::vector<Tensor>& gen_embs) {
    if (gen_embs.size() < 2) throw LabError("set_consistency: need at least two embeddings");
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < gen_embs.size(); ++i) {
        for (std::size_t j = i + 1; j < gen_embs.size(); ++j) {
            acc += pair_cos(gen_embs[i], gen_embs[j]);
            ++pairs;
        }
    }
    return static_cast<float>(acc / static_cast<double>(pairs));
}

float oracle_accuracy(ImageProbe& probe, const std::vector<Tensor>& images,
                      const ConceptSpec& planted) {
    if (!probe.trained()) throw LabError("oracle_accuracy: probe is untrained");
    if (images.empty()) throw LabError("oracle_accuracy: empty image list");
    int hit = 0;
    for (const auto& img : images) {
        ConceptSpec pred = probe.predict(img);
        if (pred.shape == planted.shape && pred.color == planted.color) ++hit;
    }
    return static_cast<float>(hit) / static_cast<float>(images.size());
}

// ---- reports --------------------------------------------------------------------------

std::string report_text(const MetricsReport& r) {
    std::ostringstream out;
    out << "sim = " << float_to_text(r.sim) << "\n";
    out << "cons = " << float_to_text(r.cons) << "\n";
    out << "content_sim = " << float_to_text(r.content_sim) << "\n";
    out << "content_cons = " << float_to_text(r.content_cons) << "\n";
    out << "style_sim = " << float_to_text(r.style_sim) << "\n";
    out << "style_cons = " << float_to_text(r.style_cons) << "\n";
    out << "prompt_sim = " << float_to_text(r.prompt_sim) << "\n";
    if (r.oracle_acc) out << "oracle_acc = " << float_to_text(*r.oracle_acc) << "\n";
    out << "n_images = " << r.n_images << "\n";
    out << "n_prompts = " << r.n_prompts << "\n";
    return out.str();
}

void write_report(const std::string& path, const MetricsReport& r) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw LabError("cannot write report " + path);
    f << report_text(r);
}

MetricsReport read_report(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw LabError("cannot read report " + path);
    MetricsReport r;
    std::string line;
    while (std::getline(f, line)) {
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 3);
        if (key == "sim") r.sim = text_to_float(val);
        else if (key == "cons") r.cons = text_to_float(val);
        else if (key == "content_sim") r.content_sim = text_to_float(val);
        else if (key == "content_cons") r.content_cons = text_to_float(val);
        else if (key == "style_sim") r.style_sim = text_to_float(val);
        else if (key == "style_cons") r.style_cons = text_to_float(val);
        else if (key == "prompt_sim") r.prompt_sim = text_to_float(val);
        else if (key == "oracle_acc") r.oracle_acc = text_to_float(val);
        else if (key == "n_images") r.n_images = std::stoi(val);
        else if (key == "n_prompts") r.n_prompts = std::stoi(val);
    }
    return r;
}

// ---- evaluation driver -------------------------------------------------------------------

MetricsReport evaluate_run(const InversionResult& run, const EvalContext& ev) {
    if (!ev.stack || !ev.probe || !ev.joint) throw LabError("evaluate_run: incomplete context");
    if (!ev.probe->trained() || !ev.joint->trained())
        throw LabError("evaluate_run: embedders must be trained");
    if (ev.sources.empty()) throw LabError("evaluate_run: no source images");
    if (ev.n_per_prompt < 1) throw LabError("evaluate_run: n_per_prompt must be >= 1");

    DiffusionStack& stack = *ev.stack;
    TextEncoder& enc = run.use_adapter ? *stack.enc_a : *stack.enc_b;
    install_tokens(enc, run);

    const TemplateSet& templates = get_templates(ev.task, Phase::eval);
    if (!ev.image_dir.empty()) std::filesystem::create_directories(ev.image_dir);

    Rng seeds(ev.seed);
    std::vector<Tensor> gen_images;
    std::vector<std::string> gen_prompts;
    for (std::size_t ti = 0; ti < templates.templates.size(); ++ti) {
        const std::string& tmpl = templates.templates[ti];
        CondProvider provider =
            make_cond_provider(stack, run.strategy, tmpl, run.use_adapter, ev.inference_steps);
        for (int s = 0; s < ev.n_per_prompt; ++s) {
            const std::uint64_t sample_seed = seeds.next_u64();
            Tensor img = sample_image(stack, run.kind, provider, ev.inference_steps, ev.sampler,
                                      sample_seed);
            if (!ev.image_dir.empty()) {
                char nm[32];
                std::snprintf(nm, sizeof(nm), "p%02zu_s%02d.ppm", ti, s);
                save_ppm((std::filesystem::path(ev.image_dir) / nm).string(), img);
            }
            gen_images.push_back(std::move(img));
            gen_prompts.push_back(
                build_prompt(tmpl, run.strategy, Phase::eval, 0, ev.inference_steps));
        }
    }

    auto embed_all = [&](const std::vector<ImageExample>& exs, auto&& fn) {
        std::vector<Tensor> out;
        out.reserve(exs.size());
        for (const auto& ex : exs) out.push_back(fn(ex.pixels));
        return out;
    };
    auto embed_gen = [&](auto&& fn) {
        std::vector<Tensor> out;
        out.reserve(gen_images.size());
        for (const auto& img : gen_images) out.push_back(fn(img));
        return out;
    };
    auto joint_of = [&](const Tensor& img) { return ev.joint->embed_image(*ev.probe, img); };
    auto content_of = [&](const Tensor& img) { return content_embed(*ev.probe, img); };
    auto style_of = [&](const Tensor& img) { return style_embed(*ev.probe, img); };

    std::vector<Tensor> src_joint = embed_all(ev.sources, joint_of);
    std::vector<Tensor> gen_joint = embed_gen(joint_of);
    std::vector<Tensor> src_content = embed_all(ev.sources, content_of);
    std::vector<Tensor> gen_content = embed_gen(content_of);
    std::vector<Tensor> src_style = embed_all(ev.sources, style_of);
    std::vector<Tensor> gen_style = embed_gen(style_of);

    MetricsReport r;
    r.sim = set_similarity(src_joint, gen_joint);
    r.cons = set_consistency(gen_joint);
    r.content_sim = set_similarity(src_content, gen_content);
    r.content_cons = set_consistency(gen_content);
    r.style_sim = set_similarity(src_style, gen_style);
    r.style_cons = set_consistency(gen_style);

    double psum = 0.0;
    for (std::size_t i = 0; i < gen_images.size(); ++i)
        psum += prompt_similarity(*ev.joint, *stack.enc_a, *ev.probe, gen_prompts[i],
                                  gen_images[i]);
    r.prompt_sim = static_cast<float>(psum / static_cast<double>(gen_images.size()));

    if (ev.planted) r.oracle_acc = oracle_accuracy(*ev.probe, gen_images, *ev.planted);
    r.n_images = static_cast<int>(gen_images.size());
    r.n_prompts = static_cast<int>(templates.templates.size());
    return r;
}

// ---- external scorer ------------------------------------------------------------------------

std::vector<float> external_scores(const std::string& command,
                                   const std::vector<std::string>& image_paths) {
    if (command.empty()) throw LabError("external_scores: empty command");
    if (image_paths.empty()) throw LabError("external_scores: no image paths");

    const auto dir = std::filesystem::temp_directory_path();
    const auto tag = std::to_string(
        std::chrono::steady_clock::now().time_since_epoch().count());
    const auto in_path = dir / ("bratlab_scorer_in_" + tag + ".txt");
    const auto out_path = dir / ("bratlab_scorer_out_" + tag + ".txt");
    {
        std::ofstream in(in_path, std::ios::binary);
        if (!in) throw LabError("cannot stage scorer input");
        for (const auto& p : image_paths) in << p << "\n";
    }
    const std::string cmd =
        command + " < " + in_path.string() + " > " + out_path.string();
    const int rc = std::system(cmd.c_str());
    std::vector<float> scores;
    {
        std::ifstream out(out_path, std::ios::binary);
        std::string line;
        while (std::getline(out, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            scores.push_back(text_to_float(line));
        }
    }
    std::filesystem::remove(in_path);
    std::filesystem::remove(out_path);
    if (rc != 0) throw LabError("external scorer exited with status " + std::to_string(rc));
    if (scores.size() != image_paths.size())
        throw LabError("external scorer returned " + std::to_string(scores.size()) +
                       " scores for " + std::to_string(image_paths.size()) + " images");
    return scores;
}

}  // namespace bratlab
