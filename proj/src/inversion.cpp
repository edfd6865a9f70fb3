#include "bratlab/inversion.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>

#include <json.hpp>

namespace bratlab {

using nlohmann::json;

// ---- strategy plumbing -------------------------------------------------------

std::string strategy_name(StrategyKind k) {
    switch (k) {
        case StrategyKind::default_: return "default";
        case StrategyKind::multi_k: return "multi_k";
        case StrategyKind::negative: return "negative";
        case StrategyKind::bonus: return "bonus";
        case StrategyKind::triple_bonus: return "triple_bonus";
    }
    throw LabError("bad strategy kind");
}

StrategyKind strategy_from_name(const std::string& s) {
    if (s == "default") return StrategyKind::default_;
    if (s == "multi_k") return StrategyKind::multi_k;
    if (s == "negative") return StrategyKind::negative;
    if (s == "bonus") return StrategyKind::bonus;
    if (s == "triple_bonus") return StrategyKind::triple_bonus;
    throw LabError("unknown strategy '" + s + "'");
}

int TokenStrategy::bonus_count() const {
    if (kind == StrategyKind::bonus) return 1;
    if (kind == StrategyKind::triple_bonus) return 3;
    return 0;
}

int TokenStrategy::trainable_count() const {
    switch (kind) {
        case StrategyKind::default_: return 1;
        case StrategyKind::multi_k: return k;
        case StrategyKind::negative: return 2;
        case StrategyKind::bonus: return 2;
        case StrategyKind::triple_bonus: return 4;
    }
    throw LabError("bad strategy kind");
}

Tensor spare_loss(const std::vector<Tensor>& embeddings, float lambda) {
    if (embeddings.size() < 2) throw LabError("spare_loss needs at least 2 embeddings");
    if (lambda < 0.0f) throw LabError("spare_loss lambda must be >= 0");
    Tensor acc;
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        for (std::size_t j = i + 1; j < embeddings.size(); ++j) {
            Tensor c = cosine_sim(embeddings[i], embeddings[j]);
            Tensor sq = mul(c, c);
            acc = acc.defined() ? add(acc, sq) : sq;
        }
    }
    return scale(acc, lambda);
}

Tensor negative_combine(const Tensor& eps_pos, const Tensor& eps_neg, float gamma) {
    if (eps_pos.shape() != eps_neg.shape()) throw LabError("negative_combine: shape mismatch");
    if (gamma == 1.0f) return scale(eps_pos, 1.0f);
    return add(eps_neg, scale(sub(eps_pos, eps_neg), gamma));
}

int token_for_step(int step, int total_steps, int k) {
    if (total_steps < 1) throw LabError("total_steps must be >= 1");
    if (k < 1 || k > total_steps) throw LabError("k must lie in [1, total_steps]");
    if (step < 0 || step >= total_steps)
        throw LabError("step " + std::to_string(step) + " outside [0, total_steps)");
    return (step * k) / total_steps;
}

int token_for_timestep(int t, int T, int k) { return token_for_step(t, T, k); }

std::string token_string(const TokenStrategy& s, int multi_index) {
    switch (s.kind) {
        case StrategyKind::default_:
        case StrategyKind::negative: return "<sks>";
        case StrategyKind::bonus: return "<sks> <fkf>";
        case StrategyKind::triple_bonus: return "<sks> <fkf1> <fkf2> <fkf3>";
        case StrategyKind::multi_k:
            if (multi_index < 0 || multi_index >= s.k)
                throw LabError("multi token index out of range");
            return "<sks_k" + std::to_string(multi_index) + ">";
    }
    throw LabError("bad strategy kind");
}

std::vector<std::string> strategy_token_names(const TokenStrategy& s) {
    switch (s.kind) {
        case StrategyKind::default_: return {"<sks>"};
        case StrategyKind::negative: return {"<sks>", "<neg>"};
        case StrategyKind::bonus: return {"<sks>", "<fkf>"};
        case StrategyKind::triple_bonus: return {"<sks>", "<fkf1>", "<fkf2>", "<fkf3>"};
        case StrategyKind::multi_k: {
            std::vector<std::string> names;
            names.reserve(static_cast<std::size_t>(s.k));
            for (int i = 0; i < s.k; ++i) names.push_back("<sks_k" + std::to_string(i) + ">");
            return names;
        }
    }
    throw LabError("bad strategy kind");
}

std::optional<std::string> negative_prompt(const TokenStrategy& s) {
    if (s.kind == StrategyKind::negative) return "<neg>";
    return std::nullopt;
}

std::string build_prompt(const std::string& tmpl, const TokenStrategy& s, Phase phase,
                         std::optional<int> step, int total_steps) {
    (void)phase;  // train and eval substitute the same token string
    int idx = 0;
    if (s.kind == StrategyKind::multi_k) {
        if (!step) throw LabError("multi_k prompts need a step index");
        idx = token_for_step(*step, total_steps, s.k);
    }
    return render_template(tmpl, token_string(s, idx));
}

namespace {

TokenRole role_for(const TokenStrategy& s, std::size_t position) {
    if (s.kind == StrategyKind::multi_k) return TokenRole::per_step;
    if (position == 0) return TokenRole::placeholder;
    if (s.kind == StrategyKind::negative) return TokenRole::negative;
    return TokenRole::bonus;
}

}  // namespace

std::vector<PseudowordEntry*> register_strategy_tokens(TextEncoder& enc, const TokenStrategy& s,
                                                       const std::string& init_word) {
    auto names = strategy_token_names(s);
    std::vector<PseudowordEntry*> entries;
    entries.reserve(names.size());
    for (std::size_t i = 0; i < names.size(); ++i)
        entries.push_back(&enc.register_pseudoword(names[i], init_word, role_for(s, i)));
    return entries;
}

// ---- training ------------------------------------------------------------------

namespace {

float pair_cos(const Tensor& a, const Tensor& b) {
    return std::fabs(cosine_sim(a, b).item());
}

struct EncodePath {
    TextEncoder* enc;
    AdapterMap* adapter;  // null on the direct path

    Encoding operator()(const std::vector<int>& ids,
                        const std::unordered_map<int, Tensor>& overrides) const {
        Encoding e = enc->encode(ids, overrides);
        return adapter ? adapter->adapt(e) : e;
    }
};

}  // namespace

InversionResult train_inversion(DiffusionStack& stack, const std::vector<ImageExample>& images,
                                const InversionConfig& cfg) {
    if (images.empty()) throw LabError("train_inversion: empty image list");
    if (cfg.init_word.empty()) throw LabError("train_inversion: missing init word");
    if (cfg.epochs < 0 || cfg.grad_accum < 1) throw LabError("bad epoch/accumulation settings");
    if (!stack.vae || !stack.enc_b || !stack.vocab) throw LabError("incomplete stack");
    Denoiser& den = stack.denoiser(cfg.kind);
    TextEncoder& enc = cfg.use_adapter ? *stack.enc_a : *stack.enc_b;
    if (cfg.use_adapter && !stack.adapter) throw LabError("stack has no adapter");
    AdapterMap* adapter = cfg.use_adapter ? stack.adapter.get() : nullptr;
    if (!stack.vae->frozen() || !enc.frozen() || !den.frozen() ||
        (adapter && !adapter->frozen()))
        throw LabError("train_inversion: stack must be frozen");
    if (cfg.strategy.kind == StrategyKind::multi_k &&
        (cfg.strategy.k < 1 || cfg.strategy.k > cfg.total_steps))
        throw LabError("multi_k k must lie in [1, inference steps]");

    auto entries = register_strategy_tokens(enc, cfg.strategy, cfg.init_word);
    EncodePath encode{&enc, adapter};

    std::vector<Tensor> z0;
    z0.reserve(images.size());
    for (const auto& ex : images) z0.push_back(stack.vae->encode(ex.pixels));

    const auto templates = get_templates(cfg.task, Phase::train);
    const int T = stack.schedule.T;
    const Shape latent = VaeLite::latent_shape();
    const auto neg = negative_prompt(cfg.strategy);
    const bool has_spare = cfg.strategy.bonus_count() > 0;

    Rng rng(cfg.seed);
    Sgd opt(cfg.lr);
    std::vector<Tensor*> slots;
    for (auto* e : entries) slots.push_back(&e->embedding);

    InversionResult result;
    result.strategy = cfg.strategy;
    result.total_steps = cfg.total_steps;
    result.width = enc.width();
    result.use_adapter = cfg.use_adapter;
    result.kind = cfg.kind;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<Tensor> acc;
        double ldm_sum = 0.0, spare_sum = 0.0;
        for (int micro = 0; micro < cfg.grad_accum; ++micro) {
            const std::size_t img =
                static_cast<std::size_t>(epoch * cfg.grad_accum + micro) % images.size();
            const std::string tmpl = sample_template(templates, rng);
            const int t = rng.uniform_int(T);
            Tensor eps = Tensor::from(latent, rng.normal_vec(shape_numel(latent)));
            try {
                Tape tape;
                std::vector<Tensor> leaves;
                std::unordered_map<int, Tensor> overrides;
                for (auto* e : entries) {
                    leaves.push_back(tape.leaf(e->embedding));
                    overrides.emplace(e->id, leaves.back());
                }
                const int idx = cfg.strategy.kind == StrategyKind::multi_k
                                    ? token_for_timestep(t, T, cfg.strategy.k)
                                    : 0;
                const std::string prompt = render_template(tmpl, token_string(cfg.strategy, idx));
                Encoding cond = encode(stack.vocab->tokenize(prompt), overrides);
                Tensor zt = forward_diffuse(z0[img], eps, stack.schedule.alpha_bar(t));
                Tensor pred = den.forward(zt, t, cond);
                if (neg) {
                    Encoding ncond = encode(stack.vocab->tokenize(*neg), overrides);
                    pred = negative_combine(pred, den.forward(zt, t, ncond), cfg.strategy.gamma);
                }
                Tensor lldm = mse(pred, eps);
                Tensor loss = lldm;
                Tensor lsp;
                if (has_spare) {
                    lsp = spare_loss(leaves, cfg.strategy.lambda);
                    loss = add(loss, lsp);
                }
                GradMap grads = tape.backward(scale(loss, 1.0f / static_cast<float>(cfg.grad_accum)));
                std::vector<Tensor> g;
                g.reserve(leaves.size());
                for (const auto& leaf : leaves) g.push_back(grads.at(leaf));
                accumulate(acc, g);
                ldm_sum += lldm.item();
                spare_sum += has_spare ? lsp.item() : 0.0;
            } catch (const LabError& e) {
                throw LabError("inversion aborted at epoch " + std::to_string(epoch) + " micro " +
                               std::to_string(micro) + ": " + e.what());
            }
        }
        clip_grad_norm(acc, cfg.max_grad_norm);
        opt.step(slots, acc);

        EpochStats st;
        st.epoch = epoch;
        st.loss_ldm = static_cast<float>(ldm_sum / cfg.grad_accum);
        st.loss_spare = static_cast<float>(spare_sum / cfg.grad_accum);
        st.cos_vw = entries.size() >= 2 ? pair_cos(entries[0]->embedding, entries[1]->embedding)
                                        : 0.0f;
        result.trace.push_back(st);
        if (cfg.verbose && (epoch % 25 == 0 || epoch + 1 == cfg.epochs))
            std::fprintf(stderr, "epoch %d ldm %.4f spare %.5f cos %.4f\n", epoch, st.loss_ldm,
                         st.loss_spare, st.cos_vw);
    }

    for (auto* e : entries) {
        TokenRecord rec;
        rec.name = e->name;
        rec.role = e->role;
        rec.init_word = e->init_word;
        rec.values = e->embedding.vec();
        result.tokens.push_back(std::move(rec));
    }
    return result;
}

// ---- persistence -----------------------------------------------------------------

void save_embeddings(const std::string& path, const InversionResult& run) {
    json doc;
    doc["version"] = 1;
    doc["strategy"] = strategy_name(run.strategy.kind);
    doc["lambda"] = float_to_text(run.strategy.lambda);
    if (run.strategy.kind == StrategyKind::negative)
        doc["gamma"] = float_to_text(run.strategy.gamma);
    if (run.strategy.kind == StrategyKind::multi_k) doc["k"] = run.strategy.k;
    doc["total_steps"] = run.total_steps;
    doc["width"] = run.width;
    doc["use_adapter"] = run.use_adapter;
    doc["denoiser"] = denoiser_kind_name(run.kind);
    json tokens = json::array();
    for (const auto& t : run.tokens) {
        json tok;
        tok["name"] = t.name;
        tok["role"] = token_role_name(t.role);
        tok["init_word"] = t.init_word;
        tok["dim"] = t.values.size();
        json vals = json::array();
        for (float v : t.values) vals.push_back(float_to_text(v));
        tok["values"] = std::move(vals);
        tokens.push_back(std::move(tok));
    }
    doc["tokens"] = std::move(tokens);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw LabError("cannot write " + path);
    f << doc.dump(2) << "\n";
}

InversionResult load_embeddings(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw LabError("cannot read " + path);
    json doc;
    try {
        f >> doc;
    } catch (const std::exception& e) {
        throw LabError("bad embeddings file " + path + ": " + e.what());
    }
    if (!doc.contains("version") || doc["version"].get<int>() != 1)
        throw LabError("unsupported embeddings file version");
    InversionResult run;
    run.strategy.kind = strategy_from_name(doc.at("strategy").get<std::string>());
    run.strategy.lambda = text_to_float(doc.at("lambda").get<std::string>());
    if (doc.contains("gamma")) run.strategy.gamma = text_to_float(doc["gamma"].get<std::string>());
    if (doc.contains("k")) run.strategy.k = doc["k"].get<int>();
    run.total_steps = doc.at("total_steps").get<int>();
    run.width = doc.at("width").get<int>();
    run.use_adapter = doc.value("use_adapter", false);
    run.kind = denoiser_kind_from_name(doc.value("denoiser", std::string("mini_unet")));
    for (const auto& tok : doc.at("tokens")) {
        TokenRecord rec;
        rec.name = tok.at("name").get<std::string>();
        rec.role = token_role_from_name(tok.at("role").get<std::string>());
        rec.init_word = tok.at("init_word").get<std::string>();
        const auto& vals = tok.at("values");
        if (tok.at("dim").get<std::size_t>() != vals.size())
            throw LabError("embeddings file dim mismatch for " + rec.name);
        rec.values.reserve(vals.size());
        for (const auto& v : vals) rec.values.push_back(text_to_float(v.get<std::string>()));
        if (static_cast<int>(rec.values.size()) != run.width)
            throw LabError("token " + rec.name + " width differs from file width");
        run.tokens.push_back(std::move(rec));
    }
    if (run.tokens.empty()) throw LabError("embeddings file has no tokens");
    return run;
}

std::vector<PseudowordEntry*> install_tokens(TextEncoder& enc, const InversionResult& run) {
    if (enc.width() != run.width)
        throw LabError("embeddings width " + std::to_string(run.width) +
                       " does not match encoder width " + std::to_string(enc.width()));
    std::vector<PseudowordEntry*> out;
    for (const auto& t : run.tokens) {
        PseudowordEntry& e = enc.has_pseudoword(t.name)
                                 ? enc.pseudoword(t.name)
                                 : enc.register_pseudoword(t.name, t.init_word, t.role);
        e.role = t.role;
        e.embedding = Tensor::from({run.width}, t.values);
        out.push_back(&e);
    }
    return out;
}

CondProvider make_cond_provider(DiffusionStack& stack, const TokenStrategy& s,
                                const std::string& tmpl, bool use_adapter, int total_steps) {
    if (use_adapter && !stack.adapter) throw LabError("stack has no adapter");
    auto cache = std::make_shared<std::map<std::string, Encoding>>();
    return [&stack, s, tmpl, use_adapter, total_steps, cache](int step) -> StepCond {
        TextEncoder& enc = use_adapter ? *stack.enc_a : *stack.enc_b;
        auto encode = [&](const std::string& prompt) -> Encoding {
            auto it = cache->find(prompt);
            if (it != cache->end()) return it->second;
            Encoding e = enc.encode(stack.vocab->tokenize(prompt));
            if (use_adapter) e = stack.adapter->adapt(e);
            return cache->emplace(prompt, std::move(e)).first->second;
        };
        StepCond sc;
        sc.pos = encode(build_prompt(tmpl, s, Phase::eval, step, total_steps));
        if (auto np = negative_prompt(s)) {
            sc.neg = encode(*np);
            sc.gamma = s.gamma;
        }
        return sc;
    };
}

void append_run_log(const std::string& path, const std::vector<EpochStats>& trace) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    std::ofstream f(path, std::ios::app);
    if (!f) throw LabError("cannot open run log " + path);
    if (fresh) f << "epoch,loss_ldm,loss_spare,cos_vw\n";
    for (const auto& st : trace)
        f << st.epoch << "," << float_to_text(st.loss_ldm) << "," << float_to_text(st.loss_spare)
          << "," << float_to_text(st.cos_vw) << "\n";
}

}  // namespace bratlab
