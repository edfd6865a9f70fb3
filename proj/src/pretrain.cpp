#include <cmath>
#include <cstdio>

#include "bratlab/diffusion.hpp"

namespace bratlab {

namespace {

struct CorpusCache {
    std::vector<ImageExample> examples;
    std::vector<std::vector<int>> ids;     // tokenized captions
    std::vector<Tensor> latents;           // filled after the VAE freezes
};

void train_vae(VaeLite& vae, const std::vector<ImageExample>& corpus, int steps, Rng rng,
               bool verbose) {
    Adam opt(vae.params().all(), 1.5e-3f);
    double running = 0.0;
    for (int step = 0; step < steps; ++step) {
        const auto i = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(corpus.size())));
        Tape tape;
        TrainCtx ctx(tape);
        Tensor z = vae.encode(corpus[i].pixels, &ctx);
        Tensor rec = vae.decode(z, &ctx);
        Tensor loss = add(mse(rec, corpus[i].pixels), scale(mean(mul(z, z)), 1e-4f));
        GradMap grads = tape.backward(loss);
        opt.step(aligned_grads(vae.params(), ctx, grads));
        running += loss.item();
        if (verbose && (step + 1) % 500 == 0) {
            std::fprintf(stderr, "vae step %d loss %.5f\n", step + 1, running / 500.0);
            running = 0.0;
        }
    }
}

void calibrate_latent_scale(VaeLite& vae, const std::vector<ImageExample>& corpus) {
    const std::size_t n = std::min<std::size_t>(corpus.size(), 64);
    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor z = vae.encode(corpus[i].pixels);
        for (std::size_t j = 0; j < z.numel(); ++j) {
            sum += z.at(j);
            sq += static_cast<double>(z.at(j)) * z.at(j);
            ++count;
        }
    }
    const double var = sq / count - (sum / count) * (sum / count);
    const double sd = std::sqrt(std::max(var, 1e-12));
    vae.set_latent_scale(static_cast<float>(1.0 / sd));
}

// One LDM step; binds the encoder only when enc_opt is present (joint phase).
void train_denoiser(Denoiser& den, TextEncoder& enc, const NoiseSchedule& ns, CorpusCache& cc,
                    int steps, Rng rng, Adam* enc_opt, bool verbose) {
    Adam den_opt(den.params().all(), 1e-3f);
    const Shape latent = VaeLite::latent_shape();
    std::vector<Encoding> cond_cache;
    if (!enc_opt) {
        cond_cache.reserve(cc.ids.size());
        for (const auto& ids : cc.ids) cond_cache.push_back(enc.encode(ids));
    }
    double running = 0.0;
    for (int step = 0; step < steps; ++step) {
        const auto i = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(cc.ids.size())));
        const int t = rng.uniform_int(ns.T);
        Tensor eps = Tensor::from(latent, rng.normal_vec(shape_numel(latent)));
        Tape tape;
        TrainCtx ctx(tape);
        Encoding cond = enc_opt ? enc.encode(cc.ids[i], {}, nullptr, &ctx) : cond_cache[i];
        Tensor loss = ldm_loss(den, ns, cc.latents[i], t, cond, eps, &ctx);
        GradMap grads = tape.backward(loss);
        den_opt.step(aligned_grads(den.params(), ctx, grads));
        if (enc_opt) enc_opt->step(aligned_grads(enc.params(), ctx, grads));
        running += loss.item();
        if (verbose && (step + 1) % 1000 == 0) {
            std::fprintf(stderr, "%s step %d loss %.5f\n", denoiser_kind_name(den.kind()).c_str(),
                         step + 1, running / 1000.0);
            running = 0.0;
        }
    }
}

// Trains enc_a so a single linear head can reproduce enc_b's outputs; the
// head is discarded, the adapter contract relearns it from frozen encoders.
void distill_encoder(TextEncoder& enc_a, TextEncoder& enc_b, const CorpusCache& cc, int steps,
                     Rng rng, bool verbose) {
    std::vector<Tensor> targets;
    targets.reserve(cc.ids.size());
    for (const auto& ids : cc.ids) targets.push_back(enc_b.encode(ids).emb);

    ParamStore head;
    {
        Rng hr = rng.fork("head");
        head.add("w", randn_init(hr, {enc_b.width(), enc_a.width()},
                                 1.0f / std::sqrt(static_cast<float>(enc_a.width()))));
        head.add("b", Tensor::zeros({enc_b.width()}));
    }
    Adam enc_opt(enc_a.params().all(), 1e-3f);
    Adam head_opt(head.all(), 1e-3f);
    double running = 0.0;
    for (int step = 0; step < steps; ++step) {
        const auto i = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(cc.ids.size())));
        Tape tape;
        TrainCtx ctx(tape);
        Encoding out = enc_a.encode(cc.ids[i], {}, nullptr, &ctx);
        Tensor pred = linear(out.emb, ctx.bind(head["w"]), ctx.bind(head["b"]));
        Tensor loss = mse(pred, targets[i]);
        GradMap grads = tape.backward(loss);
        enc_opt.step(aligned_grads(enc_a.params(), ctx, grads));
        head_opt.step(aligned_grads(head, ctx, grads));
        running += loss.item();
        if (verbose && (step + 1) % 1000 == 0) {
            std::fprintf(stderr, "distill step %d loss %.5f\n", step + 1, running / 1000.0);
            running = 0.0;
        }
    }
}

}  // namespace

DiffusionStack pretrain_stack(const PretrainOptions& opts) {
    if (opts.corpus_size < 4) throw LabError("corpus too small");
    Rng root(opts.seed);
    Rng rng_vae = root.fork("vae");
    Rng rng_den = root.fork("denoiser");
    Rng rng_den2 = root.fork("denoiser2");
    Rng rng_distill = root.fork("distill");
    const std::uint64_t corpus_seed = root.fork("corpus").next_u64();
    const std::uint64_t vae_seed = root.fork("vae_init").next_u64();
    const std::uint64_t enc_a_seed = root.fork("enc_a_init").next_u64();
    const std::uint64_t enc_b_seed = root.fork("enc_b_init").next_u64();
    const std::uint64_t unet_seed = root.fork("unet_init").next_u64();
    const std::uint64_t dit_seed = root.fork("dit_init").next_u64();
    const std::uint64_t adapter_seed = root.fork("adapter_init").next_u64();

    DiffusionStack stack;
    stack.schedule = NoiseSchedule::linear();
    stack.vocab = std::make_unique<Vocabulary>(build_vocabulary(corpus_vocab_texts()));
    stack.vae = std::make_unique<VaeLite>(vae_seed);
    stack.enc_a = std::make_unique<TextEncoder>("a", stack.vocab.get(), opts.enc_a_width,
                                                enc_a_seed);
    stack.enc_b = std::make_unique<TextEncoder>("b", stack.vocab.get(), opts.enc_b_width,
                                                enc_b_seed);

    CorpusCache cc;
    cc.examples = gen_corpus(corpus_seed, opts.corpus_size, opts.holdout, opts.res);
    cc.ids.reserve(cc.examples.size());
    for (const auto& ex : cc.examples) cc.ids.push_back(stack.vocab->tokenize(ex.caption));

    if (opts.verbose) std::fprintf(stderr, "pretraining vae (%d steps)\n", opts.vae_steps);
    train_vae(*stack.vae, cc.examples, opts.vae_steps, rng_vae, opts.verbose);
    calibrate_latent_scale(*stack.vae, cc.examples);
    stack.vae->set_frozen(true);

    cc.latents.reserve(cc.examples.size());
    for (const auto& ex : cc.examples) cc.latents.push_back(stack.vae->encode(ex.pixels));

    const bool unet_first = opts.train_unet;
    if (opts.train_unet || opts.train_dit) {
        Adam enc_opt(stack.enc_b->params().all(), 1e-3f);
        DenoiserKind first = unet_first ? DenoiserKind::mini_unet : DenoiserKind::mini_dit;
        auto den = make_denoiser(first, opts.enc_b_width,
                                 first == DenoiserKind::mini_unet ? unet_seed : dit_seed);
        if (opts.verbose)
            std::fprintf(stderr, "pretraining %s + conditioning encoder (%d steps)\n",
                         denoiser_kind_name(first).c_str(), opts.denoiser_steps);
        train_denoiser(*den, *stack.enc_b, stack.schedule, cc, opts.denoiser_steps, rng_den,
                       &enc_opt, opts.verbose);
        den->set_frozen(true);
        stack.enc_b->set_frozen(true);
        stack.denoisers.emplace(first, std::move(den));
    }
    if (opts.train_unet && opts.train_dit) {
        auto den = make_denoiser(DenoiserKind::mini_dit, opts.enc_b_width, dit_seed);
        if (opts.verbose)
            std::fprintf(stderr, "pretraining mini_dit on the frozen encoder (%d steps)\n",
                         opts.denoiser_steps);
        train_denoiser(*den, *stack.enc_b, stack.schedule, cc, opts.denoiser_steps, rng_den2,
                       nullptr, opts.verbose);
        den->set_frozen(true);
        stack.denoisers.emplace(DenoiserKind::mini_dit, std::move(den));
    }

    if (opts.verbose) std::fprintf(stderr, "distilling encoder a (%d steps)\n", opts.distill_steps);
    distill_encoder(*stack.enc_a, *stack.enc_b, cc, opts.distill_steps, rng_distill, opts.verbose);
    stack.enc_a->set_frozen(true);

    std::vector<std::string> captions;
    captions.reserve(cc.examples.size());
    for (const auto& ex : cc.examples) captions.push_back(ex.caption);
    if (opts.verbose) std::fprintf(stderr, "training adapter (%d steps)\n", opts.adapter_steps);
    stack.adapter = std::make_unique<AdapterMap>(
        train_adapter(captions, *stack.enc_a, *stack.enc_b, opts.adapter_steps, adapter_seed));
    stack.adapter->set_frozen(true);

    stack.freeze_all();
    return stack;
}

}  // namespace bratlab
