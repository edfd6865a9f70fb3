#include "bratlab/diffusion.hpp"

#include <cmath>

#include "bratlab/inversion.hpp"

namespace bratlab {

// ---- noise schedule --------------------------------------------------------

NoiseSchedule NoiseSchedule::linear(int T, float beta_start, float beta_end) {
    if (T < 2) throw LabError("schedule needs at least 2 timesteps");
    if (!(beta_start > 0.0f && beta_end < 1.0f && beta_start <= beta_end))
        throw LabError("schedule betas must satisfy 0 < start <= end < 1");
    NoiseSchedule ns;
    ns.T = T;
    ns.betas.resize(static_cast<std::size_t>(T));
    ns.alphas_cumprod.resize(static_cast<std::size_t>(T));
    double abar = 1.0;
    for (int t = 0; t < T; ++t) {
        double beta = static_cast<double>(beta_start) +
                      (static_cast<double>(beta_end) - beta_start) * t / (T - 1);
        abar *= 1.0 - beta;
        ns.betas[static_cast<std::size_t>(t)] = static_cast<float>(beta);
        ns.alphas_cumprod[static_cast<std::size_t>(t)] = static_cast<float>(abar);
    }
    for (int t = 1; t < T; ++t) {
        if (!(ns.alphas_cumprod[static_cast<std::size_t>(t)] <
              ns.alphas_cumprod[static_cast<std::size_t>(t - 1)]))
            throw LabError("schedule alpha_bar must be strictly decreasing");
    }
    return ns;
}

float NoiseSchedule::alpha_bar(int t) const {
    if (t < 0 || t >= T) throw LabError("timestep " + std::to_string(t) + " outside [0, T)");
    return alphas_cumprod[static_cast<std::size_t>(t)];
}

Tensor forward_diffuse(const Tensor& z0, const Tensor& eps, float alpha_bar) {
    if (z0.shape() != eps.shape()) throw LabError("forward_diffuse: shape mismatch");
    if (!(alpha_bar >= 0.0f && alpha_bar <= 1.0f))
        throw LabError("forward_diffuse: alpha_bar outside [0, 1]");
    const float sa = std::sqrt(alpha_bar);
    const float sb = std::sqrt(1.0f - alpha_bar);
    if (alpha_bar == 1.0f) return scale(z0, 1.0f);
    if (alpha_bar == 0.0f) return scale(eps, 1.0f);
    return add(scale(z0, sa), scale(eps, sb));
}

Tensor add_noise(const NoiseSchedule& ns, const Tensor& z0, const Tensor& eps, int t) {
    return forward_diffuse(z0, eps, ns.alpha_bar(t));
}

// ---- VAE-lite ---------------------------------------------------------------

namespace {

Tensor conv_init(Rng& rng, int co, int ci) {
    return randn_init(rng, {co, ci, 3, 3}, std::sqrt(2.0f / (static_cast<float>(ci) * 9.0f)));
}

}  // namespace

VaeLite::VaeLite(std::uint64_t seed) {
    Rng rng(seed);
    params_.add("e0.w", conv_init(rng, 16, 3));
    params_.add("e0.b", Tensor::zeros({16}));
    params_.add("e1.w", conv_init(rng, 32, 16));
    params_.add("e1.b", Tensor::zeros({32}));
    params_.add("e2.w", conv_init(rng, 32, 32));
    params_.add("e2.b", Tensor::zeros({32}));
    params_.add("e3.w", conv_init(rng, 4, 32));
    params_.add("e3.b", Tensor::zeros({4}));
    params_.add("d0.w", conv_init(rng, 32, 4));
    params_.add("d0.b", Tensor::zeros({32}));
    params_.add("d1.w", conv_init(rng, 16, 32));
    params_.add("d1.b", Tensor::zeros({16}));
    params_.add("d2.w", conv_init(rng, 16, 16));
    params_.add("d2.b", Tensor::zeros({16}));
    params_.add("d3.w", conv_init(rng, 3, 16));
    params_.add("d3.b", Tensor::zeros({3}));
    params_.add("scale", Tensor::full({1}, 1.0f));
}

float VaeLite::latent_scale() const { return params_.at("scale").at(0); }

void VaeLite::set_latent_scale(float s) {
    if (!(s > 0.0f) || !std::isfinite(s)) throw LabError("latent scale must be positive finite");
    if (frozen_) throw LabError("vae is frozen");
    params_["scale"].raw()[0] = s;
}

Tensor VaeLite::encode(const Tensor& img, TrainCtx* ctx) {
    if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != 32 || img.dim(2) != 32)
        throw LabError("vae encode expects [3,32,32], got " + shape_str(img.shape()));
    if (frozen_ && ctx) throw LabError("vae is frozen; cannot bind its parameters");
    auto p = [&](const char* nm) -> Tensor {
        return ctx ? ctx->bind(params_[nm]) : params_.at(nm);
    };
    Tensor x = silu(conv2d(img, p("e0.w"), p("e0.b"), 1));
    x = silu(conv2d(x, p("e1.w"), p("e1.b"), 2));
    x = silu(conv2d(x, p("e2.w"), p("e2.b"), 2));
    x = conv2d(x, p("e3.w"), p("e3.b"), 1);
    return scale(x, latent_scale());
}

Tensor VaeLite::decode(const Tensor& z, TrainCtx* ctx) {
    if (z.rank() != 3 || z.dim(0) != 4 || z.dim(1) != 8 || z.dim(2) != 8)
        throw LabError("vae decode expects [4,8,8], got " + shape_str(z.shape()));
    if (frozen_ && ctx) throw LabError("vae is frozen; cannot bind its parameters");
    auto p = [&](const char* nm) -> Tensor {
        return ctx ? ctx->bind(params_[nm]) : params_.at(nm);
    };
    Tensor x = scale(z, 1.0f / latent_scale());
    x = silu(conv2d(x, p("d0.w"), p("d0.b"), 1));
    x = upsample_nearest2(x);
    x = silu(conv2d(x, p("d1.w"), p("d1.b"), 1));
    x = upsample_nearest2(x);
    x = silu(conv2d(x, p("d2.w"), p("d2.b"), 1));
    return conv2d(x, p("d3.w"), p("d3.b"), 1);
}

float psnr(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw LabError("psnr: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        double d = static_cast<double>(a.at(i)) - b.at(i);
        acc += d * d;
    }
    double m = acc / static_cast<double>(a.numel());
    if (m <= 0.0) return 99.0f;
    return static_cast<float>(10.0 * std::log10(4.0 / m));
}

// ---- denoisers ---------------------------------------------------------------

std::string denoiser_kind_name(DenoiserKind k) {
    return k == DenoiserKind::mini_unet ? "mini_unet" : "mini_dit";
}

DenoiserKind denoiser_kind_from_name(const std::string& s) {
    if (s == "mini_unet") return DenoiserKind::mini_unet;
    if (s == "mini_dit") return DenoiserKind::mini_dit;
    throw LabError("unknown denoiser kind '" + s + "'");
}

namespace {

constexpr int kTimeWidth = 64;

// Shared helpers for the two families.
struct ParamView {
    ParamStore& store;
    TrainCtx* ctx;
    Tensor operator()(const std::string& nm) const {
        return ctx ? ctx->bind(store[nm]) : store.at(nm);
    }
};

Tensor time_features(int t) {
    auto f = sinusoidal_features(static_cast<float>(t), kTimeWidth);
    return Tensor::from({1, kTimeWidth}, std::move(f));
}

class MiniUnet final : public Denoiser {
public:
    MiniUnet(int cond_width, std::uint64_t seed) : Denoiser(cond_width) {
        Rng rng(seed);
        auto lin = [&](const std::string& nm, int o, int i) {
            params_.add(nm + ".w", randn_init(rng, {o, i}, 1.0f / std::sqrt(static_cast<float>(i))));
            params_.add(nm + ".b", Tensor::zeros({o}));
        };
        auto conv = [&](const std::string& nm, int o, int i) {
            params_.add(nm + ".w", conv_init(rng, o, i));
            params_.add(nm + ".b", Tensor::zeros({o}));
        };
        auto norm = [&](const std::string& nm, int c) {
            params_.add(nm + ".g", Tensor::full({c}, 1.0f));
            params_.add(nm + ".b", Tensor::zeros({c}));
        };
        lin("temb", kTimeWidth, kTimeWidth);
        conv("cin", 32, 4);
        for (int lvl = 0; lvl < 2; ++lvl) {
            const std::string l = "l" + std::to_string(lvl) + ".";
            const int c = lvl == 0 ? 32 : 64;
            norm(l + "gn", c);
            conv(l + "conv", c, c);
            lin(l + "films", c, kTimeWidth);
            lin(l + "filmt", c, kTimeWidth);
            lin(l + "aq", c, c);
            lin(l + "ak", c, cond_width);
            lin(l + "av", c, cond_width);
            lin(l + "ao", c, c);
        }
        conv("down", 64, 32);
        norm("mid.gn", 64);
        conv("mid.conv", 64, 64);
        conv("upc", 32, 64);
        conv("fuse", 32, 64);
        norm("gn2", 32);
        conv("cout", 4, 32);
    }

    DenoiserKind kind() const override { return DenoiserKind::mini_unet; }

    Tensor forward(const Tensor& z, int t, const Encoding& cond, TrainCtx* ctx) override {
        if (z.rank() != 3 || z.dim(0) != 4 || z.dim(1) != 8 || z.dim(2) != 8)
            throw LabError("mini_unet expects [4,8,8] latents, got " + shape_str(z.shape()));
        if (cond.emb.rank() != 2 || cond.emb.dim(1) != cond_width_)
            throw LabError("mini_unet: conditioning width mismatch");
        if (frozen_ && ctx) throw LabError("denoiser is frozen; cannot bind its parameters");
        ParamView p{params_, ctx};

        Tensor temb = silu(linear(time_features(t), p("temb.w"), p("temb.b")));

        auto film = [&](const std::string& l, const Tensor& x, int c) {
            Tensor s = reshape(linear(temb, p(l + "films.w"), p(l + "films.b")), {c});
            Tensor sh = reshape(linear(temb, p(l + "filmt.w"), p(l + "filmt.b")), {c});
            return affine_channels(x, add_scalar(s, 1.0f), sh);
        };
        auto cross = [&](const std::string& l, const Tensor& x, int c, int h, int w) {
            Tensor rows = chw_to_rows(x);
            Tensor q = linear(rows, p(l + "aq.w"), p(l + "aq.b"));
            Tensor k = linear(cond.emb, p(l + "ak.w"), p(l + "ak.b"));
            Tensor v = linear(cond.emb, p(l + "av.w"), p(l + "av.b"));
            Tensor att = linear(attention(q, k, v, &cond.mask), p(l + "ao.w"), p(l + "ao.b"));
            return add(x, rows_to_chw(att, c, h, w));
        };
        auto resblock = [&](const std::string& l, const Tensor& x, int c, int groups) {
            Tensor h = silu(group_norm(x, groups, p(l + "gn.g"), p(l + "gn.b")));
            h = conv2d(h, p(l + "conv.w"), p(l + "conv.b"), 1);
            return add(x, film(l, h, c));
        };

        Tensor x = conv2d(z, p("cin.w"), p("cin.b"), 1);
        x = resblock("l0.", x, 32, 8);
        x = cross("l0.", x, 32, 8, 8);
        Tensor skip = x;
        x = conv2d(x, p("down.w"), p("down.b"), 2);
        x = resblock("l1.", x, 64, 8);
        x = cross("l1.", x, 64, 4, 4);
        Tensor h = silu(group_norm(x, 8, p("mid.gn.g"), p("mid.gn.b")));
        x = add(x, conv2d(h, p("mid.conv.w"), p("mid.conv.b"), 1));
        x = upsample_nearest2(x);
        x = conv2d(x, p("upc.w"), p("upc.b"), 1);
        x = concat_channels(x, skip);
        x = conv2d(x, p("fuse.w"), p("fuse.b"), 1);
        x = silu(group_norm(x, 8, p("gn2.g"), p("gn2.b")));
        return conv2d(x, p("cout.w"), p("cout.b"), 1);
    }
};

class MiniDit final : public Denoiser {
public:
    MiniDit(int cond_width, std::uint64_t seed) : Denoiser(cond_width) {
        Rng rng(seed);
        auto lin = [&](const std::string& nm, int o, int i, float sd) {
            params_.add(nm + ".w", randn_init(rng, {o, i}, sd));
            params_.add(nm + ".b", Tensor::zeros({o}));
        };
        auto proj = [&](const std::string& nm, int o, int i) {
            lin(nm, o, i, 1.0f / std::sqrt(static_cast<float>(i)));
        };
        auto norm = [&](const std::string& nm) {
            params_.add(nm + ".g", Tensor::full({kWidth}, 1.0f));
            params_.add(nm + ".b", Tensor::zeros({kWidth}));
        };
        proj("pe", kWidth, 16);
        params_.add("pos", randn_init(rng, {16, kWidth}, 0.02f));
        proj("temb", kTimeWidth, kTimeWidth);
        for (int b = 0; b < kBlocks; ++b) {
            const std::string pre = "b" + std::to_string(b) + ".";
            norm(pre + "ln1");
            lin(pre + "ada_s1", kWidth, kTimeWidth, 0.02f);
            lin(pre + "ada_t1", kWidth, kTimeWidth, 0.02f);
            proj(pre + "sq", kWidth, kWidth);
            proj(pre + "sk", kWidth, kWidth);
            proj(pre + "sv", kWidth, kWidth);
            proj(pre + "so", kWidth, kWidth);
            norm(pre + "lnc");
            proj(pre + "cq", kWidth, kWidth);
            proj(pre + "ck", kWidth, cond_width);
            proj(pre + "cv", kWidth, cond_width);
            proj(pre + "co", kWidth, kWidth);
            norm(pre + "ln2");
            lin(pre + "ada_s2", kWidth, kTimeWidth, 0.02f);
            lin(pre + "ada_t2", kWidth, kTimeWidth, 0.02f);
            proj(pre + "w1", 2 * kWidth, kWidth);
            proj(pre + "w2", kWidth, 2 * kWidth);
        }
        norm("lnf");
        proj("out", 16, kWidth);
    }

    DenoiserKind kind() const override { return DenoiserKind::mini_dit; }

    Tensor forward(const Tensor& z, int t, const Encoding& cond, TrainCtx* ctx) override {
        if (z.rank() != 3 || z.dim(0) != 4 || z.dim(1) != 8 || z.dim(2) != 8)
            throw LabError("mini_dit expects [4,8,8] latents, got " + shape_str(z.shape()));
        if (cond.emb.rank() != 2 || cond.emb.dim(1) != cond_width_)
            throw LabError("mini_dit: conditioning width mismatch");
        if (frozen_ && ctx) throw LabError("denoiser is frozen; cannot bind its parameters");
        ParamView p{params_, ctx};

        Tensor temb = silu(linear(time_features(t), p("temb.w"), p("temb.b")));
        Tensor x = add(linear(patchify(z, 2), p("pe.w"), p("pe.b")), p("pos"));

        auto modulation = [&](const std::string& nm) {
            return reshape(linear(temb, p(nm + ".w"), p(nm + ".b")), {kWidth});
        };
        for (int b = 0; b < kBlocks; ++b) {
            const std::string pre = "b" + std::to_string(b) + ".";
            Tensor h = layer_norm(x, p(pre + "ln1.g"), p(pre + "ln1.b"));
            h = affine_rows(h, add_scalar(modulation(pre + "ada_s1"), 1.0f),
                            modulation(pre + "ada_t1"));
            Tensor q = linear(h, p(pre + "sq.w"), p(pre + "sq.b"));
            Tensor k = linear(h, p(pre + "sk.w"), p(pre + "sk.b"));
            Tensor v = linear(h, p(pre + "sv.w"), p(pre + "sv.b"));
            x = add(x, linear(attention(q, k, v), p(pre + "so.w"), p(pre + "so.b")));

            Tensor hc = layer_norm(x, p(pre + "lnc.g"), p(pre + "lnc.b"));
            Tensor cq = linear(hc, p(pre + "cq.w"), p(pre + "cq.b"));
            Tensor ck = linear(cond.emb, p(pre + "ck.w"), p(pre + "ck.b"));
            Tensor cv = linear(cond.emb, p(pre + "cv.w"), p(pre + "cv.b"));
            x = add(x, linear(attention(cq, ck, cv, &cond.mask), p(pre + "co.w"),
                              p(pre + "co.b")));

            Tensor h2 = layer_norm(x, p(pre + "ln2.g"), p(pre + "ln2.b"));
            h2 = affine_rows(h2, add_scalar(modulation(pre + "ada_s2"), 1.0f),
                             modulation(pre + "ada_t2"));
            Tensor m = linear(gelu(linear(h2, p(pre + "w1.w"), p(pre + "w1.b"))), p(pre + "w2.w"),
                              p(pre + "w2.b"));
            x = add(x, m);
        }
        Tensor out = linear(layer_norm(x, p("lnf.g"), p("lnf.b")), p("out.w"), p("out.b"));
        return unpatchify(out, 4, 8, 8, 2);
    }

private:
    static constexpr int kWidth = 64;
    static constexpr int kBlocks = 4;
};

}  // namespace

std::unique_ptr<Denoiser> make_denoiser(DenoiserKind kind, int cond_width, std::uint64_t seed) {
    if (cond_width <= 0) throw LabError("denoiser cond_width must be positive");
    if (kind == DenoiserKind::mini_unet) return std::make_unique<MiniUnet>(cond_width, seed);
    return std::make_unique<MiniDit>(cond_width, seed);
}

// ---- objective ----------------------------------------------------------------

Tensor ldm_loss(Denoiser& den, const NoiseSchedule& ns, const Tensor& z0, int t,
                const Encoding& cond, const Tensor& eps, TrainCtx* ctx) {
    Tensor zt = add_noise(ns, z0, eps, t);
    Tensor pred = den.forward(zt, t, cond, ctx);
    return mse(pred, eps);
}

// ---- sampling -------------------------------------------------------------------

SamplerKind sampler_from_name(const std::string& s) {
    if (s == "ddpm") return SamplerKind::ddpm;
    if (s == "ddim") return SamplerKind::ddim;
    throw LabError("unknown sampler '" + s + "'");
}

std::vector<int> sample_timesteps(int T, int steps) {
    if (steps < 1) throw LabError("steps must be >= 1");
    if (steps > T) throw LabError("steps cannot exceed T");
    std::vector<int> ts;
    ts.reserve(static_cast<std::size_t>(steps));
    if (steps == 1) {
        ts.push_back(T - 1);
        return ts;
    }
    for (int i = 0; i < steps; ++i) {
        double frac = static_cast<double>(steps - 1 - i) / (steps - 1);
        ts.push_back(static_cast<int>(std::lround(frac * (T - 1))));
    }
    for (std::size_t i = 1; i < ts.size(); ++i)
        if (ts[i] >= ts[i - 1]) throw LabError("timestep ladder must strictly decrease");
    return ts;
}

Tensor sample_latent(Denoiser& den, const NoiseSchedule& ns, const CondProvider& provider,
                     int steps, SamplerKind sampler, const Tensor& init, Rng* rng) {
    if (!provider) throw LabError("sample_latent: missing conditioning provider");
    if (sampler == SamplerKind::ddpm && rng == nullptr)
        throw LabError("ddpm sampling needs an rng");
    auto ts = sample_timesteps(ns.T, steps);
    Tensor z = init;
    for (int s = 0; s < steps; ++s) {
        const int t = ts[static_cast<std::size_t>(s)];
        StepCond sc = provider(s);
        Tensor eps = den.forward(z, t, sc.pos);
        if (sc.neg) {
            Tensor eps_neg = den.forward(z, t, *sc.neg);
            eps = negative_combine(eps, eps_neg, sc.gamma);
        }
        const float abar = ns.alpha_bar(t);
        const float abar_prev =
            s + 1 < steps ? ns.alpha_bar(ts[static_cast<std::size_t>(s + 1)]) : 1.0f;
        Tensor x0 = scale(sub(z, scale(eps, std::sqrt(1.0f - abar))), 1.0f / std::sqrt(abar));
        if (sampler == SamplerKind::ddim) {
            z = add(scale(x0, std::sqrt(abar_prev)), scale(eps, std::sqrt(1.0f - abar_prev)));
        } else {
            const float alpha_eff = abar / abar_prev;
            const float beta_eff = 1.0f - alpha_eff;
            const float c0 = std::sqrt(abar_prev) * beta_eff / (1.0f - abar);
            const float cz = std::sqrt(alpha_eff) * (1.0f - abar_prev) / (1.0f - abar);
            const float var = beta_eff * (1.0f - abar_prev) / (1.0f - abar);
            z = add(scale(x0, c0), scale(z, cz));
            if (var > 0.0f) {
                Tensor noise = Tensor::from(z.shape(), rng->normal_vec(z.numel()));
                z = add(z, scale(noise, std::sqrt(var)));
            }
        }
    }
    return z;
}

// ---- stack ------------------------------------------------------------------------

Denoiser& DiffusionStack::denoiser(DenoiserKind k) const {
    auto it = denoisers.find(k);
    if (it == denoisers.end())
        throw LabError("stack has no " + denoiser_kind_name(k) + " denoiser");
    return *it->second;
}

void DiffusionStack::freeze_all(bool frozen) {
    if (vae) vae->set_frozen(frozen);
    if (enc_a) enc_a->set_frozen(frozen);
    if (enc_b) enc_b->set_frozen(frozen);
    if (adapter) adapter->set_frozen(frozen);
    for (auto& [k, d] : denoisers) d->set_frozen(frozen);
}

Tensor sample_image(DiffusionStack& stack, DenoiserKind kind, const CondProvider& provider,
                    int steps, SamplerKind sampler, std::uint64_t seed) {
    Rng rng(seed);
    Shape ls = VaeLite::latent_shape();
    Tensor init = Tensor::from(ls, rng.normal_vec(shape_numel(ls)));
    Tensor z = sample_latent(stack.denoiser(kind), stack.schedule, provider, steps, sampler, init,
                             &rng);
    return stack.vae->decode(z);
}

}  // namespace bratlab
