#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bratlab/adapter.hpp"
#include "bratlab/nn.hpp"
#include "bratlab/textstack.hpp"
#include "bratlab/toydata.hpp"

namespace bratlab {

// ---- noise schedule --------------------------------------------------------

struct NoiseSchedule {
    int T = 0;
    std::vector<float> betas;
    std::vector<float> alphas_cumprod;  // strictly decreasing, near 1 at t=0

    static NoiseSchedule linear(int T = 1000, float beta_start = 1e-4f, float beta_end = 2e-2f);

    float alpha_bar(int t) const;
};

// z_t = sqrt(abar)*z0 + sqrt(1-abar)*eps. Exposed with an explicit abar so
// the clean (abar=1) and pure-noise (abar=0) limits hold exactly.
Tensor forward_diffuse(const Tensor& z0, const Tensor& eps, float alpha_bar);

Tensor add_noise(const NoiseSchedule& ns, const Tensor& z0, const Tensor& eps, int t);

// ---- VAE-lite --------------------------------------------------------------

// Convolutional autoencoder 3x32x32 <-> 4x8x8 with a calibrated latent scale
// so latents are roughly unit variance for the denoiser.
class VaeLite {
public:
    explicit VaeLite(std::uint64_t seed);

    Tensor encode(const Tensor& img, TrainCtx* ctx = nullptr);
    Tensor decode(const Tensor& z, TrainCtx* ctx = nullptr);

    static Shape latent_shape() { return {4, 8, 8}; }

    float latent_scale() const;
    void set_latent_scale(float s);

    ParamStore& params() { return params_; }
    std::uint64_t checksum() const { return params_.checksum(); }
    void set_frozen(bool f) { frozen_ = f; }
    bool frozen() const { return frozen_; }

private:
    ParamStore params_;
    bool frozen_ = false;
};

float psnr(const Tensor& a, const Tensor& b);  // dB, peak-to-peak 2

// ---- denoisers -------------------------------------------------------------

enum class DenoiserKind { mini_unet, mini_dit };

std::string denoiser_kind_name(DenoiserKind k);
DenoiserKind denoiser_kind_from_name(const std::string& s);

// Noise predictor over latents. Both families take (latent, timestep, text
// conditioning) and return a same-shape noise estimate.
class Denoiser {
public:
    virtual ~Denoiser() = default;

    virtual Tensor forward(const Tensor& z, int t, const Encoding& cond,
                           TrainCtx* ctx = nullptr) = 0;
    virtual DenoiserKind kind() const = 0;

    int cond_width() const { return cond_width_; }
    ParamStore& params() { return params_; }
    std::uint64_t checksum() const { return params_.checksum(); }
    void set_frozen(bool f) { frozen_ = f; }
    bool frozen() const { return frozen_; }

protected:
    Denoiser(int cond_width) : cond_width_(cond_width) {}

    int cond_width_;
    bool frozen_ = false;
    ParamStore params_;
};

std::unique_ptr<Denoiser> make_denoiser(DenoiserKind kind, int cond_width, std::uint64_t seed);

// ---- training objective ----------------------------------------------------

// mean((eps - predicted)^2); differentiable through cond and, when ctx binds
// the denoiser, through its parameters.
Tensor ldm_loss(Denoiser& den, const NoiseSchedule& ns, const Tensor& z0, int t,
                const Encoding& cond, const Tensor& eps, TrainCtx* ctx = nullptr);

// ---- sampling ---------------------------------------------------------------

struct StepCond {
    Encoding pos;
    std::optional<Encoding> neg;  // engaged by the negative-token strategy
    float gamma = 1.0f;
};
using CondProvider = std::function<StepCond(int step)>;

enum class SamplerKind { ddpm, ddim };

SamplerKind sampler_from_name(const std::string& s);

// Descending timestep ladder from T-1 to 0, length `steps`.
std::vector<int> sample_timesteps(int T, int steps);

// Runs the reverse process from `init` (a draw from N(0,1) in latent space).
// ddim is deterministic; ddpm consumes `rng` for its per-step noise.
Tensor sample_latent(Denoiser& den, const NoiseSchedule& ns, const CondProvider& provider,
                     int steps, SamplerKind sampler, const Tensor& init, Rng* rng = nullptr);

// ---- pretrained stack -------------------------------------------------------

// Everything inversion runs against, frozen after pretraining.
struct DiffusionStack {
    NoiseSchedule schedule;
    std::unique_ptr<Vocabulary> vocab;
    std::unique_ptr<VaeLite> vae;
    std::unique_ptr<TextEncoder> enc_a;  // narrow encoder, adapter path
    std::unique_ptr<TextEncoder> enc_b;  // conditioning encoder
    std::unique_ptr<AdapterMap> adapter;
    std::map<DenoiserKind, std::unique_ptr<Denoiser>> denoisers;

    bool has(DenoiserKind k) const { return denoisers.count(k) != 0; }
    Denoiser& denoiser(DenoiserKind k) const;

    void freeze_all(bool frozen = true);
};

// Draws the initial latent from `seed`, runs the sampler, decodes.
Tensor sample_image(DiffusionStack& stack, DenoiserKind kind, const CondProvider& provider,
                    int steps, SamplerKind sampler, std::uint64_t seed);

struct PretrainOptions {
    int corpus_size = 1000;
    std::vector<HoldoutRule> holdout;
    int res = 32;
    int enc_a_width = 48;
    int enc_b_width = 64;
    int vae_steps = 3000;
    int denoiser_steps = 8000;
    int distill_steps = 2500;
    int adapter_steps = 3000;
    bool train_unet = true;
    bool train_dit = false;
    std::uint64_t seed = 0;
    bool verbose = false;
};

// Full pretraining pipeline: VAE, conditioning encoder + denoiser(s), narrow
// encoder distillation, adapter. Returns the stack frozen.
DiffusionStack pretrain_stack(const PretrainOptions& opts);

}  // namespace bratlab
