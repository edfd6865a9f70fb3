#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bratlab/diffusion.hpp"
#include "bratlab/promptkit.hpp"
#include "bratlab/textstack.hpp"

namespace bratlab {

enum class StrategyKind { default_, multi_k, negative, bonus, triple_bonus };

std::string strategy_name(StrategyKind k);
StrategyKind strategy_from_name(const std::string& s);

struct TokenStrategy {
    StrategyKind kind = StrategyKind::default_;
    int k = 10;            // multi_k only
    float gamma = 5.0f;    // negative only
    float lambda = 0.01f;  // pair-orthogonality weight

    int bonus_count() const;     // 0 / 1 / 3
    int trainable_count() const; // total pseudowords the strategy owns
};

// lambda * sum over unordered pairs of cos^2(e_i, e_j). Minimum at mutual
// orthogonality; +/- collinear pairs score the same.
Tensor spare_loss(const std::vector<Tensor>& embeddings, float lambda);

// f(a, b) = b + gamma * (a - b)
Tensor negative_combine(const Tensor& eps_pos, const Tensor& eps_neg, float gamma);

// Which of the k tokens drives inference step `step` out of `total_steps`.
int token_for_step(int step, int total_steps, int k);

// Token index active at training timestep t (same block structure over [0,T)).
int token_for_timestep(int t, int T, int k);

// The string substituted for "{}": "<sks>", "<sks> <fkf>", "<sks_k3>", ...
std::string token_string(const TokenStrategy& s, int multi_index = 0);

// Names of every pseudoword the strategy trains, prompt tokens first.
std::vector<std::string> strategy_token_names(const TokenStrategy& s);

// Bare negative prompt for the negative strategy, empty otherwise.
std::optional<std::string> negative_prompt(const TokenStrategy& s);

std::string build_prompt(const std::string& tmpl, const TokenStrategy& s, Phase phase,
                         std::optional<int> step = std::nullopt, int total_steps = 50);

// Registers the strategy's pseudowords on `enc`, each initialized from
// init_word's embedding row. Returns them in strategy_token_names order.
std::vector<PseudowordEntry*> register_strategy_tokens(TextEncoder& enc, const TokenStrategy& s,
                                                       const std::string& init_word);

struct InversionConfig {
    TokenStrategy strategy;
    Task task = Task::subject;
    float lr = 0.08f;
    int epochs = 250;
    int grad_accum = 8;
    float max_grad_norm = 10.0f;
    int total_steps = 50;  // inference-step count the multi_k mapping targets
    DenoiserKind kind = DenoiserKind::mini_unet;
    bool use_adapter = false;  // train in encoder A space, bridge through the adapter
    std::string init_word;
    std::uint64_t seed = 0;
    bool verbose = false;
};

struct EpochStats {
    int epoch;
    float loss_ldm;
    float loss_spare;
    float cos_vw;  // |cos| of the first trainable pair, 0 when single-token
};

struct TokenRecord {
    std::string name;
    TokenRole role;
    std::string init_word;
    std::vector<float> values;
};

struct InversionResult {
    TokenStrategy strategy;
    int total_steps = 50;
    int width = 0;
    bool use_adapter = false;
    DenoiserKind kind = DenoiserKind::mini_unet;
    std::vector<TokenRecord> tokens;
    std::vector<EpochStats> trace;
};

// Embedding-only optimization against the frozen stack: SGD, gradient
// accumulation, global-norm clipping. Aborts on non-finite loss with the
// epoch/micro-step position.
InversionResult train_inversion(DiffusionStack& stack, const std::vector<ImageExample>& images,
                                const InversionConfig& cfg);

// Structured-text embedding files; float values round-trip bitwise.
void save_embeddings(const std::string& path, const InversionResult& run);
InversionResult load_embeddings(const std::string& path);

// Registers the file's tokens on `enc` and overwrites their embeddings.
std::vector<PseudowordEntry*> install_tokens(TextEncoder& enc, const InversionResult& run);

// Per-step conditioning for sampling with installed tokens: renders the
// template with the step-appropriate token string, encodes it on the chosen
// path, and attaches the negative prompt when the strategy uses one.
CondProvider make_cond_provider(DiffusionStack& stack, const TokenStrategy& s,
                                const std::string& tmpl, bool use_adapter, int total_steps);

void append_run_log(const std::string& path, const std::vector<EpochStats>& trace);

}  // namespace bratlab
