#pragma once

#include <cstdint>
#include <set>
#include <string>

namespace bratlab {

// Flat run configuration: built-in defaults, overridden by a key = value
// config file, overridden again by command-line flags.
struct RunConfig {
    int epochs_subject = 250;
    int epochs_style = 500;
    float lr = 0.08f;
    int grad_accum = 8;
    int batch = 1;
    float lambda = 0.01f;
    std::string scheduler = "ddpm";  // training noise process
    std::string sampler = "ddim";    // generation/evaluation sampler
    float max_grad_norm = 10.0f;
    float gamma = 5.0f;
    int k = 10;
    int inference_steps = 50;
    int resolution = 32;
    std::uint64_t seed = 0;
    std::string strategy = "default";
    std::string denoiser = "mini_unet";
    std::string encoder = "b";
    bool use_adapter = false;
    std::string task = "subject";

    // paths
    std::string data_root = "data";
    std::string model_path;       // default <data_root>/model.bin
    std::string embeddings_path;  // default <data_root>/embeddings.json
    std::string out_path;         // subcommand primary output override
    std::string dataset;          // folder path or concept name for invert/evaluate

    // pretraining shape
    int corpus_size = 1000;
    int pretrain_steps = 8000;
    int probe_corpus_size = 16000;
    int probe_steps = 24000;
    int joint_steps = 4000;
    std::string holdout;  // concept words excluded from the pretrain corpus

    // evaluation shape
    int n_per_prompt = 1;

    int epochs() const;          // by task
    std::string model() const;   // resolved model path
    std::string embeddings() const;
};

// Parsed key assignments, tracking which keys were given explicitly so
// strategy-specific flags can be validated.
struct ConfigUpdate {
    RunConfig cfg;
    std::set<std::string> keys;
};

// Applies "key = value"; throws on unknown keys or unparseable values.
void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value);

// Flat UTF-8 file of key = value lines; '#' starts a comment.
ConfigUpdate parse_config_file(const std::string& path, RunConfig base = {});

// Enforces cross-field rules (k only with multi_k, gamma only with negative,
// positivity, known enum values). `explicit_keys` marks user-given fields.
void validate_config(const RunConfig& cfg, const std::set<std::string>& explicit_keys);

// BRATLAB_DATA, when set, overrides cfg.data_root.
void apply_env(RunConfig& cfg);

}  // namespace bratlab
