#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "bratlab/commands.hpp"
#include "bratlab/config.hpp"
#include "bratlab/util.hpp"

namespace {

struct FlagState {
    std::string config_path;
    std::string prompt;  // generate only
    int count = 1;       // generate only
};

// defaults -> config file -> command-line flags, tracking explicit keys so
// strategy-gated fields validate correctly.
void add_common_flags(CLI::App* cmd, bratlab::RunConfig& cfg, std::set<std::string>& keys,
                      FlagState& state) {
    cmd->add_option("--config", state.config_path, "flat key = value config file");

    auto track = [&keys, cmd](const std::string& flag, const std::string& key, auto& field,
                              const std::string& help) {
        cmd->add_option(flag, field, help)->each([&keys, key](const std::string&) {
            keys.insert(key);
        });
    };
    track("--seed", "seed", cfg.seed, "run seed");
    track("--strategy", "strategy", cfg.strategy,
          "default | multi_k | negative | bonus | triple_bonus");
    track("--k", "k", cfg.k, "token count for multi_k");
    track("--gamma", "gamma", cfg.gamma, "negative-combination weight");
    track("--lambda", "lambda", cfg.lambda, "pair-orthogonality weight");
    track("--denoiser", "denoiser", cfg.denoiser, "mini_unet | mini_dit");
    track("--encoder", "encoder", cfg.encoder, "a | b");
    track("--task", "task", cfg.task, "subject | style");
    track("--out", "out_path", cfg.out_path, "primary output path");
    track("--model", "model_path", cfg.model_path, "model bundle path");
    track("--embeddings", "embeddings_path", cfg.embeddings_path, "embeddings file path");
    track("--dataset", "dataset", cfg.dataset, "image folder or concept name");
    track("--data-root", "data_root", cfg.data_root, "artifact directory");
    track("--scheduler", "scheduler", cfg.scheduler, "training noise scheduler (ddpm)");
    track("--sampler", "sampler", cfg.sampler, "generation sampler: ddim | ddpm");
    track("--inference-steps", "inference_steps", cfg.inference_steps, "sampling step count");
    track("--epochs-subject", "epochs_subject", cfg.epochs_subject, "inversion epochs (subject)");
    track("--epochs-style", "epochs_style", cfg.epochs_style, "inversion epochs (style)");
    track("--lr", "lr", cfg.lr, "inversion learning rate");
    track("--corpus-size", "corpus_size", cfg.corpus_size, "pretraining corpus size");
    track("--pretrain-steps", "pretrain_steps", cfg.pretrain_steps, "denoiser training steps");
    track("--probe-corpus-size", "probe_corpus_size", cfg.probe_corpus_size,
          "oracle probe corpus size");
    track("--probe-steps", "probe_steps", cfg.probe_steps, "oracle probe training steps");
    track("--joint-steps", "joint_steps", cfg.joint_steps, "joint embedder training steps");
    track("--holdout", "holdout", cfg.holdout, "attribute words excluded from pretraining");
    track("--n-per-prompt", "n_per_prompt", cfg.n_per_prompt, "eval images per template");

    cmd->add_flag("--use-adapter", cfg.use_adapter, "train/condition through the adapter")
        ->each([&keys](const std::string&) { keys.insert("use_adapter"); });
}

// Re-applies flag values over the config file by replaying explicit keys.
bratlab::RunConfig finalize(const bratlab::RunConfig& flag_cfg, const FlagState& state,
                            const std::set<std::string>& keys) {
    bratlab::RunConfig cfg;
    std::set<std::string> all_keys = keys;
    if (!state.config_path.empty()) {
        auto update = bratlab::parse_config_file(state.config_path);
        cfg = update.cfg;
        all_keys.insert(update.keys.begin(), update.keys.end());
    }
    // flags win over the file
    if (keys.count("seed")) cfg.seed = flag_cfg.seed;
    if (keys.count("strategy")) cfg.strategy = flag_cfg.strategy;
    if (keys.count("k")) cfg.k = flag_cfg.k;
    if (keys.count("gamma")) cfg.gamma = flag_cfg.gamma;
    if (keys.count("lambda")) cfg.lambda = flag_cfg.lambda;
    if (keys.count("denoiser")) cfg.denoiser = flag_cfg.denoiser;
    if (keys.count("encoder")) cfg.encoder = flag_cfg.encoder;
    if (keys.count("use_adapter")) cfg.use_adapter = flag_cfg.use_adapter;
    if (keys.count("task")) cfg.task = flag_cfg.task;
    if (keys.count("out_path")) cfg.out_path = flag_cfg.out_path;
    if (keys.count("model_path")) cfg.model_path = flag_cfg.model_path;
    if (keys.count("embeddings_path")) cfg.embeddings_path = flag_cfg.embeddings_path;
    if (keys.count("dataset")) cfg.dataset = flag_cfg.dataset;
    if (keys.count("data_root")) cfg.data_root = flag_cfg.data_root;
    if (keys.count("scheduler")) cfg.scheduler = flag_cfg.scheduler;
    if (keys.count("sampler")) cfg.sampler = flag_cfg.sampler;
    if (keys.count("inference_steps")) cfg.inference_steps = flag_cfg.inference_steps;
    if (keys.count("epochs_subject")) cfg.epochs_subject = flag_cfg.epochs_subject;
    if (keys.count("epochs_style")) cfg.epochs_style = flag_cfg.epochs_style;
    if (keys.count("lr")) cfg.lr = flag_cfg.lr;
    if (keys.count("corpus_size")) cfg.corpus_size = flag_cfg.corpus_size;
    if (keys.count("pretrain_steps")) cfg.pretrain_steps = flag_cfg.pretrain_steps;
    if (keys.count("probe_corpus_size")) cfg.probe_corpus_size = flag_cfg.probe_corpus_size;
    if (keys.count("probe_steps")) cfg.probe_steps = flag_cfg.probe_steps;
    if (keys.count("joint_steps")) cfg.joint_steps = flag_cfg.joint_steps;
    if (keys.count("holdout")) cfg.holdout = flag_cfg.holdout;
    if (keys.count("n_per_prompt")) cfg.n_per_prompt = flag_cfg.n_per_prompt;

    bratlab::apply_env(cfg);
    bratlab::validate_config(cfg, all_keys);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bratlab: desk-scale textual inversion laboratory"};
    app.require_subcommand(1);

    bratlab::RunConfig flag_cfg;
    std::set<std::string> keys;
    FlagState state;

    CLI::App* pre = app.add_subcommand("pretrain", "train the frozen stack and oracle embedders");
    add_common_flags(pre, flag_cfg, keys, state);

    CLI::App* inv = app.add_subcommand("invert", "optimize pseudoword embeddings");
    add_common_flags(inv, flag_cfg, keys, state);

    CLI::App* gen = app.add_subcommand("generate", "sample images with installed tokens");
    add_common_flags(gen, flag_cfg, keys, state);
    gen->add_option("prompt", state.prompt, "eval-template index or literal prompt with {}")
        ->required();
    gen->add_option("count", state.count, "number of images");

    CLI::App* eva = app.add_subcommand("evaluate", "score a run and write the metrics report");
    add_common_flags(eva, flag_cfg, keys, state);

    CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference sweep over autodiff ops");
    (void)grad;

    CLI11_PARSE(app, argc, argv);

    try {
        if (grad->parsed()) return bratlab::cmd_gradcheck(std::cout) ? 0 : 1;
        bratlab::RunConfig cfg = finalize(flag_cfg, state, keys);
        if (pre->parsed()) {
            bratlab::cmd_pretrain(cfg, std::cout);
        } else if (inv->parsed()) {
            bratlab::cmd_invert(cfg, std::cout);
        } else if (gen->parsed()) {
            bratlab::cmd_generate(cfg, state.prompt, state.count, std::cout);
        } else if (eva->parsed()) {
            bratlab::cmd_evaluate(cfg, std::cout);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
