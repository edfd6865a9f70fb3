#include "bratlab/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>

#include "bratlab/diffusion.hpp"
#include "bratlab/inversion.hpp"
#include "bratlab/promptkit.hpp"
#include "bratlab/util.hpp"

namespace bratlab {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        int out = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw LabError("config: bad integer for '" + key + "': '" + v + "'");
    }
}

float parse_float(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        float out = std::stof(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw LabError("config: bad number for '" + key + "': '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw LabError("config: bad boolean for '" + key + "': '" + v + "'");
}

void require_positive(const char* key, double v) {
    if (!(v > 0)) throw LabError(std::string("config: ") + key + " must be positive");
}

}  // namespace

int RunConfig::epochs() const { return task == "style" ? epochs_style : epochs_subject; }

std::string RunConfig::model() const {
    return model_path.empty() ? data_root + "/model.bin" : model_path;
}

std::string RunConfig::embeddings() const {
    return embeddings_path.empty() ? data_root + "/embeddings.json" : embeddings_path;
}

void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
    using Setter = std::function<void(RunConfig&, const std::string&)>;
    static const std::map<std::string, Setter> setters = {
        {"epochs_subject", [](RunConfig& c, const std::string& v) { c.epochs_subject = parse_int("epochs_subject", v); }},
        {"epochs_style", [](RunConfig& c, const std::string& v) { c.epochs_style = parse_int("epochs_style", v); }},
        {"lr", [](RunConfig& c, const std::string& v) { c.lr = parse_float("lr", v); }},
        {"grad_accum", [](RunConfig& c, const std::string& v) { c.grad_accum = parse_int("grad_accum", v); }},
        {"batch", [](RunConfig& c, const std::string& v) { c.batch = parse_int("batch", v); }},
        {"lambda", [](RunConfig& c, const std::string& v) { c.lambda = parse_float("lambda", v); }},
        {"scheduler", [](RunConfig& c, const std::string& v) { c.scheduler = v; }},
        {"sampler", [](RunConfig& c, const std::string& v) { c.sampler = v; }},
        {"max_grad_norm", [](RunConfig& c, const std::string& v) { c.max_grad_norm = parse_float("max_grad_norm", v); }},
        {"gamma", [](RunConfig& c, const std::string& v) { c.gamma = parse_float("gamma", v); }},
        {"k", [](RunConfig& c, const std::string& v) { c.k = parse_int("k", v); }},
        {"inference_steps", [](RunConfig& c, const std::string& v) { c.inference_steps = parse_int("inference_steps", v); }},
        {"resolution", [](RunConfig& c, const std::string& v) { c.resolution = parse_int("resolution", v); }},
        {"seed", [](RunConfig& c, const std::string& v) {
             try {
                 c.seed = std::stoull(v);
             } catch (const std::exception&) {
                 throw LabError("config: bad seed '" + v + "'");
             }
         }},
        {"strategy", [](RunConfig& c, const std::string& v) { c.strategy = v; }},
        {"denoiser", [](RunConfig& c, const std::string& v) { c.denoiser = v; }},
        {"encoder", [](RunConfig& c, const std::string& v) { c.encoder = v; }},
        {"use_adapter", [](RunConfig& c, const std::string& v) { c.use_adapter = parse_bool("use_adapter", v); }},
        {"task", [](RunConfig& c, const std::string& v) { c.task = v; }},
        {"data_root", [](RunConfig& c, const std::string& v) { c.data_root = v; }},
        {"model_path", [](RunConfig& c, const std::string& v) { c.model_path = v; }},
        {"embeddings_path", [](RunConfig& c, const std::string& v) { c.embeddings_path = v; }},
        {"out_path", [](RunConfig& c, const std::string& v) { c.out_path = v; }},
        {"dataset", [](RunConfig& c, const std::string& v) { c.dataset = v; }},
        {"corpus_size", [](RunConfig& c, const std::string& v) { c.corpus_size = parse_int("corpus_size", v); }},
        {"pretrain_steps", [](RunConfig& c, const std::string& v) { c.pretrain_steps = parse_int("pretrain_steps", v); }},
        {"holdout", [](RunConfig& c, const std::string& v) { c.holdout = v; }},
        {"probe_corpus_size", [](RunConfig& c, const std::string& v) { c.probe_corpus_size = parse_int("probe_corpus_size", v); }},
        {"probe_steps", [](RunConfig& c, const std::string& v) { c.probe_steps = parse_int("probe_steps", v); }},
        {"joint_steps", [](RunConfig& c, const std::string& v) { c.joint_steps = parse_int("joint_steps", v); }},
        {"n_per_prompt", [](RunConfig& c, const std::string& v) { c.n_per_prompt = parse_int("n_per_prompt", v); }},
    };
    auto it = setters.find(key);
    if (it == setters.end()) throw LabError("config: unknown key '" + key + "'");
    it->second(cfg, value);
}

ConfigUpdate parse_config_file(const std::string& path, RunConfig base) {
    std::ifstream is(path);
    if (!is) throw LabError("cannot open config file: " + path);
    ConfigUpdate out{std::move(base), {}};
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw LabError("config: line " + std::to_string(lineno) + " has no '='");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw LabError("config: line " + std::to_string(lineno) + " has no key");
        apply_config_kv(out.cfg, key, value);
        out.keys.insert(key);
    }
    return out;
}

void validate_config(const RunConfig& cfg, const std::set<std::string>& explicit_keys) {
    require_positive("epochs_subject", cfg.epochs_subject);
    require_positive("epochs_style", cfg.epochs_style);
    require_positive("lr", cfg.lr);
    require_positive("grad_accum", cfg.grad_accum);
    require_positive("batch", cfg.batch);
    require_positive("max_grad_norm", cfg.max_grad_norm);
    require_positive("inference_steps", cfg.inference_steps);
    require_positive("corpus_size", cfg.corpus_size);
    require_positive("pretrain_steps", cfg.pretrain_steps);
    require_positive("probe_corpus_size", cfg.probe_corpus_size);
    require_positive("probe_steps", cfg.probe_steps);
    require_positive("joint_steps", cfg.joint_steps);
    if (cfg.lambda < 0) throw LabError("config: lambda must be >= 0");
    if (cfg.resolution != 32) throw LabError("config: only resolution 32 is supported");
    if (cfg.k < 1 || cfg.k > 50) throw LabError("config: k must lie in [1, 50]");

    StrategyKind strat = strategy_from_name(cfg.strategy);
    if (explicit_keys.count("k") && strat != StrategyKind::multi_k)
        throw LabError("config: k applies only to strategy multi_k");
    if (explicit_keys.count("gamma") && strat != StrategyKind::negative)
        throw LabError("config: gamma applies only to strategy negative");

    require_positive("n_per_prompt", cfg.n_per_prompt);
    sampler_from_name(cfg.scheduler);
    sampler_from_name(cfg.sampler);
    denoiser_kind_from_name(cfg.denoiser);
    task_from_name(cfg.task);
    if (cfg.encoder != "a" && cfg.encoder != "b")
        throw LabError("config: encoder must be 'a' or 'b'");
    if (cfg.use_adapter && cfg.encoder == "b")
        throw LabError("config: the adapter bridges encoder a; use --encoder a");
    if (cfg.encoder == "a" && !cfg.use_adapter)
        throw LabError("config: encoder a conditions the denoiser only through the adapter");
}

void apply_env(RunConfig& cfg) {
    const char* root = std::getenv("BRATLAB_DATA");
    if (root && *root) cfg.data_root = root;
}

}  // namespace bratlab
