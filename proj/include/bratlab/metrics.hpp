#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bratlab/diffusion.hpp"
#include "bratlab/inversion.hpp"

namespace bratlab {

// Small conv classifier over corpus renders predicting (shape, color,
// texture). Its per-stage activations double as content/style embeddings.
class ImageProbe {
public:
    explicit ImageProbe(std::uint64_t seed);

    struct Activations {
        Tensor r0, r1;      // raw conv outputs of the first two layers (pre-norm)
        Tensor c1, c2, c3;  // post-activation maps of the strided stages
        Tensor pooled;      // [128] spatial mean and second moment of c3
        Tensor shape_logits, color_logits, texture_logits;  // [1,k] each
    };

    Activations forward(const Tensor& img, TrainCtx* ctx = nullptr);
    ConceptSpec predict(const Tensor& img);  // argmax heads; background stays 0

    static constexpr int kFeatureDim = 128;
    static constexpr int kStyleDim = 56;  // mean+var of the 12- and 16-channel conv outputs

    ParamStore& params() { return params_; }
    std::uint64_t checksum() const { return params_.checksum(); }
    void set_frozen(bool f) { frozen_ = f; }
    bool frozen() const { return frozen_; }
    void set_trained(bool t) { trained_ = t; }
    bool trained() const { return trained_; }

private:
    ParamStore params_;
    bool frozen_ = false;
    bool trained_ = false;
};

// Adam run over the labeled corpus examples; returns the probe frozen.
ImageProbe train_probe(const std::vector<ImageExample>& corpus, int steps, std::uint64_t seed,
                       bool verbose = false);

// Fraction of labeled examples whose predicted shape and color both match.
float probe_accuracy(ImageProbe& probe, const std::vector<ImageExample>& examples);

// Content: the pooled deep features; style: channel mean+var of the first two
// conv outputs. Content is also mean-centered so shared positive activation
// mass does not saturate every cosine. Both unit norm.
Tensor content_embed(ImageProbe& probe, const Tensor& img);  // [kFeatureDim]
Tensor style_embed(ImageProbe& probe, const Tensor& img);    // [kStyleDim]

// Two-tower projection into one shared space: the text side pools encoder
// output over non-pad positions, the image side reuses the probe trunk.
class JointEmbedder {
public:
    static constexpr int kDim = 32;

    JointEmbedder(int text_width, int image_width, std::uint64_t seed);

    Tensor project_text(const Tensor& feat, TrainCtx* ctx = nullptr);
    Tensor project_image(const Tensor& feat, TrainCtx* ctx = nullptr);

    // Pseudoword ids the encoder does not carry read as <unk>.
    Tensor embed_text(TextEncoder& enc, const std::string& prompt);
    Tensor embed_image(ImageProbe& probe, const Tensor& img);

    int text_width() const { return text_width_; }
    int image_width() const { return image_width_; }
    ParamStore& params() { return params_; }
    std::uint64_t checksum() const { return params_.checksum(); }
    void set_frozen(bool f) { frozen_ = f; }
    bool frozen() const { return frozen_; }
    void set_trained(bool t) { trained_ = t; }
    bool trained() const { return trained_; }

private:
    int text_width_, image_width_;
    ParamStore params_;
    bool frozen_ = false;
    bool trained_ = false;
};

// Contrastive training on (caption, image) pairs with random mismatched
// images; examples at index % 5 == 0 are held out. Returns it frozen.
JointEmbedder train_joint(TextEncoder& enc, ImageProbe& probe,
                          const std::vector<ImageExample>& corpus, int steps, std::uint64_t seed,
                          bool verbose = false);

// On each example: does the matching image outrank one random mismatch.
float joint_ordering_accuracy(JointEmbedder& joint, TextEncoder& enc, ImageProbe& probe,
                              const std::vector<ImageExample>& examples, std::uint64_t seed);

float prompt_similarity(JointEmbedder& joint, TextEncoder& enc, ImageProbe& probe,
                        const std::string& prompt, const Tensor& img);

// Mean cosine over all (src, gen) pairs / over unordered distinct pairs.
float set_similarity(const std::vector<Tensor>& src_embs, const std::vector<Tensor>& gen_embs);
float set_consistency(const std::vector<Tensor>& gen_embs);

// Fraction of images whose predicted shape and color both equal the planted
// concept's.
float oracle_accuracy(ImageProbe& probe, const std::vector<Tensor>& images,
                      const ConceptSpec& planted);

struct MetricsReport {
    float sim = 0.0f;
    float cons = 0.0f;
    float content_sim = 0.0f;
    float content_cons = 0.0f;
    float style_sim = 0.0f;
    float style_cons = 0.0f;
    float prompt_sim = 0.0f;
    std::optional<float> oracle_acc;
    int n_images = 0;
    int n_prompts = 0;
};

// Flat "key = value" text; floats round-trip bitwise.
std::string report_text(const MetricsReport& r);
void write_report(const std::string& path, const MetricsReport& r);
MetricsReport read_report(const std::string& path);

struct EvalContext {
    DiffusionStack* stack = nullptr;
    ImageProbe* probe = nullptr;
    JointEmbedder* joint = nullptr;
    std::vector<ImageExample> sources;   // the inversion targets
    std::optional<ConceptSpec> planted;  // ground truth, when known
    Task task = Task::subject;
    int n_per_prompt = 1;
    int inference_steps = 50;
    SamplerKind sampler = SamplerKind::ddim;
    std::uint64_t seed = 0;
    std::string image_dir;  // when set, generated images land here as PPMs
};

// Installs the run's tokens, generates n_per_prompt images per eval template,
// and scores them against the sources. Deterministic given the seed with ddim.
MetricsReport evaluate_run(const InversionResult& run, const EvalContext& ev);

// Child-process scorer: image paths go to `command` on stdin one per line,
// one decimal score per line comes back.
std::vector<float> external_scores(const std::string& command,
                                   const std::vector<std::string>& image_paths);

}  // namespace bratlab
