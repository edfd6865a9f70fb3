#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bratlab/rng.hpp"
#include "bratlab/tensor.hpp"

namespace bratlab {

inline constexpr int kNumShapes = 4;
inline constexpr int kNumColors = 8;
inline constexpr int kNumTextures = 3;
inline constexpr int kNumBackgrounds = 4;

const char* shape_name(int i);
const char* color_name(int i);
const char* texture_name(int i);       // plain / stripes / dots
const char* texture_adjective(int i);  // plain / striped / dotted
const char* background_name(int i);

int shape_from_name(const std::string& s);
int color_from_name(const std::string& s);

// One planted concept: what the image shows and on what background.
struct ConceptSpec {
    int shape = 0;
    int color = 0;
    int texture = 0;
    int background = 0;

    std::string phrase() const;    // "striped red circle"
    std::string caption() const;   // "a photo of a striped red circle"
    std::string dir_name() const;  // "striped_red_circle_on_black"
    bool operator==(const ConceptSpec&) const = default;
};

// Partial concept matcher for corpus exclusion; unset fields match anything.
struct HoldoutRule {
    std::optional<int> shape, color, texture, background;
    bool matches(const ConceptSpec& c) const;
};

struct ImageExample {
    Tensor pixels;  // [3, H, W] in [-1, 1]
    std::string caption;
    std::optional<ConceptSpec> spec;
    int style_id = -1;  // -1 = unstyled
};

int num_styles();
const char* style_name(int id);

// Deterministic rasterization of a concept with jittered placement.
Tensor render_concept(const ConceptSpec& c, int res, Rng& rng);

// Global rendering transform (palette remap + stroke pattern).
Tensor apply_style(const Tensor& pixels, int style_id);

// Labeled pretraining corpus. Captions cycle through the full template pool
// so every vocabulary word occurs; roughly a quarter of images are styled.
std::vector<ImageExample> gen_corpus(std::uint64_t seed, int count,
                                     const std::vector<HoldoutRule>& holdout, int res = 32);

// n jittered renderings of one concept (the "user photos" of a subject).
std::vector<ImageExample> gen_subject_instances(const ConceptSpec& c, int n, std::uint64_t seed,
                                                int res = 32);

// Single styled source image for the style task.
std::vector<ImageExample> gen_style_instances(int style_id, int n, std::uint64_t seed,
                                              int res = 32);

// "fancy_boot" -> "boot", "dog3" -> "dog": strip digits, keep the last
// underscore-separated word, lowercase.
std::string normalize_label(const std::string& label);

// Binary PPM (P6, maxval 255).
void save_ppm(const std::string& path, const Tensor& pixels);
Tensor load_ppm(const std::string& path);

// Center-pad to square (pad value 0 = mid-gray), bilinear-resize to res.
Tensor pad_and_resize(const Tensor& pixels, int res);

// Reads every .ppm in the directory (sorted), preprocessed to [3,res,res];
// caption sidecars NNN.txt are attached when present.
std::vector<ImageExample> load_folder(const std::string& path, int res = 32);

// Writes NNN.ppm plus NNN.txt caption sidecars.
void save_dataset(const std::string& dir, const std::vector<ImageExample>& examples);

// Every text that can occur in corpus captions (template sets, concept
// phrases, style names); feeds vocabulary construction.
std::vector<std::string> corpus_vocab_texts();

}  // namespace bratlab
