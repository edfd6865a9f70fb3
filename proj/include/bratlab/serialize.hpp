#pragma once

#include <memory>
#include <string>
#include <vector>

#include "bratlab/diffusion.hpp"
#include "bratlab/metrics.hpp"

namespace bratlab {

// Model bundle format: magic "BRATMDL1", then named sections. Each section is
// a length-prefixed UTF-8 name, a u32 rank, rank u32 extents, and the f32
// payload; all integers and floats little-endian.

struct NamedTensor {
    std::string name;
    Tensor value;
};

void write_model_file(const std::string& path, const std::vector<NamedTensor>& sections);
std::vector<NamedTensor> read_model_file(const std::string& path);

// Bundles the frozen stack (plus optional probe and joint embedder) into one
// model file. The vocabulary goes to a sidecar word list at path + ".vocab".
void save_model(const std::string& path, DiffusionStack& stack, ImageProbe* probe = nullptr,
                JointEmbedder* joint = nullptr);

struct LoadedModel {
    DiffusionStack stack;
    std::unique_ptr<ImageProbe> probe;    // null when the bundle has none
    std::unique_ptr<JointEmbedder> joint;
};

LoadedModel load_model(const std::string& path);

}  // namespace bratlab
