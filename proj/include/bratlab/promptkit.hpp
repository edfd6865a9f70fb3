#pragma once

#include <string>
#include <vector>

#include "bratlab/rng.hpp"

namespace bratlab {

enum class Task { subject, style };
enum class Phase { train, eval };

const char* task_name(Task t);
Task task_from_name(const std::string& s);

struct TemplateSet {
    Task task;
    Phase phase;
    std::vector<std::string> templates;  // each contains exactly one "{}"
};

// The fixed training/evaluation template lists. Stable ordering.
const TemplateSet& get_templates(Task task, Phase phase);

// Uniform draw, deterministic under a seeded rng.
const std::string& sample_template(const TemplateSet& set, Rng& rng);

// Replaces the single "{}" with the token string.
std::string render_template(const std::string& tmpl, const std::string& tokens);

// One template per line; validates the single-placeholder rule.
TemplateSet load_template_file(const std::string& path, Task task, Phase phase);

}  // namespace bratlab
