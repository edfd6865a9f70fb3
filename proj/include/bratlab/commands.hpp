#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "bratlab/config.hpp"
#include "bratlab/toydata.hpp"

namespace bratlab {

// "striped_red_circle", "red circle", "blue_square_on_dark": words in any
// order; shape and color required, texture/background optional.
std::optional<ConceptSpec> parse_concept(const std::string& name);

// Space- or underscore-separated attribute words, each its own exclusion
// rule ("red star" holds out everything red and every star).
std::vector<HoldoutRule> parse_holdout(const std::string& text);

// Pretrains the full stack plus the oracle probe and the joint embedder,
// writes the model bundle, and prints the held-out generation quality bar.
void cmd_pretrain(const RunConfig& cfg, std::ostream& out);

// Optimizes the strategy's pseudoword embeddings against `cfg.dataset` (an
// image folder or a concept name) and writes the embeddings file plus a run
// log next to it.
void cmd_invert(const RunConfig& cfg, std::ostream& out);

// Renders `prompt_or_template` (an eval-template index or a literal prompt
// containing "{}") into `count` PPM files named p<prompt>_s<sample>.ppm.
void cmd_generate(const RunConfig& cfg, const std::string& prompt_or_template, int count,
                  std::ostream& out);

// Scores generated images against the inversion sources and writes the
// metrics report.
void cmd_evaluate(const RunConfig& cfg, std::ostream& out);

// Finite-difference sweep over every autodiff op; returns false (and lists
// the offenders) when any op exceeds tolerance or the harness self-test
// fails to flag a planted error.
bool cmd_gradcheck(std::ostream& out);

}  // namespace bratlab
