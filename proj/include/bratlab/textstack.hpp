#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "bratlab/nn.hpp"
#include "bratlab/tensor.hpp"

namespace bratlab {

// Closed word list plus appended pseudowords. Ids are dense [0, V); pad and
// unk come first; a pseudoword id is never reassigned to another name.
class Vocabulary {
public:
    static constexpr int kPromptLen = 16;

    explicit Vocabulary(const std::vector<std::string>& words);

    int pad_id() const { return 0; }
    int unk_id() const { return 1; }
    int size() const { return static_cast<int>(id_to_word_.size()); }
    int base_size() const { return base_size_; }

    int id_of(const std::string& word) const;  // unk for unknown words
    const std::string& word_of(int id) const;
    bool contains(const std::string& word) const;
    bool is_pseudoword_id(int id) const { return id >= base_size_; }

    // Appends a pseudoword token (idempotent for a repeated name).
    int add_pseudoword(const std::string& name);

    // Lowercases, splits on whitespace, strips edge punctuation (pseudoword
    // brackets survive), maps to ids, pads/truncates to n.
    std::vector<int> tokenize(const std::string& prompt, int n = kPromptLen) const;

    // One word per line, line number = id.
    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

private:
    Vocabulary() = default;
    std::unordered_map<std::string, int> word_to_id_;
    std::vector<std::string> id_to_word_;
    int base_size_ = 0;
};

// Splits raw texts into normalized words and builds the closed vocabulary in
// first-seen order.
Vocabulary build_vocabulary(const std::vector<std::string>& texts);
std::vector<std::string> split_words(const std::string& text);

enum class TokenRole { placeholder, bonus, negative, per_step };

const char* token_role_name(TokenRole role);
TokenRole token_role_from_name(const std::string& name);

struct PseudowordEntry {
    std::string name;
    int id = -1;
    Tensor embedding;  // length M, the only trainable tensor of the entry
    std::string init_word;
    TokenRole role = TokenRole::placeholder;
};

// Token embedding sequence plus its pad mask (1 = real token).
struct Encoding {
    Tensor emb;  // [N, M]
    std::vector<float> mask;
};

// Embedding table + 2-block transformer contextualizer of width M. Frozen
// after pretraining; pseudoword embeddings live outside the table so they
// stay trainable while the encoder is frozen.
class TextEncoder {
public:
    TextEncoder(std::string name, Vocabulary* vocab, int width, std::uint64_t seed);

    const std::string& name() const { return name_; }
    int width() const { return width_; }
    Vocabulary& vocab() { return *vocab_; }
    const Vocabulary& vocab() const { return *vocab_; }

    PseudowordEntry& register_pseudoword(const std::string& name, const std::string& init_word,
                                         TokenRole role);
    bool has_pseudoword(const std::string& name) const;
    PseudowordEntry& pseudoword(const std::string& name);
    std::vector<PseudowordEntry*> pseudowords();
    void clear_pseudowords();

    // Contextualized embeddings for a token id sequence. `overrides` swaps in
    // replacement embeddings for pseudoword ids (taped tensors flow
    // gradients). `mask` overrides the pad mask derived from the ids. `ctx`
    // binds encoder parameters for pretraining; omit it for frozen use.
    Encoding encode(const std::vector<int>& ids,
                    const std::unordered_map<int, Tensor>& overrides = {},
                    const std::vector<float>* mask = nullptr, TrainCtx* ctx = nullptr);

    Encoding encode_prompt(const std::string& prompt,
                           const std::unordered_map<int, Tensor>& overrides = {},
                           TrainCtx* ctx = nullptr);

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    std::uint64_t checksum() const { return params_.checksum(); }

    void set_frozen(bool f) { frozen_ = f; }
    bool frozen() const { return frozen_; }

    // Base-table row for a word (copy, untaped).
    Tensor table_row(const std::string& word) const;

private:
    std::string name_;
    Vocabulary* vocab_;
    int width_;
    bool frozen_ = false;
    ParamStore params_;
    std::deque<PseudowordEntry> entries_;  // deque keeps references stable
};

}  // namespace bratlab
