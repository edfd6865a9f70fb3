#include "bratlab/textstack.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

namespace bratlab {

namespace {

std::string normalize_word(const std::string& raw) {
    std::string w;
    w.reserve(raw.size());
    for (char c : raw) w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    auto keep = [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '<' || c == '>';
    };
    std::size_t b = 0, e = w.size();
    while (b < e && !keep(w[b])) ++b;
    while (e > b && !keep(w[e - 1])) --e;
    return w.substr(b, e - b);
}

bool valid_pseudoword_name(const std::string& name) {
    if (name.size() < 3 || name.front() != '<' || name.back() != '>') return false;
    for (std::size_t i = 1; i + 1 < name.size(); ++i) {
        const char c = name[i];
        const bool ok = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
        if (!ok) return false;
    }
    return true;
}

}  // namespace

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) {
                std::string w = normalize_word(cur);
                if (!w.empty()) out.push_back(std::move(w));
                cur.clear();
            }
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) {
        std::string w = normalize_word(cur);
        if (!w.empty()) out.push_back(std::move(w));
    }
    return out;
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
    auto push = [this](const std::string& w) {
        if (word_to_id_.count(w)) return;
        word_to_id_[w] = static_cast<int>(id_to_word_.size());
        id_to_word_.push_back(w);
    };
    push("<pad>");
    push("<unk>");
    for (const auto& w : words) push(w);
    base_size_ = static_cast<int>(id_to_word_.size());
}

int Vocabulary::id_of(const std::string& word) const {
    auto it = word_to_id_.find(word);
    return it == word_to_id_.end() ? unk_id() : it->second;
}

const std::string& Vocabulary::word_of(int id) const {
    if (id < 0 || id >= size()) throw LabError("vocabulary id out of range");
    return id_to_word_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(const std::string& word) const { return word_to_id_.count(word) != 0; }

int Vocabulary::add_pseudoword(const std::string& name) {
    if (!valid_pseudoword_name(name)) throw LabError("bad pseudoword name '" + name + "'");
    auto it = word_to_id_.find(name);
    if (it != word_to_id_.end()) {
        if (it->second < base_size_) throw LabError("'" + name + "' collides with a base word");
        return it->second;
    }
    const int id = static_cast<int>(id_to_word_.size());
    word_to_id_[name] = id;
    id_to_word_.push_back(name);
    return id;
}

std::vector<int> Vocabulary::tokenize(const std::string& prompt, int n) const {
    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(n));
    for (const auto& w : split_words(prompt)) {
        if (static_cast<int>(ids.size()) == n) break;
        ids.push_back(id_of(w));
    }
    while (static_cast<int>(ids.size()) < n) ids.push_back(pad_id());
    return ids;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LabError("cannot write vocabulary to " + path);
    for (const auto& w : id_to_word_) out << w << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LabError("cannot read vocabulary from " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        v.word_to_id_[line] = static_cast<int>(v.id_to_word_.size());
        v.id_to_word_.push_back(line);
    }
    if (v.id_to_word_.size() < 2 || v.id_to_word_[0] != "<pad>" || v.id_to_word_[1] != "<unk>") {
        throw LabError("vocabulary file missing <pad>/<unk> header rows");
    }
    // base words never carry brackets, so the first bracketed entry past the
    // two specials marks where pseudowords start
    v.base_size_ = static_cast<int>(v.id_to_word_.size());
    for (std::size_t i = 2; i < v.id_to_word_.size(); ++i) {
        if (valid_pseudoword_name(v.id_to_word_[i])) {
            v.base_size_ = static_cast<int>(i);
            break;
        }
    }
    return v;
}

Vocabulary build_vocabulary(const std::vector<std::string>& texts) {
    std::vector<std::string> words;
    std::unordered_map<std::string, bool> seen;
    for (const auto& t : texts) {
        for (auto& w : split_words(t)) {
            if (seen.count(w)) continue;
            seen[w] = true;
            words.push_back(w);
        }
    }
    return Vocabulary(words);
}

const char* token_role_name(TokenRole role) {
    switch (role) {
        case TokenRole::placeholder: return "placeholder";
        case TokenRole::bonus: return "bonus";
        case TokenRole::negative: return "negative";
        case TokenRole::per_step: return "per_step";
    }
    throw LabError("bad token role");
}

TokenRole token_role_from_name(const std::string& name) {
    if (name == "placeholder") return TokenRole::placeholder;
    if (name == "bonus") return TokenRole::bonus;
    if (name == "negative") return TokenRole::negative;
    if (name == "per_step") return TokenRole::per_step;
    throw LabError("unknown token role '" + name + "'");
}

TextEncoder::TextEncoder(std::string name, Vocabulary* vocab, int width, std::uint64_t seed)
    : name_(std::move(name)), vocab_(vocab), width_(width) {
    if (vocab_ == nullptr) throw LabError("text encoder needs a vocabulary");
    Rng rng(seed);
    const int v = vocab_->base_size();
    const int m = width_;
    params_.add("table", randn_init(rng, {v, m}, 0.05f));
    params_.add("pos", randn_init(rng, {Vocabulary::kPromptLen, m}, 0.02f));
    const float wsd = 1.0f / std::sqrt(static_cast<float>(m));
    for (int b = 0; b < 2; ++b) {
        const std::string p = "b" + std::to_string(b) + ".";
        params_.add(p + "ln1.g", Tensor::full({m}, 1.0f));
        params_.add(p + "ln1.b", Tensor::zeros({m}));
        for (const char* h : {"wq", "wk", "wv", "wo"}) {
            params_.add(p + h, randn_init(rng, {m, m}, wsd));
        }
        for (const char* h : {"bq", "bk", "bv", "bo"}) params_.add(p + h, Tensor::zeros({m}));
        params_.add(p + "ln2.g", Tensor::full({m}, 1.0f));
        params_.add(p + "ln2.b", Tensor::zeros({m}));
        params_.add(p + "w1", randn_init(rng, {2 * m, m}, wsd));
        params_.add(p + "b1", Tensor::zeros({2 * m}));
        params_.add(p + "w2", randn_init(rng, {m, 2 * m}, wsd / 2.0f));
        params_.add(p + "b2", Tensor::zeros({m}));
    }
    params_.add("lnf.g", Tensor::full({m}, 1.0f));
    params_.add("lnf.b", Tensor::zeros({m}));
}

PseudowordEntry& TextEncoder::register_pseudoword(const std::string& name,
                                                  const std::string& init_word, TokenRole role) {
    if (has_pseudoword(name)) throw LabError("pseudoword '" + name + "' already registered");
    if (!vocab_->contains(init_word)) throw LabError("unknown init word '" + init_word + "'");
    const int init_id = vocab_->id_of(init_word);
    if (vocab_->is_pseudoword_id(init_id)) {
        throw LabError("init word '" + init_word + "' is itself a pseudoword");
    }
    PseudowordEntry entry;
    entry.name = name;
    entry.id = vocab_->add_pseudoword(name);
    entry.embedding = table_row(init_word);
    entry.init_word = init_word;
    entry.role = role;
    entries_.push_back(std::move(entry));
    return entries_.back();
}

bool TextEncoder::has_pseudoword(const std::string& name) const {
    for (const auto& e : entries_) {
        if (e.name == name) return true;
    }
    return false;
}

PseudowordEntry& TextEncoder::pseudoword(const std::string& name) {
    for (auto& e : entries_) {
        if (e.name == name) return e;
    }
    throw LabError("pseudoword '" + name + "' not registered");
}

std::vector<PseudowordEntry*> TextEncoder::pseudowords() {
    std::vector<PseudowordEntry*> out;
    for (auto& e : entries_) out.push_back(&e);
    return out;
}

void TextEncoder::clear_pseudowords() { entries_.clear(); }

Tensor TextEncoder::table_row(const std::string& word) const {
    const int id = vocab_->id_of(word);
    if (vocab_->is_pseudoword_id(id)) throw LabError("'" + word + "' has no base table row");
    const Tensor& table = params_.at("table");
    std::vector<float> row(static_cast<std::size_t>(width_));
    for (int j = 0; j < width_; ++j) {
        row[static_cast<std::size_t>(j)] = table.at(static_cast<std::size_t>(id * width_ + j));
    }
    return Tensor::from({width_}, std::move(row));
}

Encoding TextEncoder::encode(const std::vector<int>& ids,
                             const std::unordered_map<int, Tensor>& overrides,
                             const std::vector<float>* mask, TrainCtx* ctx) {
    if (ctx != nullptr && frozen_) throw LabError("encoder '" + name_ + "' is frozen");
    const int n = static_cast<int>(ids.size());
    if (n != Vocabulary::kPromptLen) throw LabError("encode: expected fixed prompt length");
    for (const auto& [id, t] : overrides) {
        if (!vocab_->is_pseudoword_id(id)) throw LabError("override for non-pseudoword id");
        if (t.numel() != static_cast<std::size_t>(width_)) throw LabError("override width mismatch");
    }

    auto param = [&](const std::string& nm) -> Tensor {
        return ctx ? ctx->bind(params_[nm]) : params_.at(nm);
    };

    // base rows come through a one-hot matmul so table gradients flow during
    // pretraining; pseudoword rows ride a parallel additive path
    const int v = vocab_->base_size();
    std::vector<float> onehot(static_cast<std::size_t>(n) * v, 0.0f);
    std::vector<Tensor> extra_rows;
    bool any_extra = false;
    Tensor zero_row = Tensor::zeros({width_});
    for (int i = 0; i < n; ++i) {
        const int id = ids[static_cast<std::size_t>(i)];
        if (!vocab_->is_pseudoword_id(id)) {
            onehot[static_cast<std::size_t>(i) * v + id] = 1.0f;
            extra_rows.push_back(zero_row);
            continue;
        }
        any_extra = true;
        auto it = overrides.find(id);
        if (it != overrides.end()) {
            extra_rows.push_back(it->second);
            continue;
        }
        const std::string& nm = vocab_->word_of(id);
        extra_rows.push_back(pseudoword(nm).embedding);
    }

    Tensor x = matmul(Tensor::from({n, v}, std::move(onehot)), param("table"));
    if (any_extra) x = add(x, stack_rows(extra_rows));
    x = add(x, param("pos"));

    std::vector<float> pad_mask(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        pad_mask[static_cast<std::size_t>(i)] =
            ids[static_cast<std::size_t>(i)] == vocab_->pad_id() ? 0.0f : 1.0f;
    }
    if (mask != nullptr) {
        if (mask->size() != static_cast<std::size_t>(n)) throw LabError("encode: mask length mismatch");
        pad_mask = *mask;
    }

    for (int b = 0; b < 2; ++b) {
        const std::string p = "b" + std::to_string(b) + ".";
        Tensor h = layer_norm(x, param(p + "ln1.g"), param(p + "ln1.b"));
        Tensor q = linear(h, param(p + "wq"), param(p + "bq"));
        Tensor k = linear(h, param(p + "wk"), param(p + "bk"));
        Tensor vv = linear(h, param(p + "wv"), param(p + "bv"));
        Tensor att = attention(q, k, vv, &pad_mask);
        x = add(x, linear(att, param(p + "wo"), param(p + "bo")));
        Tensor h2 = layer_norm(x, param(p + "ln2.g"), param(p + "ln2.b"));
        Tensor mlp = linear(gelu(linear(h2, param(p + "w1"), param(p + "b1"))), param(p + "w2"),
                            param(p + "b2"));
        x = add(x, mlp);
    }
    x = layer_norm(x, param("lnf.g"), param("lnf.b"));
    return Encoding{std::move(x), std::move(pad_mask)};
}

Encoding TextEncoder::encode_prompt(const std::string& prompt,
                                    const std::unordered_map<int, Tensor>& overrides,
                                    TrainCtx* ctx) {
    return encode(vocab_->tokenize(prompt), overrides, nullptr, ctx);
}

}  // namespace bratlab
