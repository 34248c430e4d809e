#pragma once

// Text branch: lowercase word tokenizer, shared vocabulary with reserved
// special tokens, and a small trainable transformer encoder that maps a
// document to contextual token embeddings and a pooled global vector.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mmrag/nn.hpp"
#include "mmrag/ops.hpp"

namespace mmrag {

// Reserved token ids; the first generated token of an assessment is always
// one of the five severity tokens.
enum SpecialToken : std::size_t {
    kUnk = 0,
    kBos = 1,
    kEos = 2,
    kSev0 = 3,  // kSev0 + level for levels 0..4
};
constexpr std::size_t kNumSeverityLevels = 5;
constexpr std::size_t kFirstWordId = kSev0 + kNumSeverityLevels;  // 8

inline std::size_t severity_token(int level) {
    if (level < 0 || level >= static_cast<int>(kNumSeverityLevels))
        throw ContractError("severity level " + std::to_string(level) + " outside 0..4");
    return kSev0 + static_cast<std::size_t>(level);
}

inline bool is_severity_token(std::size_t id) { return id >= kSev0 && id < kSev0 + kNumSeverityLevels; }

// Maximal runs of alphanumeric characters, lowercased; everything else is a
// separator.
inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const unsigned char u = static_cast<unsigned char>(ch);
        if (std::isalnum(u)) {
            cur.push_back(static_cast<char>(std::tolower(u)));
        } else if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

class Vocab {
  public:
    Vocab() {
        // id layout: UNK, BOS, EOS, SEV_0..SEV_4, then words.
        id_to_word_ = {"<unk>", "<bos>", "<eos>", "<sev0>", "<sev1>", "<sev2>", "<sev3>", "<sev4>"};
    }

    // Builds the word list from a text corpus; words are sorted so the
    // mapping is independent of document order.
    static Vocab build(const std::vector<std::string>& texts) {
        Vocab v;
        std::set<std::string> words;
        for (const auto& t : texts)
            for (const auto& w : tokenize(t)) words.insert(w);
        for (const auto& w : words) {
            v.word_to_id_[w] = v.id_to_word_.size();
            v.id_to_word_.push_back(w);
        }
        return v;
    }

    std::size_t size() const { return id_to_word_.size(); }

    std::size_t id_of(const std::string& word) const {
        auto it = word_to_id_.find(word);
        return it == word_to_id_.end() ? static_cast<std::size_t>(kUnk) : it->second;
    }

    const std::string& word(std::size_t id) const {
        if (id >= id_to_word_.size())
            throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
        return id_to_word_[id];
    }

    std::vector<std::size_t> encode(const std::string& text) const {
        std::vector<std::size_t> ids;
        for (const auto& w : tokenize(text)) ids.push_back(id_of(w));
        return ids;
    }

    std::string decode(const std::vector<std::size_t>& ids) const {
        std::string out;
        for (std::size_t id : ids) {
            if (!out.empty()) out.push_back(' ');
            out += word(id);
        }
        return out;
    }

    const std::vector<std::string>& words() const { return id_to_word_; }

  private:
    std::map<std::string, std::size_t> word_to_id_;
    std::vector<std::string> id_to_word_;
};

struct TextEncoderConfig {
    std::size_t dim = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t ffn = 128;
    std::size_t max_tokens = 32;  // longer documents are truncated

    void validate() const {
        if (dim == 0 || heads == 0 || ffn == 0 || max_tokens == 0)
            throw ConfigError("text encoder dims must be positive");
        if (dim % heads != 0) throw ConfigError("text dim not divisible by heads");
        if (dim % 2 != 0) throw ConfigError("text dim must be even for 1D PE");
    }
};

class TextEncoder {
  public:
    TextEncoder() = default;
    TextEncoder(const TextEncoderConfig& cfg, std::size_t vocab_size, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        embedding_ = nn::Embedding(vocab_size, cfg.dim, rng);
        for (std::size_t i = 0; i < cfg.layers; ++i)
            layers_.emplace_back(cfg.dim, cfg.heads, cfg.ffn, rng);
    }

    const TextEncoderConfig& config() const { return cfg_; }

    // Contextual token embeddings: ids -> [T, d].
    Tensor encode_tokens(Tape& tape, const std::vector<std::size_t>& ids) const {
        if (ids.empty()) throw ContractError("empty document: no tokens to encode");
        std::vector<std::size_t> clipped = ids;
        if (clipped.size() > cfg_.max_tokens) clipped.resize(cfg_.max_tokens);
        Tensor x = embedding_.forward(tape, clipped);
        Tensor pe = nn::sinusoidal_pe_1d(clipped.size(), cfg_.dim);
        x = ops::add(tape, x, pe);
        for (const auto& layer : layers_) x = layer.forward(tape, x);
        return x;
    }

    // Global document vector: mean over contextual token embeddings.
    Tensor encode_pooled(Tape& tape, const std::vector<std::size_t>& ids) const {
        return ops::mean_pool_rows(tape, encode_tokens(tape, ids));
    }

    const nn::Embedding& embedding() const { return embedding_; }

    void collect(const std::string& prefix, nn::ParamSet& out) {
        embedding_.collect(prefix + ".embed", out);
        for (std::size_t i = 0; i < layers_.size(); ++i)
            layers_[i].collect(prefix + ".layer" + std::to_string(i), out);
    }

  private:
    TextEncoderConfig cfg_;
    nn::Embedding embedding_;
    std::vector<nn::EncoderLayer> layers_;
};

}  // namespace mmrag
