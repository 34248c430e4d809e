#pragma once

// Autoregressive transformer decoder over the shared vocabulary. The fused
// vector is prepended as a single memory token ahead of the retrieved
// document tokens; generation cross-attends over that memory. The first
// generated content token is constrained to the five severity tokens.

#include <cmath>
#include <string>
#include <vector>

#include "mmrag/nn.hpp"
#include "mmrag/ops.hpp"
#include "mmrag/text.hpp"

namespace mmrag {

struct DecoderConfig {
    std::size_t dim = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t ffn = 128;
    std::size_t max_len = 24;

    void validate() const {
        if (dim == 0 || heads == 0 || ffn == 0 || max_len == 0)
            throw ConfigError("decoder dims must be positive");
        if (dim % heads != 0) throw ConfigError("decoder dim not divisible by heads");
        if (dim % 2 != 0) throw ConfigError("decoder dim must be even for 1D PE");
    }
};

// Generated damage assessment. tokens[0] is always a severity token.
struct Assessment {
    std::vector<std::size_t> tokens;
    int severity = -1;
    std::vector<double> step_logprobs;
    double alpha = 1.0;
    bool degenerate_visual_only = false;
};

class AssessmentDecoder {
  public:
    AssessmentDecoder() = default;
    AssessmentDecoder(const DecoderConfig& cfg, std::size_t vocab_size, Rng& rng)
        : cfg_(cfg), vocab_size_(vocab_size) {
        cfg.validate();
        if (vocab_size < kFirstWordId)
            throw ConfigError("vocabulary too small for the reserved special tokens");
        embedding_ = nn::Embedding(vocab_size, cfg.dim, rng);
        for (std::size_t i = 0; i < cfg.layers; ++i)
            layers_.emplace_back(cfg.dim, cfg.heads, cfg.ffn, rng);
        head_ = nn::Linear(cfg.dim, vocab_size, rng);
    }

    const DecoderConfig& config() const { return cfg_; }
    std::size_t vocab_size() const { return vocab_size_; }

    // Memory = fused vector as one token, then the document tokens (absent
    // in the visual-only degenerate mode).
    Tensor build_memory(Tape& tape, const Tensor& fused, const Tensor& doc_tokens,
                        bool include_docs) const {
        Tensor fused_row = ops::as_row(tape, fused);
        if (!include_docs) return fused_row;
        return ops::concat_rows(tape, {fused_row, doc_tokens});
    }

    // Teacher-forced pass: feeds [BOS, y_1 .. y_{T-1}] and returns the [T, V]
    // log-probability matrix whose row t scores y_t.
    Tensor teacher_logprobs(Tape& tape, const Tensor& memory,
                            const std::vector<std::size_t>& target) const {
        if (target.empty()) throw ContractError("teacher forcing needs a non-empty target");
        for (std::size_t id : target)
            if (id >= vocab_size_)
                throw ContractError("target token " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(vocab_size_));
        std::vector<std::size_t> input;
        input.reserve(target.size());
        input.push_back(kBos);
        for (std::size_t i = 0; i + 1 < target.size(); ++i) input.push_back(target[i]);
        Tensor logits = run_stack(tape, memory, input);
        return ops::log_softmax_rows(tape, logits);
    }

    // Greedy decode; step 1 is constrained to the severity tokens, then
    // argmax until EOS or max_len. Ties break toward the smaller token id.
    Assessment greedy(const Tensor& memory, bool visual_only_mode = false) const {
        Assessment out;
        out.degenerate_visual_only = visual_only_mode;
        std::vector<std::size_t> input = {kBos};
        for (std::size_t step = 0; step < cfg_.max_len; ++step) {
            Tape tape(false);
            Tensor logits = run_stack(tape, memory, input);
            const std::size_t last = logits.rows() - 1;
            Tensor logprobs = ops::log_softmax_rows(tape, logits);

            std::size_t chosen;
            if (step == 0) {
                chosen = kSev0;
                for (std::size_t id = kSev0 + 1; id < kSev0 + kNumSeverityLevels; ++id)
                    if (logits.at(last, id) > logits.at(last, chosen)) chosen = id;
            } else {
                chosen = 0;
                for (std::size_t id = 1; id < vocab_size_; ++id)
                    if (logits.at(last, id) > logits.at(last, chosen)) chosen = id;
            }
            out.tokens.push_back(chosen);
            out.step_logprobs.push_back(logprobs.at(last, chosen));
            if (chosen == kEos) break;
            input.push_back(chosen);
        }
        out.severity = static_cast<int>(out.tokens[0] - kSev0);
        return out;
    }

    void collect(const std::string& prefix, nn::ParamSet& out) {
        embedding_.collect(prefix + ".embed", out);
        for (std::size_t i = 0; i < layers_.size(); ++i)
            layers_[i].collect(prefix + ".layer" + std::to_string(i), out);
        head_.collect(prefix + ".head", out);
    }

  private:
    Tensor run_stack(Tape& tape, const Tensor& memory, const std::vector<std::size_t>& input) const {
        Tensor x = embedding_.forward(tape, input);
        x = ops::add(tape, x, nn::sinusoidal_pe_1d(input.size(), cfg_.dim));
        for (const auto& layer : layers_) x = layer.forward(tape, x, memory);
        return head_.forward(tape, x);
    }

    DecoderConfig cfg_;
    std::size_t vocab_size_ = 0;
    nn::Embedding embedding_;
    std::vector<nn::DecoderLayer> layers_;
    nn::Linear head_;
};

}  // namespace mmrag
