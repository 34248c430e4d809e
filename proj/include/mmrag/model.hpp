#pragma once

// Full pipeline assembly: image encoding -> policy retrieval -> cross-modal
// interaction -> gated fusion -> generation, plus the training-time loss
// wiring. Top-K selection is a non-differentiable lookup: gradients reach
// the retriever only through the contrastive term and the similarity values
// of the selected candidates, never through the discrete selection itself.

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmrag/decoder.hpp"
#include "mmrag/fusion.hpp"
#include "mmrag/losses.hpp"
#include "mmrag/retriever.hpp"
#include "mmrag/text.hpp"
#include "mmrag/vision.hpp"

namespace mmrag {

struct OptimizerConfig {
    std::string algo = "adam";  // "adam" or "sgd"
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t batch_size = 16;
    std::size_t epochs = 10;

    void validate() const {
        if (algo != "adam" && algo != "sgd") throw ConfigError("unknown optimizer '" + algo + "'");
        if (lr < 0) throw ConfigError("learning rate must be >= 0");
        if (batch_size == 0 || epochs == 0) throw ConfigError("batch size and epochs must be positive");
    }
};

struct ModelConfig {
    EncoderConfig encoder;
    TextEncoderConfig text;
    FusionConfig fusion;
    DecoderConfig decoder;
    LossWeights loss_weights;
    OptimizerConfig optimizer;
    std::uint64_t seed = 7;
    double contrastive_temperature = 1.0;
    bool rescale_scores = false;

    void validate() const {
        encoder.validate();
        text.validate();
        fusion.validate();
        decoder.validate();
        loss_weights.validate();
        optimizer.validate();
        if (text.dim != encoder.dim || fusion.dim != encoder.dim || decoder.dim != encoder.dim)
            throw ConfigError("embedding dim must agree across encoder/text/fusion/decoder");
        if (contrastive_temperature <= 0) throw ConfigError("contrastive temperature must be positive");
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        if (j.contains("encoder")) {
            const auto& e = j.at("encoder");
            if (e.contains("patch")) c.encoder.patch = e.at("patch").get<std::size_t>();
            if (e.contains("dim")) c.encoder.dim = e.at("dim").get<std::size_t>();
            if (e.contains("layers")) c.encoder.layers = e.at("layers").get<std::size_t>();
            if (e.contains("heads")) c.encoder.heads = e.at("heads").get<std::size_t>();
            if (e.contains("ffn")) c.encoder.ffn = e.at("ffn").get<std::size_t>();
            if (e.contains("backbone_channels"))
                c.encoder.backbone_channels = e.at("backbone_channels").get<std::vector<std::size_t>>();
        }
        if (j.contains("text_encoder")) {
            const auto& e = j.at("text_encoder");
            if (e.contains("dim")) c.text.dim = e.at("dim").get<std::size_t>();
            if (e.contains("layers")) c.text.layers = e.at("layers").get<std::size_t>();
            if (e.contains("heads")) c.text.heads = e.at("heads").get<std::size_t>();
            if (e.contains("ffn")) c.text.ffn = e.at("ffn").get<std::size_t>();
            if (e.contains("max_tokens")) c.text.max_tokens = e.at("max_tokens").get<std::size_t>();
        }
        if (j.contains("fusion")) {
            const auto& e = j.at("fusion");
            if (e.contains("dim")) c.fusion.dim = e.at("dim").get<std::size_t>();
            if (e.contains("heads")) c.fusion.heads = e.at("heads").get<std::size_t>();
            if (e.contains("ffn")) c.fusion.ffn = e.at("ffn").get<std::size_t>();
            if (e.contains("interaction_layers"))
                c.fusion.interaction_layers = e.at("interaction_layers").get<std::size_t>();
            if (e.contains("top_k")) c.fusion.top_k = e.at("top_k").get<std::size_t>();
        }
        if (j.contains("decoder")) {
            const auto& e = j.at("decoder");
            if (e.contains("dim")) c.decoder.dim = e.at("dim").get<std::size_t>();
            if (e.contains("layers")) c.decoder.layers = e.at("layers").get<std::size_t>();
            if (e.contains("heads")) c.decoder.heads = e.at("heads").get<std::size_t>();
            if (e.contains("ffn")) c.decoder.ffn = e.at("ffn").get<std::size_t>();
            if (e.contains("max_len")) c.decoder.max_len = e.at("max_len").get<std::size_t>();
        }
        if (j.contains("loss_weights")) {
            const auto& e = j.at("loss_weights");
            if (e.contains("contrastive")) c.loss_weights.contrastive = e.at("contrastive").get<double>();
            if (e.contains("retrieval")) c.loss_weights.retrieval = e.at("retrieval").get<double>();
            if (e.contains("generation")) c.loss_weights.generation = e.at("generation").get<double>();
        }
        if (j.contains("optimizer")) {
            const auto& e = j.at("optimizer");
            if (e.contains("algo")) c.optimizer.algo = e.at("algo").get<std::string>();
            if (e.contains("lr")) c.optimizer.lr = e.at("lr").get<double>();
            if (e.contains("beta1")) c.optimizer.beta1 = e.at("beta1").get<double>();
            if (e.contains("beta2")) c.optimizer.beta2 = e.at("beta2").get<double>();
            if (e.contains("eps")) c.optimizer.eps = e.at("eps").get<double>();
            if (e.contains("batch_size")) c.optimizer.batch_size = e.at("batch_size").get<std::size_t>();
            if (e.contains("epochs")) c.optimizer.epochs = e.at("epochs").get<std::size_t>();
        }
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("contrastive_temperature"))
            c.contrastive_temperature = j.at("contrastive_temperature").get<double>();
        if (j.contains("rescale_scores")) c.rescale_scores = j.at("rescale_scores").get<bool>();
        c.validate();
        return c;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["encoder"] = {{"patch", encoder.patch},
                        {"dim", encoder.dim},
                        {"layers", encoder.layers},
                        {"heads", encoder.heads},
                        {"ffn", encoder.ffn},
                        {"backbone_channels", encoder.backbone_channels}};
        j["text_encoder"] = {{"dim", text.dim},
                             {"layers", text.layers},
                             {"heads", text.heads},
                             {"ffn", text.ffn},
                             {"max_tokens", text.max_tokens}};
        j["fusion"] = {{"dim", fusion.dim},
                       {"heads", fusion.heads},
                       {"ffn", fusion.ffn},
                       {"interaction_layers", fusion.interaction_layers},
                       {"top_k", fusion.top_k}};
        j["decoder"] = {{"dim", decoder.dim},
                        {"layers", decoder.layers},
                        {"heads", decoder.heads},
                        {"ffn", decoder.ffn},
                        {"max_len", decoder.max_len}};
        j["loss_weights"] = {{"contrastive", loss_weights.contrastive},
                             {"retrieval", loss_weights.retrieval},
                             {"generation", loss_weights.generation}};
        j["optimizer"] = {{"algo", optimizer.algo},   {"lr", optimizer.lr},
                          {"beta1", optimizer.beta1}, {"beta2", optimizer.beta2},
                          {"eps", optimizer.eps},     {"batch_size", optimizer.batch_size},
                          {"epochs", optimizer.epochs}};
        j["seed"] = seed;
        j["contrastive_temperature"] = contrastive_temperature;
        j["rescale_scores"] = rescale_scores;
        return j;
    }

    std::string hash() const { return hex64(fnv1a(to_json().dump())); }
};

enum class GatingMode { kLearned, kFixedHalf };

inline GatingMode gating_mode_from_string(const std::string& s) {
    if (s == "on") return GatingMode::kLearned;
    if (s == "fixed_half") return GatingMode::kFixedHalf;
    throw UsageError("unknown gating mode '" + s + "' (expected on|fixed_half)");
}

// On-tape encodings of every policy document, shared across the examples of
// one training step.
struct CorpusEncoding {
    std::vector<std::uint64_t> doc_ids;
    std::vector<int> severity;
    std::vector<Tensor> pooled;  // v_j
    std::vector<Tensor> tokens;  // contextual token matrices for fusion

    std::size_t index_of(std::uint64_t doc_id) const {
        for (std::size_t i = 0; i < doc_ids.size(); ++i)
            if (doc_ids[i] == doc_id) return i;
        throw ContractError("doc_id " + std::to_string(doc_id) + " not in encoded corpus");
    }
};

// Tokenized corpus plus a vector index built from the current encoder
// weights; the inference-side counterpart of CorpusEncoding.
struct CorpusRuntime {
    std::vector<PolicyDocument> docs;
    std::vector<std::vector<std::size_t>> token_ids;
    VectorIndex index;

    std::size_t index_of(std::uint64_t doc_id) const {
        for (std::size_t i = 0; i < docs.size(); ++i)
            if (docs[i].id == doc_id) return i;
        throw ContractError("doc_id " + std::to_string(doc_id) + " not in corpus runtime");
    }
};

class MMRagModel {
  public:
    MMRagModel(const ModelConfig& cfg, const Vocab& vocab) : cfg_(cfg), vocab_(vocab) {
        cfg.validate();
        Rng rng(splitmix64(cfg.seed));
        vision_ = VisionEncoder(cfg.encoder, rng);
        text_ = TextEncoder(cfg.text, vocab.size(), rng);
        stack_ = CrossModalStack(cfg.fusion, rng);
        gate_ = GateParams(cfg.fusion.dim, rng);
        decoder_ = AssessmentDecoder(cfg.decoder, vocab.size(), rng);
        vision_.collect("vision", params_);
        text_.collect("text", params_);
        stack_.collect("fusion", params_);
        gate_.collect("gate", params_);
        decoder_.collect("decoder", params_);
    }

    const ModelConfig& config() const { return cfg_; }
    const Vocab& vocab() const { return vocab_; }
    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    const VisionEncoder& vision() const { return vision_; }
    const TextEncoder& text() const { return text_; }
    const CrossModalStack& interaction() const { return stack_; }
    const GateParams& gate() const { return gate_; }
    const AssessmentDecoder& decoder() const { return decoder_; }

    // Fingerprint of the current parameter values.
    std::uint64_t param_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [name, t] : params_.items) {
            h = fnv1a(name, h);
            h = fnv1a(t.data(), t.numel() * sizeof(double), h);
        }
        return h;
    }

    CorpusEncoding encode_corpus(Tape& tape, const std::vector<PolicyDocument>& docs) const {
        CorpusEncoding enc;
        for (const auto& d : docs) {
            d.validate();
            std::vector<std::size_t> ids = vocab_.encode(d.text);
            if (ids.empty()) throw ContractError("document " + std::to_string(d.id) + " tokenizes to nothing");
            Tensor toks = text_.encode_tokens(tape, ids);
            enc.doc_ids.push_back(d.id);
            enc.severity.push_back(d.severity_level);
            enc.tokens.push_back(toks);
            enc.pooled.push_back(ops::mean_pool_rows(tape, toks));
        }
        return enc;
    }

    CorpusRuntime build_corpus_runtime(const std::vector<PolicyDocument>& docs) const {
        CorpusRuntime rt;
        rt.docs = docs;
        for (const auto& d : docs) rt.token_ids.push_back(vocab_.encode(d.text));
        Tape tape(false);
        rt.index = VectorIndex::build(
            docs,
            [&](const PolicyDocument& d) {
                Tensor v = text_.encode_pooled(tape, vocab_.encode(d.text));
                return v.clone();
            },
            param_hash());
        return rt;
    }

    struct TrainForward {
        Tensor contrast, retrieval, generation, total;
        CandidateSet candidates;
        double alpha = 0.5;
    };

    // Full differentiable pass for one example. `pinned_dk` freezes the
    // retrieved set (used by the gradient checker so the finite-difference
    // function stays smooth).
    TrainForward forward_train(Tape& tape, const ImageTensor& img, std::uint64_t positive_doc_id,
                               const std::vector<std::size_t>& target, const CorpusEncoding& corpus,
                               GatingMode gating,
                               const std::vector<std::uint64_t>* pinned_dk = nullptr) const {
        if (target.empty() || !is_severity_token(target[0]))
            throw ContractError("target sequence must start with a severity token");
        TrainForward out;

        EncodedImage enc = vision_.encode(tape, img);
        Tensor q = VisionEncoder::image_query(tape, enc);

        // Eq-style similarities against the whole encoded corpus, on tape.
        Tensor sims = similarity_row(tape, q, corpus.pooled);
        const std::size_t positive_idx = corpus.index_of(positive_doc_id);
        out.contrast =
            contrastive_loss_from_sims(tape, sims, positive_idx, cfg_.contrastive_temperature);

        // Discrete Top-K selection from the current similarity values.
        std::vector<std::size_t> selected;
        if (pinned_dk) {
            for (std::uint64_t id : *pinned_dk) selected.push_back(corpus.index_of(id));
        } else {
            selected = select_top_k(sims, corpus.doc_ids, cfg_.fusion.top_k);
        }
        for (std::size_t idx : selected)
            out.candidates.items.push_back(
                {corpus.doc_ids[idx], std::clamp(sims.at(idx), -1.0, 1.0)});

        // Retrieval loss on the selected scores (gradients flow into the
        // scores, not the selection).
        std::vector<std::int64_t> sel_idx(selected.begin(), selected.end());
        Tensor sel_scores = ops::gather_flat(tape, sims, {selected.size()}, sel_idx);
        if (cfg_.rescale_scores) sel_scores = ops::affine(tape, sel_scores, 0.5, 0.5);
        std::vector<double> labels;
        for (std::size_t idx : selected)
            labels.push_back(corpus.doc_ids[idx] == positive_doc_id ? 1.0 : 0.0);
        out.retrieval = retrieval_loss(tape, sel_scores, labels);

        // Cross-modal interaction over the retrieved document tokens.
        std::vector<Tensor> doc_parts;
        for (std::size_t idx : selected) doc_parts.push_back(corpus.tokens[idx]);
        Tensor doc_tokens = ops::concat_rows(tape, doc_parts);
        CrossModalState state = stack_.forward(tape, enc.tokens, doc_tokens, true);
        auto [z_img, z_doc] = pool_modalities(tape, state);

        Tensor fused;
        if (gating == GatingMode::kLearned) {
            Tensor alpha = gate_.alpha(tape, z_img, z_doc);
            out.alpha = alpha.at(0);
            fused = fuse(tape, z_img, z_doc, alpha);
        } else {
            out.alpha = 0.5;
            fused = fuse(tape, z_img, z_doc, 0.5);
        }

        Tensor memory = decoder_.build_memory(tape, fused, state.doc_tokens, true);
        Tensor logprobs = decoder_.teacher_logprobs(tape, memory, target);
        out.generation = generation_loss(tape, logprobs, target);

        out.total = total_loss(tape, out.contrast, out.retrieval, out.generation, cfg_.loss_weights);
        return out;
    }

    struct InferResult {
        Assessment assessment;
        CandidateSet candidates;
        double alpha = 1.0;
    };

    // Greedy inference; k_override = 0 uses the configured retrieval width.
    InferResult infer(const ImageTensor& img, const CorpusRuntime& corpus, GatingMode gating,
                      std::size_t k_override = 0) const {
        Tape tape(false);
        EncodedImage enc = vision_.encode(tape, img);
        Tensor q = VisionEncoder::image_query(tape, enc);
        const std::size_t k = k_override == 0 ? cfg_.fusion.top_k : k_override;

        InferResult out;
        out.candidates = corpus.index.top_k(q, k);

        std::vector<Tensor> doc_parts;
        for (const auto& c : out.candidates.items)
            doc_parts.push_back(text_.encode_tokens(tape, corpus.token_ids[corpus.index_of(c.doc_id)]));
        Tensor doc_tokens = ops::concat_rows(tape, doc_parts);

        CrossModalState state = stack_.forward(tape, enc.tokens, doc_tokens, true);
        auto [z_img, z_doc] = pool_modalities(tape, state);
        Tensor fused;
        if (gating == GatingMode::kLearned) {
            Tensor alpha = gate_.alpha(tape, z_img, z_doc);
            out.alpha = alpha.at(0);
            fused = fuse(tape, z_img, z_doc, alpha);
        } else {
            out.alpha = 0.5;
            fused = fuse(tape, z_img, z_doc, 0.5);
        }
        Tensor memory = decoder_.build_memory(tape, fused, state.doc_tokens, true);
        out.assessment = decoder_.greedy(memory);
        out.assessment.alpha = out.alpha;
        return out;
    }

    // Degenerate visual-only path: no documents, alpha forced to 1, decoder
    // memory holds only the fused (= image) vector.
    InferResult infer_visual_only(const ImageTensor& img) const {
        Tape tape(false);
        EncodedImage enc = vision_.encode(tape, img);
        CrossModalState state = stack_.forward(tape, enc.tokens, Tensor(), false);
        Tensor z_img = pool_image_only(tape, state);
        Tensor memory = decoder_.build_memory(tape, z_img, Tensor(), false);
        InferResult out;
        out.alpha = 1.0;
        out.assessment = decoder_.greedy(memory, true);
        out.assessment.alpha = 1.0;
        return out;
    }

    // Deterministic Top-K over current similarity values, ranked by score
    // descending with ties toward the smaller doc id.
    static std::vector<std::size_t> select_top_k(const Tensor& sims,
                                                 const std::vector<std::uint64_t>& doc_ids,
                                                 std::size_t k) {
        std::vector<std::size_t> order(doc_ids.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (sims.at(a) != sims.at(b)) return sims.at(a) > sims.at(b);
            return doc_ids[a] < doc_ids[b];
        });
        if (order.size() > k) order.resize(k);
        return order;
    }

  private:
    ModelConfig cfg_;
    Vocab vocab_;
    VisionEncoder vision_;
    TextEncoder text_;
    CrossModalStack stack_;
    GateParams gate_;
    AssessmentDecoder decoder_;
    nn::ParamSet params_;
};

}  // namespace mmrag
