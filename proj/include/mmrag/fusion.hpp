#pragma once

// Cross-modal interaction between image patch tokens and retrieved document
// tokens (bidirectional multi-head cross-attention with pre-norm residual
// FFN blocks), modality pooling, the scalar sigmoid gate, and the convex
// fusion of the two pooled vectors.

#include <string>
#include <utility>
#include <vector>

#include "mmrag/nn.hpp"
#include "mmrag/ops.hpp"

namespace mmrag {

struct FusionConfig {
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t ffn = 128;
    std::size_t interaction_layers = 1;
    std::size_t top_k = 4;

    void validate() const {
        if (dim == 0 || heads == 0 || ffn == 0) throw ConfigError("fusion dims must be positive");
        if (dim % heads != 0) throw ConfigError("fusion dim not divisible by heads");
        if (top_k == 0) throw ConfigError("fusion top_k must be >= 1");
    }
};

struct CrossModalState {
    Tensor image_tokens;  // F̂_I, [N, d]
    Tensor doc_tokens;    // F_P, [T_P, d]; undefined when docs_empty
    bool docs_empty = false;
};

struct CrossModalProbe {
    std::vector<nn::AttentionProbe> image_to_doc;  // one per layer
    std::vector<nn::AttentionProbe> doc_to_image;
};

// One bidirectional interaction layer; both directions read the layer input
// (parallel update), each with residual + pre-norm + FFN.
class CrossModalLayer {
  public:
    CrossModalLayer() = default;
    CrossModalLayer(std::size_t dim, std::size_t heads, std::size_t ffn, Rng& rng)
        : img_attn_norm_(dim),
          img_ffn_norm_(dim),
          doc_attn_norm_(dim),
          doc_ffn_norm_(dim),
          img_to_doc_(dim, heads, rng),
          doc_to_img_(dim, heads, rng),
          img_ffn_(dim, ffn, rng),
          doc_ffn_(dim, ffn, rng) {}

    std::pair<Tensor, Tensor> forward(Tape& tape, const Tensor& img, const Tensor& docs,
                                      nn::AttentionProbe* i2d_probe = nullptr,
                                      nn::AttentionProbe* d2i_probe = nullptr) const {
        Tensor img_out = ops::add(
            tape, img, img_to_doc_.forward(tape, img_attn_norm_.forward(tape, img), docs, false, i2d_probe));
        img_out = ops::add(tape, img_out, img_ffn_.forward(tape, img_ffn_norm_.forward(tape, img_out)));
        Tensor doc_out = ops::add(
            tape, docs, doc_to_img_.forward(tape, doc_attn_norm_.forward(tape, docs), img, false, d2i_probe));
        doc_out = ops::add(tape, doc_out, doc_ffn_.forward(tape, doc_ffn_norm_.forward(tape, doc_out)));
        return {img_out, doc_out};
    }

    // Empty-document pass-through: image side keeps its FFN sublayer.
    Tensor forward_image_only(Tape& tape, const Tensor& img) const {
        return ops::add(tape, img, img_ffn_.forward(tape, img_ffn_norm_.forward(tape, img)));
    }

    void collect(const std::string& prefix, nn::ParamSet& out) {
        img_attn_norm_.collect(prefix + ".img_attn_norm", out);
        img_ffn_norm_.collect(prefix + ".img_ffn_norm", out);
        doc_attn_norm_.collect(prefix + ".doc_attn_norm", out);
        doc_ffn_norm_.collect(prefix + ".doc_ffn_norm", out);
        img_to_doc_.collect(prefix + ".img_to_doc", out);
        doc_to_img_.collect(prefix + ".doc_to_img", out);
        img_ffn_.collect(prefix + ".img_ffn", out);
        doc_ffn_.collect(prefix + ".doc_ffn", out);
    }

  private:
    nn::LayerNorm img_attn_norm_, img_ffn_norm_, doc_attn_norm_, doc_ffn_norm_;
    nn::MultiHeadAttention img_to_doc_, doc_to_img_;
    nn::FeedForward img_ffn_, doc_ffn_;
};

class CrossModalStack {
  public:
    CrossModalStack() = default;
    CrossModalStack(const FusionConfig& cfg, Rng& rng) : dim_(cfg.dim) {
        cfg.validate();
        for (std::size_t i = 0; i < cfg.interaction_layers; ++i)
            layers_.emplace_back(cfg.dim, cfg.heads, cfg.ffn, rng);
    }

    // doc_tokens may have zero semantic content only by being absent; pass
    // has_docs=false for the k=0 degenerate path.
    CrossModalState forward(Tape& tape, const Tensor& image_tokens, const Tensor& doc_tokens,
                            bool has_docs, CrossModalProbe* probe = nullptr) const {
        if (image_tokens.cols() != dim_)
            throw ShapeError("cross-modal dim mismatch: image " + shape_str(image_tokens.shape()) +
                             " vs dim " + std::to_string(dim_));
        CrossModalState state;
        state.docs_empty = !has_docs;
        if (!has_docs) {
            Tensor img = image_tokens;
            for (const auto& layer : layers_) img = layer.forward_image_only(tape, img);
            state.image_tokens = img;
            return state;
        }
        if (doc_tokens.cols() != dim_)
            throw ShapeError("cross-modal dim mismatch: docs " + shape_str(doc_tokens.shape()) +
                             " vs dim " + std::to_string(dim_));
        Tensor img = image_tokens;
        Tensor docs = doc_tokens;
        for (const auto& layer : layers_) {
            nn::AttentionProbe* i2d = nullptr;
            nn::AttentionProbe* d2i = nullptr;
            if (probe) {
                probe->image_to_doc.emplace_back();
                probe->doc_to_image.emplace_back();
                i2d = &probe->image_to_doc.back();
                d2i = &probe->doc_to_image.back();
            }
            std::tie(img, docs) = layer.forward(tape, img, docs, i2d, d2i);
        }
        state.image_tokens = img;
        state.doc_tokens = docs;
        return state;
    }

    void collect(const std::string& prefix, nn::ParamSet& out) {
        for (std::size_t i = 0; i < layers_.size(); ++i)
            layers_[i].collect(prefix + ".layer" + std::to_string(i), out);
    }

  private:
    std::size_t dim_ = 0;
    std::vector<CrossModalLayer> layers_;
};

// Row-means of both modality token sets.
inline std::pair<Tensor, Tensor> pool_modalities(Tape& tape, const CrossModalState& state) {
    if (state.docs_empty)
        throw ContractError("pool_modalities: document side is empty, use the degenerate fusion path");
    return {ops::mean_pool_rows(tape, state.image_tokens), ops::mean_pool_rows(tape, state.doc_tokens)};
}

inline Tensor pool_image_only(Tape& tape, const CrossModalState& state) {
    return ops::mean_pool_rows(tape, state.image_tokens);
}

// alpha = sigmoid(W_g [z_I; z_P] + b_g), image-first concatenation.
struct GateParams {
    Tensor W_g;  // [1, 2d]
    Tensor b_g;  // [1]

    GateParams() = default;
    GateParams(std::size_t dim, Rng& rng)
        : W_g(nn::xavier_uniform(2 * dim, 1, {1, 2 * dim}, rng)), b_g(Tensor::zeros({1}, true)) {}

    Tensor alpha(Tape& tape, const Tensor& z_image, const Tensor& z_docs) const {
        if (z_image.rank() != 1 || z_docs.rank() != 1 ||
            z_image.numel() + z_docs.numel() != W_g.cols())
            throw ShapeError("gate: [z_I;z_P] dims " + shape_str(z_image.shape()) + "+" +
                             shape_str(z_docs.shape()) + " vs W_g " + shape_str(W_g.shape()));
        Tensor cat = ops::concat_vec(tape, {z_image, z_docs});
        Tensor logit = ops::matmul(tape, W_g, ops::reshape(tape, cat, {cat.numel(), 1}));
        return ops::sigmoid(tape, ops::add(tape, ops::as_vec(tape, logit), b_g));
    }

    void collect(const std::string& prefix, nn::ParamSet& out) {
        out.add(prefix + ".W", W_g);
        out.add(prefix + ".b", b_g);
    }
};

// z_fused = alpha * z_I + (1 - alpha) * z_P with a learned scalar alpha.
inline Tensor fuse(Tape& tape, const Tensor& z_image, const Tensor& z_docs, const Tensor& alpha) {
    if (z_image.shape() != z_docs.shape())
        throw ShapeError("fuse: " + shape_str(z_image.shape()) + " vs " + shape_str(z_docs.shape()));
    Tensor one_minus = ops::affine(tape, alpha, -1.0, 1.0);
    return ops::add(tape, ops::scale_by_scalar(tape, z_image, alpha),
                    ops::scale_by_scalar(tape, z_docs, one_minus));
}

// Fixed-alpha variant used by the gating ablation and the degenerate path.
inline Tensor fuse(Tape& tape, const Tensor& z_image, const Tensor& z_docs, double alpha) {
    if (alpha < 0.0 || alpha > 1.0)
        throw ContractError("fuse: alpha " + std::to_string(alpha) + " outside [0,1]");
    return fuse(tape, z_image, z_docs, Tensor::scalar(alpha));
}

}  // namespace mmrag
