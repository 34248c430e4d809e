#pragma once

// Neural building blocks shared by the image encoder, the document encoder,
// the cross-modal stack, and the decoder: parameter registry, linear /
// layer-norm / attention layers, pre-norm transformer layers, and the
// sinusoidal positional encodings.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mmrag/common.hpp"
#include "mmrag/ops.hpp"

namespace mmrag {
namespace nn {

// Ordered name -> tensor registry. Order is construction order and stays
// stable across runs, which checkpointing and the optimizer rely on.
struct ParamSet {
    std::vector<std::pair<std::string, Tensor>> items;

    void add(const std::string& name, const Tensor& t) {
        for (const auto& [n, _] : items)
            if (n == name) throw ConfigError("duplicate parameter name: " + name);
        items.emplace_back(name, t);
    }

    Tensor* find(const std::string& name) {
        for (auto& [n, t] : items)
            if (n == name) return &t;
        return nullptr;
    }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& [_, t] : items) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [_, t] : items) t.zero_grad();
    }
};

inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out,
                             std::vector<std::size_t> shape, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = rng.uniform(-limit, limit);
    return t;
}

inline Tensor normal_init(std::vector<std::size_t> shape, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = rng.normal() * stddev;
    return t;
}

// y = x W + b with W stored [in, out].
class Linear {
  public:
    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng)
        : W_(xavier_uniform(in, out, {in, out}, rng)), b_(Tensor::zeros({out}, true)) {}

    Tensor forward(Tape& tape, const Tensor& x) const {
        return ops::add_bias_rows(tape, ops::matmul(tape, x, W_), b_);
    }

    Tensor forward_vec(Tape& tape, const Tensor& v) const {
        return ops::as_vec(tape, forward(tape, ops::as_row(tape, v)));
    }

    void collect(const std::string& prefix, ParamSet& out) {
        out.add(prefix + ".W", W_);
        out.add(prefix + ".b", b_);
    }

    const Tensor& weight() const { return W_; }
    const Tensor& bias() const { return b_; }

  private:
    Tensor W_, b_;
};

class LayerNorm {
  public:
    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim) : gain_(Tensor::zeros({dim}, true)), bias_(Tensor::zeros({dim}, true)) {
        for (std::size_t i = 0; i < dim; ++i) gain_.at(i) = 1.0;
    }

    Tensor forward(Tape& tape, const Tensor& x) const {
        return ops::layer_norm(tape, x, gain_, bias_);
    }

    void collect(const std::string& prefix, ParamSet& out) {
        out.add(prefix + ".gain", gain_);
        out.add(prefix + ".bias", bias_);
    }

  private:
    Tensor gain_, bias_;
};

// Collects per-head attention weight matrices when tests want to inspect
// them; normal forward passes leave it null.
struct AttentionProbe {
    std::vector<Tensor> head_weights;  // each [Nq, Nk], rows sum to 1
};

// Multi-head scaled-dot-product attention. Queries come from `q_input`,
// keys and values from `kv_input`; pass the same tensor for self-attention.
class MultiHeadAttention {
  public:
    MultiHeadAttention() = default;
    MultiHeadAttention(std::size_t dim, std::size_t heads, Rng& rng)
        : dim_(dim),
          heads_(heads),
          head_dim_(dim / heads),
          q_proj_(dim, dim, rng),
          k_proj_(dim, dim, rng),
          v_proj_(dim, dim, rng),
          out_proj_(dim, dim, rng) {
        if (heads == 0 || dim % heads != 0)
            throw ConfigError("attention dim " + std::to_string(dim) +
                              " not divisible by heads " + std::to_string(heads));
    }

    Tensor forward(Tape& tape, const Tensor& q_input, const Tensor& kv_input, bool causal = false,
                   AttentionProbe* probe = nullptr) const {
        if (q_input.cols() != dim_ || kv_input.cols() != dim_)
            throw ShapeError("attention dim mismatch: " + shape_str(q_input.shape()) + " / " +
                             shape_str(kv_input.shape()) + " vs dim " + std::to_string(dim_));
        const std::size_t nq = q_input.rows();
        const std::size_t nk = kv_input.rows();
        Tensor q = q_proj_.forward(tape, q_input);
        Tensor k = k_proj_.forward(tape, kv_input);
        Tensor v = v_proj_.forward(tape, kv_input);

        Tensor mask;
        if (causal) {
            if (nq != nk) throw ShapeError("causal attention requires square score matrix");
            mask = Tensor::zeros({nq, nk});
            for (std::size_t i = 0; i < nq; ++i)
                for (std::size_t j = i + 1; j < nk; ++j) mask.at(i, j) = -1e30;
        }

        const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim_));
        std::vector<Tensor> head_outputs;
        head_outputs.reserve(heads_);
        for (std::size_t h = 0; h < heads_; ++h) {
            Tensor qh = ops::slice_cols(tape, q, h * head_dim_, (h + 1) * head_dim_);
            Tensor kh = ops::slice_cols(tape, k, h * head_dim_, (h + 1) * head_dim_);
            Tensor vh = ops::slice_cols(tape, v, h * head_dim_, (h + 1) * head_dim_);
            Tensor scores = ops::affine(tape, ops::matmul_nt(tape, qh, kh), scale, 0.0);
            if (causal) scores = ops::add(tape, scores, mask);
            Tensor weights = ops::softmax_rows(tape, scores);
            if (probe) probe->head_weights.push_back(weights);
            head_outputs.push_back(ops::matmul(tape, weights, vh));
        }
        Tensor merged = ops::concat_cols(tape, head_outputs);
        return out_proj_.forward(tape, merged);
    }

    void collect(const std::string& prefix, ParamSet& out) {
        q_proj_.collect(prefix + ".q", out);
        k_proj_.collect(prefix + ".k", out);
        v_proj_.collect(prefix + ".v", out);
        out_proj_.collect(prefix + ".o", out);
    }

  private:
    std::size_t dim_ = 0, heads_ = 0, head_dim_ = 0;
    Linear q_proj_, k_proj_, v_proj_, out_proj_;
};

class FeedForward {
  public:
    FeedForward() = default;
    FeedForward(std::size_t dim, std::size_t hidden, Rng& rng)
        : in_(dim, hidden, rng), out_(hidden, dim, rng) {}

    Tensor forward(Tape& tape, const Tensor& x) const {
        return out_.forward(tape, ops::relu(tape, in_.forward(tape, x)));
    }

    void collect(const std::string& prefix, ParamSet& out) {
        in_.collect(prefix + ".in", out);
        out_.collect(prefix + ".out", out);
    }

  private:
    Linear in_, out_;
};

// Pre-norm encoder layer: x += SelfAttn(LN(x)); x += FFN(LN(x)).
class EncoderLayer {
  public:
    EncoderLayer() = default;
    EncoderLayer(std::size_t dim, std::size_t heads, std::size_t ffn, Rng& rng)
        : norm1_(dim), norm2_(dim), attn_(dim, heads, rng), ffn_(dim, ffn, rng) {}

    Tensor forward(Tape& tape, const Tensor& x, AttentionProbe* probe = nullptr) const {
        Tensor normed = norm1_.forward(tape, x);
        Tensor y = ops::add(tape, x, attn_.forward(tape, normed, normed, false, probe));
        return ops::add(tape, y, ffn_.forward(tape, norm2_.forward(tape, y)));
    }

    void collect(const std::string& prefix, ParamSet& out) {
        norm1_.collect(prefix + ".norm1", out);
        norm2_.collect(prefix + ".norm2", out);
        attn_.collect(prefix + ".attn", out);
        ffn_.collect(prefix + ".ffn", out);
    }

  private:
    LayerNorm norm1_, norm2_;
    MultiHeadAttention attn_;
    FeedForward ffn_;
};

// Pre-norm decoder layer with causal self-attention and memory cross-attention.
class DecoderLayer {
  public:
    DecoderLayer() = default;
    DecoderLayer(std::size_t dim, std::size_t heads, std::size_t ffn, Rng& rng)
        : norm1_(dim),
          norm2_(dim),
          norm3_(dim),
          self_attn_(dim, heads, rng),
          cross_attn_(dim, heads, rng),
          ffn_(dim, ffn, rng) {}

    Tensor forward(Tape& tape, const Tensor& x, const Tensor& memory,
                   AttentionProbe* cross_probe = nullptr) const {
        Tensor n1 = norm1_.forward(tape, x);
        Tensor y = ops::add(tape, x, self_attn_.forward(tape, n1, n1, true));
        Tensor n2 = norm2_.forward(tape, y);
        y = ops::add(tape, y, cross_attn_.forward(tape, n2, memory, false, cross_probe));
        return ops::add(tape, y, ffn_.forward(tape, norm3_.forward(tape, y)));
    }

    void collect(const std::string& prefix, ParamSet& out) {
        norm1_.collect(prefix + ".norm1", out);
        norm2_.collect(prefix + ".norm2", out);
        norm3_.collect(prefix + ".norm3", out);
        self_attn_.collect(prefix + ".self", out);
        cross_attn_.collect(prefix + ".cross", out);
        ffn_.collect(prefix + ".ffn", out);
    }

  private:
    LayerNorm norm1_, norm2_, norm3_;
    MultiHeadAttention self_attn_, cross_attn_;
    FeedForward ffn_;
};

// Standard 1D sinusoidal position encoding, entries in [-1, 1].
inline Tensor sinusoidal_pe_1d(std::size_t length, std::size_t dim) {
    if (dim % 2 != 0) throw ConfigError("1D positional encoding needs even dim");
    Tensor pe = Tensor::zeros({length, dim});
    for (std::size_t pos = 0; pos < length; ++pos) {
        for (std::size_t t = 0; t < dim / 2; ++t) {
            const double omega =
                std::pow(10000.0, -2.0 * static_cast<double>(t) / static_cast<double>(dim));
            pe.at(pos, 2 * t) = std::sin(static_cast<double>(pos) * omega);
            pe.at(pos, 2 * t + 1) = std::cos(static_cast<double>(pos) * omega);
        }
    }
    return pe;
}

// 2D sine-cosine position encoding for a rows x cols grid, flattened
// row-major: the first dim/2 channels encode the row index, the last dim/2
// the column index, each as an independent 1D sinusoidal code.
inline Tensor sinusoidal_pe_2d(std::size_t rows, std::size_t cols, std::size_t dim) {
    if (dim % 4 != 0)
        throw ConfigError("2D positional encoding needs dim divisible by 4, got " +
                          std::to_string(dim));
    const std::size_t half = dim / 2;
    Tensor row_pe = sinusoidal_pe_1d(rows, half);
    Tensor col_pe = sinusoidal_pe_1d(cols, half);
    Tensor pe = Tensor::zeros({rows * cols, dim});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t n = r * cols + c;
            for (std::size_t j = 0; j < half; ++j) {
                pe.at(n, j) = row_pe.at(r, j);
                pe.at(n, half + j) = col_pe.at(c, j);
            }
        }
    }
    return pe;
}

// Token embedding table.
class Embedding {
  public:
    Embedding() = default;
    Embedding(std::size_t vocab, std::size_t dim, Rng& rng)
        : table_(normal_init({vocab, dim}, 0.1, rng)) {}

    Tensor forward(Tape& tape, const std::vector<std::size_t>& ids) const {
        return ops::gather_rows(tape, table_, ids);
    }

    const Tensor& table() const { return table_; }

    void collect(const std::string& prefix, ParamSet& out) { out.add(prefix + ".table", table_); }

  private:
    Tensor table_;
};

}  // namespace nn
}  // namespace mmrag
