#pragma once

// Image branch: residual convolutional backbone (stand-in for a big
// pretrained net) that downsamples to the patch grid, a 1x1 projection to
// the shared embedding width, 2D sinusoidal position codes, and a pre-norm
// transformer encoder over the patch sequence.
//
// Activations are kept as [positions, channels] matrices (HWC), so every
// convolution is an index-gather followed by a matmul and its backward
// comes for free from the tape.

#include <cstdint>
#include <string>
#include <vector>

#include "mmrag/image_io.hpp"
#include "mmrag/nn.hpp"
#include "mmrag/ops.hpp"

namespace mmrag {

// Post-disaster scene image; pixel values must already be in [0,1].
class ImageTensor {
  public:
    ImageTensor(std::size_t height, std::size_t width, std::vector<double> rgb)
        : height_(height), width_(width) {
        if (rgb.size() != height * width * 3)
            throw ShapeError("image payload " + std::to_string(rgb.size()) + " != " +
                             std::to_string(height) + "x" + std::to_string(width) + "x3");
        for (double v : rgb)
            if (!(v >= 0.0 && v <= 1.0))
                throw ContractError("image channel value " + std::to_string(v) +
                                    " outside [0,1]");
        pixels_ = Tensor::from_values({height * width, 3}, std::move(rgb));
    }

    static ImageTensor from_raw(const RawImage& raw) {
        return ImageTensor(raw.height, raw.width, raw.rgb);
    }

    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    const Tensor& pixels() const { return pixels_; }  // [H*W, 3]

  private:
    std::size_t height_, width_;
    Tensor pixels_;
};

struct EncoderConfig {
    std::size_t patch = 8;  // p; must equal 2^(number of backbone stages)
    std::size_t dim = 64;   // d
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t ffn = 128;
    std::vector<std::size_t> backbone_channels = {8, 16, 32};

    void validate() const {
        if (dim == 0 || heads == 0 || ffn == 0 || patch == 0)
            throw ConfigError("encoder dims must be positive");
        if (dim % heads != 0) throw ConfigError("encoder dim not divisible by heads");
        if (dim % 4 != 0) throw ConfigError("encoder dim must be divisible by 4 for 2D PE");
        if (backbone_channels.empty()) throw ConfigError("backbone needs at least one stage");
        std::size_t downsample = 1;
        for (std::size_t c : backbone_channels) {
            if (c == 0) throw ConfigError("backbone channel width must be positive");
            downsample *= 2;
        }
        if (downsample != patch)
            throw ConfigError("patch size " + std::to_string(patch) + " must equal 2^stages = " +
                              std::to_string(downsample));
    }
};

struct PatchEmbedding {
    Tensor tokens;  // F_I^{(0)}, [N, d]
    std::size_t grid_rows = 0;
    std::size_t grid_cols = 0;
};

struct EncodedImage {
    Tensor tokens;  // F_I, [N, d]
    std::size_t grid_rows = 0;
    std::size_t grid_cols = 0;
};

namespace detail {

// im2col index map for an HWC activation matrix: output row = spatial
// position, output cols = (ky, kx, channel) patch elements; -1 marks
// zero padding.
inline std::vector<std::int64_t> conv_index_map(std::size_t h, std::size_t w, std::size_t ch,
                                                std::size_t ksize, std::size_t stride,
                                                std::size_t pad, std::size_t out_h,
                                                std::size_t out_w) {
    std::vector<std::int64_t> idx;
    idx.reserve(out_h * out_w * ksize * ksize * ch);
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            for (std::size_t ky = 0; ky < ksize; ++ky) {
                for (std::size_t kx = 0; kx < ksize; ++kx) {
                    const std::int64_t iy =
                        static_cast<std::int64_t>(oy * stride + ky) - static_cast<std::int64_t>(pad);
                    const std::int64_t ix =
                        static_cast<std::int64_t>(ox * stride + kx) - static_cast<std::int64_t>(pad);
                    const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::int64_t>(h) &&
                                        ix < static_cast<std::int64_t>(w);
                    for (std::size_t c = 0; c < ch; ++c) {
                        idx.push_back(inside ? (iy * static_cast<std::int64_t>(w) + ix) *
                                                       static_cast<std::int64_t>(ch) +
                                                   static_cast<std::int64_t>(c)
                                             : -1);
                    }
                }
            }
        }
    }
    return idx;
}

}  // namespace detail

// One convolution over an HWC activation matrix.
class Conv2d {
  public:
    Conv2d() = default;
    Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t ksize, std::size_t stride, Rng& rng)
        : in_ch_(in_ch), out_ch_(out_ch), ksize_(ksize), stride_(stride),
          pad_(ksize / 2),
          weight_(nn::xavier_uniform(in_ch * ksize * ksize, out_ch,
                                     {out_ch, in_ch * ksize * ksize}, rng)),
          bias_(Tensor::zeros({out_ch}, true)) {}

    // x: [h*w, in_ch]; returns [out_h*out_w, out_ch].
    Tensor forward(Tape& tape, const Tensor& x, std::size_t h, std::size_t w) const {
        const std::size_t out_h = (h + 2 * pad_ - ksize_) / stride_ + 1;
        const std::size_t out_w = (w + 2 * pad_ - ksize_) / stride_ + 1;
        auto idx = detail::conv_index_map(h, w, in_ch_, ksize_, stride_, pad_, out_h, out_w);
        Tensor patches =
            ops::gather_flat(tape, x, {out_h * out_w, in_ch_ * ksize_ * ksize_}, idx);
        return ops::add_bias_rows(tape, ops::matmul_nt(tape, patches, weight_), bias_);
    }

    std::size_t out_size(std::size_t n) const { return (n + 2 * pad_ - ksize_) / stride_ + 1; }

    void collect(const std::string& prefix, nn::ParamSet& out) {
        out.add(prefix + ".W", weight_);
        out.add(prefix + ".b", bias_);
    }

  private:
    std::size_t in_ch_ = 0, out_ch_ = 0, ksize_ = 0, stride_ = 0, pad_ = 0;
    Tensor weight_, bias_;
};

// Stride-2 residual stage: two 3x3 convolutions with a 1x1 projection
// shortcut carrying the identity path across the downsample.
class ResidualStage {
  public:
    ResidualStage() = default;
    ResidualStage(std::size_t in_ch, std::size_t out_ch, Rng& rng)
        : conv1_(in_ch, out_ch, 3, 2, rng),
          conv2_(out_ch, out_ch, 3, 1, rng),
          shortcut_(in_ch, out_ch, 1, 2, rng) {}

    Tensor forward(Tape& tape, const Tensor& x, std::size_t h, std::size_t w) const {
        const std::size_t oh = conv1_.out_size(h), ow = conv1_.out_size(w);
        Tensor main = ops::relu(tape, conv1_.forward(tape, x, h, w));
        main = conv2_.forward(tape, main, oh, ow);
        Tensor skip = shortcut_.forward(tape, x, h, w);
        return ops::relu(tape, ops::add(tape, main, skip));
    }

    void collect(const std::string& prefix, nn::ParamSet& out) {
        conv1_.collect(prefix + ".conv1", out);
        conv2_.collect(prefix + ".conv2", out);
        shortcut_.collect(prefix + ".shortcut", out);
    }

  private:
    Conv2d conv1_, conv2_, shortcut_;
};

class VisionEncoder {
  public:
    VisionEncoder() = default;
    VisionEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        std::size_t in_ch = 3;
        for (std::size_t out_ch : cfg.backbone_channels) {
            stages_.emplace_back(in_ch, out_ch, rng);
            in_ch = out_ch;
        }
        proj_ = nn::Linear(in_ch, cfg.dim, rng);
        for (std::size_t i = 0; i < cfg.layers; ++i)
            layers_.emplace_back(cfg.dim, cfg.heads, cfg.ffn, rng);
    }

    const EncoderConfig& config() const { return cfg_; }

    // Residual backbone + 1x1 projection; rows are patches in row-major
    // grid order.
    PatchEmbedding conv_backbone(Tape& tape, const ImageTensor& img) const {
        if (img.height() % cfg_.patch != 0 || img.width() % cfg_.patch != 0)
            throw ShapeError("image " + std::to_string(img.height()) + "x" +
                             std::to_string(img.width()) + " not divisible by patch " +
                             std::to_string(cfg_.patch));
        Tensor x = img.pixels();
        std::size_t h = img.height(), w = img.width();
        for (const auto& stage : stages_) {
            x = stage.forward(tape, x, h, w);
            h /= 2;
            w /= 2;
        }
        PatchEmbedding pe;
        pe.tokens = proj_.forward(tape, x);
        pe.grid_rows = h;
        pe.grid_cols = w;
        return pe;
    }

    static Tensor positional_encoding(std::size_t grid_rows, std::size_t grid_cols,
                                      std::size_t dim) {
        return nn::sinusoidal_pe_2d(grid_rows, grid_cols, dim);
    }

    // F_I: adds position codes and runs the transformer stack.
    EncodedImage encode_patches(Tape& tape, const PatchEmbedding& patches,
                                std::vector<nn::AttentionProbe>* probes = nullptr) const {
        Tensor pe = positional_encoding(patches.grid_rows, patches.grid_cols, cfg_.dim);
        if (pe.rows() != patches.tokens.rows() || pe.cols() != patches.tokens.cols())
            throw ShapeError("PE " + shape_str(pe.shape()) + " vs patches " +
                             shape_str(patches.tokens.shape()));
        Tensor x = ops::add(tape, patches.tokens, pe);
        for (const auto& layer : layers_) {
            nn::AttentionProbe* probe = nullptr;
            if (probes) {
                probes->emplace_back();
                probe = &probes->back();
            }
            x = layer.forward(tape, x, probe);
        }
        EncodedImage enc;
        enc.tokens = x;
        enc.grid_rows = patches.grid_rows;
        enc.grid_cols = patches.grid_cols;
        return enc;
    }

    EncodedImage encode(Tape& tape, const ImageTensor& img) const {
        return encode_patches(tape, conv_backbone(tape, img));
    }

    // q = AvgPool(F_I)
    static Tensor image_query(Tape& tape, const EncodedImage& enc) {
        return ops::mean_pool_rows(tape, enc.tokens);
    }

    void collect(const std::string& prefix, nn::ParamSet& out) {
        for (std::size_t i = 0; i < stages_.size(); ++i)
            stages_[i].collect(prefix + ".stage" + std::to_string(i), out);
        proj_.collect(prefix + ".proj", out);
        for (std::size_t i = 0; i < layers_.size(); ++i)
            layers_[i].collect(prefix + ".layer" + std::to_string(i), out);
    }

  private:
    EncoderConfig cfg_;
    std::vector<ResidualStage> stages_;
    nn::Linear proj_;
    std::vector<nn::EncoderLayer> layers_;
};

}  // namespace mmrag
