#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "mmrag/gradcheck.hpp"
#include "mmrag/vision.hpp"

using namespace mmrag;

namespace {

ImageTensor random_image(std::size_t h, std::size_t w, Rng& rng) {
    std::vector<double> rgb(h * w * 3);
    for (double& v : rgb) v = rng.uniform();
    return ImageTensor(h, w, std::move(rgb));
}

EncoderConfig small_config() {
    EncoderConfig cfg;
    cfg.patch = 4;
    cfg.dim = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.ffn = 16;
    cfg.backbone_channels = {4, 8};
    return cfg;
}

}  // namespace

TEST_CASE("patch count follows the grid arithmetic") {
    Rng rng(61);
    {
        EncoderConfig cfg;  // defaults: patch 8, three stages
        VisionEncoder enc(cfg, rng);
        Tape tape;
        PatchEmbedding pe = enc.conv_backbone(tape, random_image(32, 32, rng));
        CHECK(pe.tokens.rows() == 16);  // (32/8)^2
        CHECK(pe.tokens.cols() == cfg.dim);
        CHECK(pe.grid_rows == 4);
        CHECK(pe.grid_cols == 4);
    }
    {
        EncoderConfig cfg;
        cfg.patch = 16;
        cfg.backbone_channels = {4, 4, 4, 4};
        VisionEncoder enc(cfg, rng);
        Tape tape;
        PatchEmbedding pe = enc.conv_backbone(tape, random_image(224, 224, rng));
        CHECK(pe.tokens.rows() == 196);  // (224/16)^2
    }
}

TEST_CASE("non-divisible image dimensions are rejected") {
    Rng rng(62);
    VisionEncoder enc(small_config(), rng);
    Tape tape;
    CHECK_THROWS_AS(enc.conv_backbone(tape, random_image(10, 12, rng)), ShapeError);
}

TEST_CASE("all-zero image gives identical patch rows") {
    Rng rng(63);
    VisionEncoder enc(small_config(), rng);
    Tape tape;
    ImageTensor zero(16, 16, std::vector<double>(16 * 16 * 3, 0.0));
    PatchEmbedding pe = enc.conv_backbone(tape, zero);
    for (std::size_t i = 1; i < pe.tokens.rows(); ++i)
        for (std::size_t j = 0; j < pe.tokens.cols(); ++j)
            CHECK(pe.tokens.at(i, j) == Catch::Approx(pe.tokens.at(0, j)).margin(1e-12));
}

TEST_CASE("zero encoder layers reduce to patches plus position codes") {
    Rng rng(64);
    EncoderConfig cfg = small_config();
    cfg.layers = 0;
    VisionEncoder enc(cfg, rng);
    Tape tape;
    ImageTensor img = random_image(16, 16, rng);
    PatchEmbedding patches = enc.conv_backbone(tape, img);
    EncodedImage out = enc.encode_patches(tape, patches);
    Tensor pe = VisionEncoder::positional_encoding(patches.grid_rows, patches.grid_cols, cfg.dim);
    for (std::size_t i = 0; i < out.tokens.numel(); ++i)
        CHECK(out.tokens.at(i) == patches.tokens.at(i) + pe.at(i));
}

TEST_CASE("attention rows sum to 1 at every encoder layer and head") {
    Rng rng(65);
    EncoderConfig cfg = small_config();
    cfg.layers = 2;
    VisionEncoder enc(cfg, rng);
    Tape tape;
    ImageTensor img = random_image(16, 16, rng);
    std::vector<nn::AttentionProbe> probes;
    enc.encode_patches(tape, enc.conv_backbone(tape, img), &probes);
    REQUIRE(probes.size() == 2);
    for (const auto& probe : probes) {
        REQUIRE(probe.head_weights.size() == cfg.heads);
        for (const Tensor& w : probe.head_weights)
            for (std::size_t i = 0; i < w.rows(); ++i) {
                double sum = 0.0;
                for (std::size_t j = 0; j < w.cols(); ++j) sum += w.at(i, j);
                CHECK(std::fabs(sum - 1.0) <= 1e-12);
            }
    }
}

TEST_CASE("image query pools patch rows") {
    Rng rng(66);
    Tape tape;
    EncodedImage enc;
    enc.tokens = Tensor::from_values({3, 2}, {1, 5, 1, 5, 1, 5});
    Tensor q = VisionEncoder::image_query(tape, enc);
    CHECK(q.at(0) == 1.0);
    CHECK(q.at(1) == 5.0);

    // permutation invariance
    Tensor shuffled = Tensor::from_values({3, 2}, {2, 0, 4, 8, 0, 1});
    Tensor perm = Tensor::from_values({3, 2}, {0, 1, 2, 0, 4, 8});
    EncodedImage e1, e2;
    e1.tokens = shuffled;
    e2.tokens = perm;
    Tensor q1 = VisionEncoder::image_query(tape, e1);
    Tensor q2 = VisionEncoder::image_query(tape, e2);
    CHECK(q1.at(0) == Catch::Approx(q2.at(0)).margin(1e-12));
    CHECK(q1.at(1) == Catch::Approx(q2.at(1)).margin(1e-12));

    EncodedImage single;
    single.tokens = Tensor::from_values({1, 2}, {7, -3});
    Tensor qs = VisionEncoder::image_query(tape, single);
    CHECK(qs.at(0) == 7.0);
    CHECK(qs.at(1) == -3.0);
}

TEST_CASE("fixed seed gives bit-identical encodings") {
    EncoderConfig cfg = small_config();
    Rng rng_img(77);
    ImageTensor img = random_image(16, 16, rng_img);

    Rng r1(123), r2(123);
    VisionEncoder e1(cfg, r1), e2(cfg, r2);
    Tape t1(false), t2(false);
    EncodedImage a = e1.encode(t1, img);
    EncodedImage b = e2.encode(t2, img);
    REQUIRE(a.tokens.numel() == b.tokens.numel());
    for (std::size_t i = 0; i < a.tokens.numel(); ++i) CHECK(a.tokens.at(i) == b.tokens.at(i));
}

TEST_CASE("gradient reaches every backbone parameter") {
    Rng rng(68);
    EncoderConfig cfg = small_config();
    VisionEncoder enc(cfg, rng);
    nn::ParamSet params;
    enc.collect("vision", params);

    ImageTensor img = random_image(16, 16, rng);
    Tape tape;
    EncodedImage out = enc.encode(tape, img);
    Tensor w = Tensor::zeros(out.tokens.shape());
    for (std::size_t i = 0; i < w.numel(); ++i) w.at(i) = rng.normal();
    tape.backward(ops::sum_all(tape, ops::mul(tape, out.tokens, w)));

    for (auto& [name, p] : params.items) {
        INFO(name);
        REQUIRE(p.has_grad());
        double mx = 0.0;
        for (std::size_t i = 0; i < p.numel(); ++i) mx = std::max(mx, std::fabs(p.grad()[i]));
        CHECK(mx > 0.0);
    }
}

TEST_CASE("backbone gradients match finite differences at toy size") {
    Rng rng(69);
    EncoderConfig cfg;
    cfg.patch = 2;
    cfg.dim = 4;
    cfg.layers = 0;
    cfg.heads = 2;
    cfg.ffn = 8;
    cfg.backbone_channels = {3};
    VisionEncoder enc(cfg, rng);
    nn::ParamSet params;
    enc.collect("v", params);
    ImageTensor img = random_image(4, 4, rng);
    Tensor w = Tensor::zeros({4, 4});
    for (std::size_t i = 0; i < w.numel(); ++i) w.at(i) = rng.normal();

    auto forward = [&](Tape& t) {
        PatchEmbedding pe = enc.conv_backbone(t, img);
        return ops::sum_all(t, ops::mul(t, pe.tokens, w));
    };
    Tape tape;
    tape.backward(forward(tape));
    auto eval = [&]() {
        Tape t(false);
        return forward(t).item();
    };
    for (auto& [name, p] : params.items) {
        INFO(name);
        CHECK(max_grad_rel_error(p, finite_diff_grad(eval, p)) < 1e-5);
    }
}

TEST_CASE("image tensor validates channel range") {
    std::vector<double> bad(4 * 4 * 3, 0.5);
    bad[7] = 1.5;
    CHECK_THROWS_AS(ImageTensor(4, 4, bad), ContractError);
}

TEST_CASE("PPM round trip and header validation") {
    Rng rng(71);
    RawImage img;
    img.height = 6;
    img.width = 4;
    img.rgb.resize(6 * 4 * 3);
    for (double& v : img.rgb) v = rng.below(256) / 255.0;

    std::stringstream ss;
    write_ppm(ss, img);
    RawImage back = read_ppm(ss);
    REQUIRE(back.height == 6);
    REQUIRE(back.width == 4);
    for (std::size_t i = 0; i < img.rgb.size(); ++i)
        CHECK(back.rgb[i] == Catch::Approx(img.rgb[i]).margin(1e-9));

    std::stringstream bad("P5\n2 2\n255\n");
    CHECK_THROWS_AS(read_ppm(bad), FormatError);
    std::stringstream cut("P6\n2 2\n255\nxx");
    CHECK_THROWS_AS(read_ppm(cut), FormatError);
}
