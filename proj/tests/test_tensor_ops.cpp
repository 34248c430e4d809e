#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "mmrag/common.hpp"
#include "mmrag/gradcheck.hpp"
#include "mmrag/ops.hpp"
#include "mmrag/tensor_io.hpp"

using namespace mmrag;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, bool requires_grad = false,
                     double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = rng.normal() * scale;
    return t;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
    Tape tape;
    Rng rng(41);
    Tensor eye = Tensor::zeros({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    Tensor a = random_tensor({3, 3}, rng);
    Tensor prod = ops::matmul(tape, eye, a);
    for (std::size_t i = 0; i < 9; ++i) CHECK(prod.at(i) == a.at(i));

    Tensor m = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    Tensor v = Tensor::from_values({2, 1}, {1, 1});
    Tensor r = ops::matmul(tape, m, v);
    CHECK(r.at(0, 0) == 3.0);
    CHECK(r.at(1, 0) == 7.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions naming both shapes") {
    Tape tape;
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        ops::matmul(tape, a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches central finite differences") {
    Rng rng(7);
    Tensor a = random_tensor({4, 5}, rng, true);
    Tensor b = random_tensor({5, 3}, rng, true);
    Tensor w = random_tensor({4, 3}, rng);  // fixed projection => generic scalar loss

    Tape tape;
    Tensor c = ops::matmul(tape, a, b);
    Tensor loss = ops::sum_all(tape, ops::mul(tape, c, w));
    tape.backward(loss);

    auto eval = [&]() {
        Tape t2(false);
        Tensor c2 = ops::matmul(t2, a, b);
        return ops::sum_all(t2, ops::mul(t2, c2, w)).item();
    };
    Tensor fd_a = finite_diff_grad(eval, a);
    Tensor fd_b = finite_diff_grad(eval, b);
    CHECK(max_grad_rel_error(a, fd_a) < 1e-6);
    CHECK(max_grad_rel_error(b, fd_b) < 1e-6);
}

TEST_CASE("softmax_rows symmetry, overflow safety, normalization") {
    Tape tape;
    Tensor sym = ops::softmax_rows(tape, Tensor::from_values({1, 2}, {0, 0}));
    CHECK(sym.at(0, 0) == Catch::Approx(0.5).margin(1e-15));
    CHECK(sym.at(0, 1) == Catch::Approx(0.5).margin(1e-15));

    Tensor big = ops::softmax_rows(tape, Tensor::from_values({1, 2}, {1000, 0}));
    CHECK(std::isfinite(big.at(0, 0)));
    CHECK(big.at(0, 0) == Catch::Approx(1.0).margin(1e-12));
    CHECK(big.at(0, 1) == Catch::Approx(0.0).margin(1e-12));

    Rng rng(3);
    Tensor x = random_tensor({3, 4}, rng, false, 2.0);
    Tensor s = ops::softmax_rows(tape, x);
    for (std::size_t i = 0; i < 3; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(s.at(i, j) >= 0.0);
            row += s.at(i, j);
        }
        CHECK(std::fabs(row - 1.0) <= 1e-12);
    }
}

TEST_CASE("sigmoid values and finite-difference gradient") {
    Tape tape;
    Tensor zero = ops::sigmoid(tape, Tensor::scalar(0.0));
    CHECK(zero.item() == 0.5);
    Tensor sat = ops::sigmoid(tape, Tensor::scalar(50.0));
    CHECK(sat.item() == Catch::Approx(1.0).margin(1e-12));

    for (double x0 : {-2.0, 0.0, 3.0}) {
        Tensor x = Tensor::from_values({1}, {x0}, true);
        Tape t;
        Tensor y = ops::sigmoid(t, x);
        t.backward(y);
        auto eval = [&]() {
            Tape t2(false);
            return ops::sigmoid(t2, x).item();
        };
        Tensor fd = finite_diff_grad(eval, x);
        CHECK(grad_rel_error(x.grad()[0], fd.at(0)) < 1e-8);
    }
}

TEST_CASE("mean_pool_rows constant, hand arithmetic, linearity") {
    Tape tape;
    Tensor rows = Tensor::from_values({3, 2}, {4, -1, 4, -1, 4, -1});
    Tensor pooled = ops::mean_pool_rows(tape, rows);
    CHECK(pooled.at(0) == 4.0);
    CHECK(pooled.at(1) == -1.0);

    Tensor m = Tensor::from_values({2, 2}, {1, 3, 3, 5});
    Tensor p = ops::mean_pool_rows(tape, m);
    CHECK(p.at(0) == 2.0);
    CHECK(p.at(1) == 4.0);

    Rng rng(11);
    Tensor x = random_tensor({5, 3}, rng);
    Tensor pool_then_scale = ops::affine(tape, ops::mean_pool_rows(tape, x), 2.5, 0.0);
    Tensor scale_then_pool = ops::mean_pool_rows(tape, ops::affine(tape, x, 2.5, 0.0));
    for (std::size_t j = 0; j < 3; ++j)
        CHECK(pool_then_scale.at(j) == Catch::Approx(scale_then_pool.at(j)).margin(1e-15));
}

TEST_CASE("layer_norm zero-variance row and bias mean") {
    Tape tape;
    Tensor gain = Tensor::from_values({4}, {1, 1, 1, 1});
    Tensor bias = Tensor::zeros({4});
    Tensor constant_row = Tensor::from_values({1, 4}, {3, 3, 3, 3});
    Tensor out = ops::layer_norm(tape, constant_row, gain, bias);
    for (std::size_t j = 0; j < 4; ++j) CHECK(out.at(0, j) == 0.0);

    Rng rng(5);
    Tensor x = random_tensor({2, 4}, rng);
    Tensor b2 = Tensor::from_values({4}, {0.5, -1.0, 2.0, 0.25});
    Tensor y = ops::layer_norm(tape, x, gain, b2);
    for (std::size_t i = 0; i < 2; ++i) {
        double row_mean = 0.0;
        for (std::size_t j = 0; j < 4; ++j) row_mean += y.at(i, j);
        row_mean /= 4.0;
        CHECK(row_mean == Catch::Approx((0.5 - 1.0 + 2.0 + 0.25) / 4.0).margin(1e-9));
    }
}

TEST_CASE("layer_norm gradient matches finite differences") {
    Rng rng(17);
    Tensor x = random_tensor({3, 6}, rng, true);
    Tensor gain = random_tensor({6}, rng, true, 0.5);
    Tensor bias = random_tensor({6}, rng, true, 0.5);
    Tensor w = random_tensor({3, 6}, rng);

    Tape tape;
    Tensor y = ops::layer_norm(tape, x, gain, bias);
    Tensor loss = ops::sum_all(tape, ops::mul(tape, y, w));
    tape.backward(loss);

    auto eval = [&]() {
        Tape t2(false);
        Tensor y2 = ops::layer_norm(t2, x, gain, bias);
        return ops::sum_all(t2, ops::mul(t2, y2, w)).item();
    };
    CHECK(max_grad_rel_error(x, finite_diff_grad(eval, x)) < 1e-5);
    CHECK(max_grad_rel_error(gain, finite_diff_grad(eval, gain)) < 1e-5);
    CHECK(max_grad_rel_error(bias, finite_diff_grad(eval, bias)) < 1e-5);
}

TEST_CASE("finite_diff_grad trivial oracles") {
    Tensor x = Tensor::from_values({2}, {1, 2});
    auto sum_sq = [&]() {
        double s = 0.0;
        for (std::size_t i = 0; i < x.numel(); ++i) s += x.at(i) * x.at(i);
        return s;
    };
    Tensor g = finite_diff_grad(sum_sq, x);
    CHECK(g.at(0) == Catch::Approx(2.0).margin(1e-6));
    CHECK(g.at(1) == Catch::Approx(4.0).margin(1e-6));

    Tensor z = Tensor::scalar(0.0);
    auto sig = [&]() {
        Tape t(false);
        return ops::sigmoid(t, z).item();
    };
    Tensor gs = finite_diff_grad(sig, z);
    CHECK(gs.at(0) == Catch::Approx(0.25).margin(1e-8));
}

TEST_CASE("forward ops are deterministic bit-for-bit") {
    Rng rng(23);
    Tensor a = random_tensor({6, 6}, rng);
    Tensor b = random_tensor({6, 6}, rng);
    Tape t1, t2;
    Tensor r1 = ops::softmax_rows(t1, ops::matmul(t1, a, b));
    Tensor r2 = ops::softmax_rows(t2, ops::matmul(t2, a, b));
    for (std::size_t i = 0; i < r1.numel(); ++i) CHECK(r1.at(i) == r2.at(i));
}

TEST_CASE("structural ops round-trip and slice gradients flow") {
    Rng rng(31);
    Tensor a = random_tensor({3, 4}, rng, true);
    Tape tape;
    Tensor left = ops::slice_cols(tape, a, 0, 2);
    Tensor right = ops::slice_cols(tape, a, 2, 4);
    Tensor back = ops::concat_cols(tape, {left, right});
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(back.at(i) == a.at(i));

    Tensor loss = ops::sum_all(tape, back);
    tape.backward(loss);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.grad()[i] == 1.0);
}

TEST_CASE("gather_flat pads with zero and scatter-adds gradient") {
    Tensor src = Tensor::from_values({4}, {10, 20, 30, 40}, true);
    Tape tape;
    Tensor out = ops::gather_flat(tape, src, {5}, {0, -1, 2, 2, 3});
    CHECK(out.at(0) == 10.0);
    CHECK(out.at(1) == 0.0);
    CHECK(out.at(2) == 30.0);
    CHECK(out.at(3) == 30.0);
    CHECK(out.at(4) == 40.0);
    tape.backward(ops::sum_all(tape, out));
    CHECK(src.grad()[0] == 1.0);
    CHECK(src.grad()[1] == 0.0);
    CHECK(src.grad()[2] == 2.0);
    CHECK(src.grad()[3] == 1.0);
}

TEST_CASE("TNSR serialization round-trips bit-exactly") {
    Rng rng(99);
    Tensor t = random_tensor({2, 3, 4}, rng);
    t.at(0) = -0.0;
    t.at(1) = 1e-310;  // subnormal survives
    std::stringstream ss;
    write_tensor(ss, t);
    Tensor back = read_tensor(ss);
    REQUIRE(back.shape() == t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) {
        std::uint64_t ua, ub;
        std::memcpy(&ua, &t.at(i), 8);
        std::memcpy(&ub, &back.at(i), 8);
        CHECK(ua == ub);
    }
}

TEST_CASE("TNSR rejects corrupt input with byte offset") {
    std::stringstream ss;
    ss.write("TNSX", 4);
    try {
        read_tensor(ss);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(e.byte_offset == 0);
    }

    std::stringstream truncated;
    write_tensor(truncated, Tensor::from_values({2}, {1, 2}));
    std::string bytes = truncated.str();
    bytes.resize(bytes.size() - 4);
    std::stringstream cut(bytes);
    CHECK_THROWS_AS(read_tensor(cut), FormatError);
}
