#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mmrag/common.hpp"
#include "mmrag/gradcheck.hpp"
#include "mmrag/ops.hpp"

using namespace mmrag;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, bool requires_grad = false,
                     double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = rng.normal() * scale;
    return t;
}

}  // namespace

TEST_CASE("backward of sum(x) is all-ones") {
    Tensor x = Tensor::from_values({4}, {1, -2, 3, 0.5}, true);
    Tape tape;
    tape.backward(ops::sum_all(tape, x));
    for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("backward of dot(x, x) is 2x") {
    Tensor x = Tensor::from_values({3}, {1.5, -0.25, 2}, true);
    Tape tape;
    tape.backward(ops::dot(tape, x, x));
    for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == Catch::Approx(2.0 * x.at(i)));
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::from_values({2}, {1, 2}, true);
    Tape tape;
    Tensor y = ops::affine(tape, x, 2.0, 0.0);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("gradient accumulation equals duplicated-input oracle") {
    // f(x) = sum(x * x') where both arguments are the same tensor must give
    // the sum of the per-use gradients. Oracle: evaluate with an explicit
    // duplicate and add the two gradients.
    Rng rng(13);
    Tensor x = random_tensor({3, 3}, rng, true);
    Tensor w = random_tensor({3, 3}, rng);

    Tape tape;
    Tensor prod = ops::matmul(tape, x, x);
    Tensor loss = ops::sum_all(tape, ops::mul(tape, prod, w));
    tape.backward(loss);

    Tensor x1 = x.clone();
    x1.set_requires_grad(true);
    Tensor x2 = x.clone();
    x2.set_requires_grad(true);
    Tape oracle_tape;
    Tensor prod2 = ops::matmul(oracle_tape, x1, x2);
    Tensor loss2 = ops::sum_all(oracle_tape, ops::mul(oracle_tape, prod2, w));
    oracle_tape.backward(loss2);

    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(x.grad()[i] == Catch::Approx(x1.grad()[i] + x2.grad()[i]).margin(1e-12));
}

TEST_CASE("backward agrees with finite differences on a random MLP") {
    Rng rng(29);
    Tensor x = random_tensor({2, 5}, rng);
    Tensor w1 = random_tensor({5, 7}, rng, true, 0.5);
    Tensor b1 = random_tensor({7}, rng, true, 0.1);
    Tensor w2 = random_tensor({7, 3}, rng, true, 0.5);
    Tensor b2 = random_tensor({3}, rng, true, 0.1);

    auto forward = [&](Tape& t) {
        Tensor h = ops::relu(t, ops::add_bias_rows(t, ops::matmul(t, x, w1), b1));
        Tensor o = ops::add_bias_rows(t, ops::matmul(t, h, w2), b2);
        Tensor p = ops::softmax_rows(t, o);
        return ops::sum_all(t, ops::mul(t, p, p));
    };

    Tape tape;
    tape.backward(forward(tape));

    auto eval = [&]() {
        Tape t2(false);
        return forward(t2).item();
    };
    for (Tensor* p : {&w1, &b1, &w2, &b2}) {
        Tensor fd = finite_diff_grad(eval, *p);
        CHECK(max_grad_rel_error(*p, fd) < 1e-6);
    }
}

TEST_CASE("branches off the loss path receive no gradient") {
    Tensor x = Tensor::from_values({2}, {1, 2}, true);
    Tape tape;
    Tensor used = ops::dot(tape, x, x);
    Tensor unused = ops::affine(tape, x, 100.0, 0.0);
    (void)unused;
    tape.backward(used);
    CHECK(x.grad()[0] == Catch::Approx(2.0));
    CHECK(x.grad()[1] == Catch::Approx(4.0));
}

TEST_CASE("disabled tape records nothing") {
    Tensor x = Tensor::from_values({2}, {1, 2}, true);
    Tape tape(false);
    Tensor y = ops::dot(tape, x, x);
    CHECK(y.item() == 5.0);
    CHECK(tape.size() == 0);
}

TEST_CASE("sigmoid composite matches finite differences through several ops") {
    Rng rng(43);
    Tensor x = random_tensor({4}, rng, true);
    auto forward = [&](Tape& t) {
        Tensor s = ops::sigmoid(t, x);
        Tensor lg = ops::log(t, s);
        return ops::affine(t, ops::sum_all(t, lg), -1.0, 0.0);
    };
    Tape tape;
    tape.backward(forward(tape));
    auto eval = [&]() {
        Tape t2(false);
        return forward(t2).item();
    };
    CHECK(max_grad_rel_error(x, finite_diff_grad(eval, x)) < 1e-7);
}
