#include <catch2/catch_amalgamated.hpp>

#include "cipa/finite_diff.hpp"
#include "cipa/ops.hpp"
#include "test_util.hpp"

using namespace cipa;
using testutil::max_grad_err;
using testutil::rand_tensor;

TEST_CASE("backward of linear identities") {
    auto x = Tensor<double>::from_data({3}, {1, 2, 3}).set_requires_grad();
    {
        OpGraph<double> g;
        auto loss = sum_all(x);
        backward(g, loss);
    }
    CHECK(x.grad() == std::vector<double>{1, 1, 1});

    x.zero_grad();
    {
        OpGraph<double> g;
        auto loss = sum_all(mul(x, x));
        backward(g, loss);
    }
    CHECK(x.grad() == std::vector<double>{2, 4, 6});
}

TEST_CASE("sigmoid gradient at zero is 0.25") {
    auto x = Tensor<double>::scalar(0.0).set_requires_grad();
    OpGraph<double> g;
    auto y = sigmoid(x);
    backward(g, y);
    CHECK(x.grad()[0] == 0.25);
}

TEST_CASE("chain of k adds accumulates gradient k") {
    auto x = Tensor<double>::scalar(1.5).set_requires_grad();
    const int k = 7;
    OpGraph<double> g;
    Tensor<double> acc = add(x, x);
    for (int i = 2; i < k; ++i) acc = add(acc, x);
    backward(g, sum_all(acc));
    CHECK(x.grad()[0] == double(k));
}

TEST_CASE("repeated backward without reset accumulates into leaves") {
    auto x = Tensor<double>::from_data({2}, {1, 2}).set_requires_grad();
    OpGraph<double> g;
    auto loss = sum_all(mul(x, x));
    backward(g, loss);
    backward(g, loss);
    CHECK(x.grad() == std::vector<double>{4, 8});
}

TEST_CASE("non-scalar loss is a contract error") {
    auto x = Tensor<double>::from_data({2}, {1, 2}).set_requires_grad();
    OpGraph<double> g;
    auto y = mul(x, x);
    CHECK_THROWS_AS(backward(g, y), ContractError);
}

TEST_CASE("finite_diff_grad closed forms") {
    auto sq = [](const Tensor<double>& t) {
        double acc = 0;
        for (double v : t.vec()) acc += v * v;
        return acc;
    };
    auto x = Tensor<double>::from_data({1}, {1.0});
    auto g = finite_diff_grad<double>(sq, x, 1e-4);
    CHECK(g.data()[0] == Catch::Approx(2.0).margin(1e-6));

    auto c = finite_diff_grad<double>([](const Tensor<double>&) { return 3.0; }, x, 1e-4);
    CHECK(c.data()[0] == 0.0);

    auto e = finite_diff_grad<double>(
        [](const Tensor<double>& t) { return std::exp(t.data()[0]); },
        Tensor<double>::from_data({1}, {0.0}), 1e-4);
    CHECK(e.data()[0] == Catch::Approx(1.0).margin(1e-6));

    CHECK_THROWS_AS(finite_diff_grad<double>(sq, x, 0.0), ContractError);
}

// Every primitive matches central differences at rel err <= 1e-4 on random
// inputs in [-2,2], shapes <= 64 elements, eps = 1e-3, in 64-bit.
TEST_CASE("primitive gradient checks") {
    Rng rng(2024);
    const double tol = 1e-4;

    SECTION("binary broadcast ops") {
        auto a = rand_tensor({3, 4}, rng);
        auto b = rand_tensor({4}, rng);
        auto bpos = rand_tensor({4}, rng, 0.5, 2.0);
        CHECK(max_grad_err([&] { return sum_all(mul(add(a, b), a)); }, {a, b}) < tol);
        CHECK(max_grad_err([&] { return sum_all(sub(a, b)); }, {a, b}) < tol);
        CHECK(max_grad_err([&] { return sum_all(div(a, bpos)); }, {a, bpos}) < tol);
    }
    SECTION("unary ops") {
        auto x = rand_tensor({2, 5}, rng);
        auto xpos = rand_tensor({2, 5}, rng, 0.2, 2.0);
        CHECK(max_grad_err([&] { return sum_all(mul(sigmoid(x), x)); }, {x}) < tol);
        CHECK(max_grad_err([&] { return sum_all(silu(x)); }, {x}) < tol);
        CHECK(max_grad_err([&] { return sum_all(softplus(x)); }, {x}) < tol);
        CHECK(max_grad_err([&] { return sum_all(cipa::exp(x)); }, {x}) < tol);
        CHECK(max_grad_err([&] { return sum_all(cipa::log(xpos)); }, {xpos}) < tol);
        CHECK(max_grad_err([&] { return sum_all(zoh_phi(x)); }, {x}) < tol);
        CHECK(max_grad_err([&] { return sum_all(mul_scalar(add_scalar(x, 0.7), 1.3)); }, {x}) < tol);
        // series branch of zoh_phi
        auto tiny = rand_tensor({4}, rng, -5e-7, 5e-7);
        auto weights = rand_tensor({4}, rng);
        CHECK(max_grad_err([&] { return sum_all(mul(zoh_phi(tiny), weights)); },
                           {tiny}, 1e-8) < 1e-2);
    }
    SECTION("matmul and layernorm") {
        auto a = rand_tensor({4, 3}, rng);
        auto b = rand_tensor({3, 5}, rng);
        CHECK(max_grad_err([&] { return sum_all(mul(matmul(a, b), matmul(a, b))); }, {a, b}) < tol);

        auto x = rand_tensor({3, 6}, rng);
        auto gamma = rand_tensor({6}, rng, 0.5, 1.5);
        auto beta = rand_tensor({6}, rng);
        CHECK(max_grad_err([&] { return sum_all(mul(layernorm(x, gamma, beta), x)); },
                           {x, gamma, beta}) < tol);
    }
    SECTION("convolutions") {
        auto x = rand_tensor({5, 4, 2}, rng);
        auto w = rand_tensor({3, 3, 2, 3}, rng);
        auto bias = rand_tensor({3}, rng);
        CHECK(max_grad_err([&] { return sum_all(mul(conv2d(x, w, bias, 1, 1),
                                                    conv2d(x, w, bias, 1, 1))); },
                           {x, w, bias}) < tol);
        auto w2 = rand_tensor({2, 2, 2, 3}, rng);
        CHECK(max_grad_err([&] { return sum_all(conv2d(x, w2, {}, 2, 1)); }, {x, w2}) < tol);

        auto dw = rand_tensor({3, 3, 2}, rng);
        auto db = rand_tensor({2}, rng);
        CHECK(max_grad_err([&] { return sum_all(mul(dwconv2d(x, dw, db, 1), x)); },
                           {x, dw, db}) < tol);

        auto seq = rand_tensor({6, 3}, rng);
        auto cw = rand_tensor({4, 3}, rng);
        auto cb = rand_tensor({3}, rng);
        CHECK(max_grad_err([&] { return sum_all(mul(dwconv1d_causal(seq, cw, cb), seq)); },
                           {seq, cw, cb}) < tol);
    }
    SECTION("movement and reduction ops") {
        auto x = rand_tensor({3, 4, 2}, rng);
        CHECK(max_grad_err([&] { return sum_all(mul(reshape(x, {6, 4}), reshape(x, {6, 4}))); },
                           {x}) < tol);
        CHECK(max_grad_err([&] { return sum_all(mul(transpose(x, 0, 1), transpose(x, 0, 1))); },
                           {x}) < tol);
        CHECK(max_grad_err([&] { return sum_all(mul(flip(x, 1), x)); }, {x}) < tol);
        CHECK(max_grad_err([&] { return sum_all(mul(slice(x, 1, 1, 2), slice(x, 1, 0, 2))); },
                           {x}) < tol);
        auto y = rand_tensor({3, 2, 2}, rng);
        CHECK(max_grad_err([&] {
                  auto c = concat<double>({x, y}, 1);
                  return sum_all(mul(c, c));
              }, {x, y}) < tol);
        CHECK(max_grad_err([&] { return sum_all(mul(sum_axis(x, 1), sum_axis(x, 1))); }, {x}) < tol);
        CHECK(max_grad_err([&] { return sum_all(mul(mean_axis(x, 2), mean_axis(x, 2))); }, {x}) < tol);
        std::vector<std::size_t> idx = {2, 0, 1, 2};
        CHECK(max_grad_err([&] {
                  auto gth = gather_rows(x, idx);
                  return sum_all(mul(gth, gth));
              }, {x}) < tol);
    }
    SECTION("pooling and resizing") {
        auto x = rand_tensor({3, 5}, rng);
        CHECK(max_grad_err([&] {
                  auto p = adaptive_avg_pool1d(x, 3);
                  return sum_all(mul(p, p));
              }, {x}) < tol);
        auto img = rand_tensor({4, 4, 2}, rng);
        CHECK(max_grad_err([&] {
                  auto u = resize_bilinear(img, 7, 5);
                  return sum_all(mul(u, u));
              }, {img}) < tol);
        CHECK(max_grad_err([&] { return sum_all(mul(stride2_downsample(img), stride2_downsample(img))); },
                           {img}) < tol);
    }
}
