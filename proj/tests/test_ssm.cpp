#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cipa/ssm.hpp"
#include "test_util.hpp"

using namespace cipa;
using testutil::max_grad_err;
using testutil::rand_tensor;

namespace {

// Random frozen diagonal system with A_bar in (0,1).
struct Frozen {
    Tensor<double> A_bar, B_bar, C, skip;
};

Frozen random_frozen(std::size_t D, std::size_t N, Rng& rng, bool with_skip = false) {
    Frozen f{Tensor<double>({D, N}), Tensor<double>({D, N}), Tensor<double>({D, N}),
             Tensor<double>({D})};
    for (auto& v : f.A_bar.vec()) v = rng.uniform(0.05, 0.95);
    for (auto& v : f.B_bar.vec()) v = rng.uniform(-1.0, 1.0);
    for (auto& v : f.C.vec()) v = rng.uniform(-1.0, 1.0);
    if (with_skip)
        for (auto& v : f.skip.vec()) v = rng.uniform(-1.0, 1.0);
    return f;
}

}  // namespace

TEST_CASE("zoh discretization scalar closed forms") {
    auto A = Tensor<double>::from_data({1, 1}, {-1.0});
    auto B = Tensor<double>::from_data({1, 1}, {1.0});
    auto Delta = Tensor<double>::from_data({1, 1}, {0.1});
    auto [abar, bbar] = zoh_discretize(A, B, Delta);
    CHECK(abar.item() == Catch::Approx(std::exp(-0.1)).epsilon(1e-12));
    CHECK(bbar.item() == Catch::Approx((std::exp(-0.1) - 1.0) / -1.0).epsilon(1e-12));

    // A -> 0 limit: identity dynamics, B_bar -> Delta * B
    auto A0 = Tensor<double>::from_data({1, 1}, {-1e-9});
    auto [abar0, bbar0] = zoh_discretize(A0, B, Delta);
    CHECK(abar0.item() == Catch::Approx(1.0).margin(1e-9));
    CHECK(bbar0.item() == Catch::Approx(0.1).margin(1e-9));

    auto A2 = Tensor<double>::from_data({1, 1}, {-2.0});
    auto B3 = Tensor<double>::from_data({1, 1}, {3.0});
    auto D5 = Tensor<double>::from_data({1, 1}, {0.5});
    auto [abar2, bbar2] = zoh_discretize(A2, B3, D5);
    CHECK(abar2.item() == Catch::Approx(std::exp(-1.0)).epsilon(1e-12));
    CHECK(bbar2.item() == Catch::Approx((std::exp(-1.0) - 1.0) / -2.0 * 3.0).epsilon(1e-12));

    auto bad = Tensor<double>::from_data({1, 1}, {0.0});
    CHECK_THROWS_AS(zoh_discretize(A, B, bad), ContractError);
}

TEST_CASE("frozen scan recurrence by hand") {
    auto x = Tensor<double>::from_data({3, 1}, {1, 1, 1});
    auto A_bar = Tensor<double>::from_data({1, 1}, {0.5});
    auto B_bar = Tensor<double>::from_data({1, 1}, {1.0});
    auto C = Tensor<double>::from_data({1, 1}, {1.0});
    auto skip = Tensor<double>::from_data({1}, {0.0});
    auto y = scan_frozen(x, A_bar, B_bar, C, skip);
    CHECK(y.vec() == std::vector<double>{1.0, 1.5, 1.75});
}

TEST_CASE("selective scan degenerate cases") {
    Rng rng(1);
    auto p = SSMParams<double>::init(3, 4, rng);

    SECTION("zero input gives zero output") {
        Tensor<double> x({5, 3}, 0.0);
        auto y = selective_scan(x, p);
        for (double v : y.vec()) CHECK(v == 0.0);
    }
    SECTION("skip-only parameters reduce to feedthrough") {
        for (auto& v : p.W_C.vec()) v = 0.0;
        for (auto& v : p.D_skip.vec()) v = 1.75;
        auto x = rand_tensor({4, 3}, rng);
        auto y = selective_scan(x, p);
        for (std::size_t i = 0; i < x.numel(); ++i)
            CHECK(y.data()[i] == Catch::Approx(1.75 * x.data()[i]).epsilon(1e-12));
    }
    SECTION("empty sequence is a contract error") {
        Tensor<double> x({0, 3});
        CHECK_THROWS_AS(selective_scan(x, p), ContractError);
    }
}

TEST_CASE("lti kernel closed forms") {
    auto A_bar = Tensor<double>::from_data({1, 1}, {0.5});
    auto B_bar = Tensor<double>::from_data({1, 1}, {1.0});
    auto C = Tensor<double>::from_data({1, 1}, {1.0});
    auto K = lti_kernel(A_bar, B_bar, C, 3);
    CHECK(K.vec() == std::vector<double>{1.0, 0.5, 0.25});

    auto A0 = Tensor<double>::from_data({1, 1}, {0.0});
    auto B2 = Tensor<double>::from_data({1, 1}, {2.0});
    auto C3 = Tensor<double>::from_data({1, 1}, {3.0});
    auto K0 = lti_kernel(A0, B2, C3, 4);
    CHECK(K0.vec() == std::vector<double>{6.0, 0.0, 0.0, 0.0});

    CHECK_THROWS_AS(lti_kernel(A_bar, B_bar, C, 0), ContractError);
}

TEST_CASE("LTI equivalence: frozen scan equals causal convolution") {
    Rng rng(42);
    double worst = 0.0;
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t D = 1 + rng.uniform_int(8);
        const std::size_t N = 1 + rng.uniform_int(8);
        const std::size_t L = 1 + rng.uniform_int(64);
        Frozen f = random_frozen(D, N, rng);
        auto x = rand_tensor({L, D}, rng, -1.0, 1.0);
        auto y_scan = scan_frozen(x, f.A_bar, f.B_bar, f.C, f.skip);
        auto K = lti_kernel(f.A_bar, f.B_bar, f.C, L);
        auto y_conv = causal_conv_with_kernel(x, K);
        for (std::size_t i = 0; i < y_scan.numel(); ++i)
            worst = std::max(worst, std::abs(y_scan.data()[i] - y_conv.data()[i]));
    }
    CHECK(worst <= 1e-4);
}

TEST_CASE("causality: perturbing x_t leaves earlier outputs unchanged exactly") {
    Rng rng(9);
    auto p = SSMParams<double>::init(4, 8, rng);
    auto x = rand_tensor({12, 4}, rng);
    auto y0 = selective_scan(x, p);
    auto x2 = x.clone();
    const std::size_t t_hit = 7;
    for (std::size_t d = 0; d < 4; ++d) x2.data()[t_hit * 4 + d] += 0.5;
    auto y1 = selective_scan(x2, p);
    for (std::size_t t = 0; t < t_hit; ++t)
        for (std::size_t d = 0; d < 4; ++d)
            CHECK(y0.at({t, d}) == y1.at({t, d}));
    bool later_changed = false;
    for (std::size_t t = t_hit; t < 12; ++t)
        for (std::size_t d = 0; d < 4; ++d)
            later_changed = later_changed || y0.at({t, d}) != y1.at({t, d});
    CHECK(later_changed);
}

TEST_CASE("stability: A_bar in (0,1) and bounded state under bounded input") {
    Rng rng(17);
    auto p = SSMParams<double>::init(2, 4, rng);
    auto x = rand_tensor({64, 2}, rng, -1.0, 1.0);
    ScanInputs<double> s = ssm_projections(x, p);
    auto A = neg(exp(p.A_log));
    auto [abar, bbar] = zoh_discretize(A, s.B, s.delta);
    double abar_max = 0.0, bxb = 0.0;
    for (double v : abar.vec()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        abar_max = std::max(abar_max, v);
    }
    // |h| <= |B_bar x|_max / (1 - A_bar_max)
    for (std::size_t t = 0; t < 64; ++t)
        for (std::size_t d = 0; d < 2; ++d)
            for (std::size_t n = 0; n < 4; ++n)
                bxb = std::max(bxb, std::abs(bbar.at({t, d, n}) * x.at({t, d})));
    const double bound = bxb / (1.0 - abar_max);
    // replay the recurrence and check the bound
    std::vector<double> h(2 * 4, 0.0);
    for (std::size_t t = 0; t < 64; ++t)
        for (std::size_t d = 0; d < 2; ++d)
            for (std::size_t n = 0; n < 4; ++n) {
                double& hv = h[d * 4 + n];
                hv = abar.at({t, d, n}) * hv + bbar.at({t, d, n}) * x.at({t, d});
                CHECK(std::abs(hv) <= bound + 1e-12);
            }
}

TEST_CASE("chunked scan equals sequential scan") {
    Rng rng(23);
    auto p = SSMParams<double>::init(5, 6, rng);
    auto x = rand_tensor({32, 5}, rng);
    auto y_full = selective_scan(x, p);
    auto y_chunk_full = chunked_scan(x, p, 32);
    CHECK(y_full.vec() == y_chunk_full.vec());  // chunk == L is bit-identical
    for (std::size_t chunk : {std::size_t(1), std::size_t(5), std::size_t(7)}) {
        auto y = chunked_scan(x, p, chunk);
        double worst = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i)
            worst = std::max(worst, std::abs(y.data()[i] - y_full.data()[i]));
        CHECK(worst <= 1e-5);
    }
    CHECK_THROWS_AS(chunked_scan(x, p, 0), ContractError);
}

TEST_CASE("selective scan gradients match finite differences") {
    Rng rng(31);
    auto p = SSMParams<double>::init(3, 4, rng);
    auto x = rand_tensor({6, 3}, rng);
    auto weights = rand_tensor({6, 3}, rng);
    auto build = [&] { return sum_all(mul(selective_scan(x, p), weights)); };
    CHECK(max_grad_err(build, {x, p.A_log, p.W_B, p.W_C, p.w_delta, p.dt_bias, p.D_skip}) < 1e-4);
}

TEST_CASE("mamba block") {
    Rng rng(77);

    SECTION("zero parameters everywhere give zero output") {
        auto p = MambaBlockParams<double>::init(3, 4, rng);
        p.visit("", [](const std::string& name, Tensor<double>& t) {
            if (name.find("A_log") != std::string::npos) return;  // keep A negative
            for (auto& v : t.vec()) v = 0.0;
        });
        auto x = rand_tensor({5, 3}, rng);
        auto y = mamba_block(x, p);
        for (double v : y.vec()) CHECK(v == 0.0);
    }
    SECTION("shape preserved across lengths") {
        auto p = MambaBlockParams<double>::init(4, 4, rng);
        for (std::size_t L : {std::size_t(1), std::size_t(7), std::size_t(64)}) {
            auto x = rand_tensor({L, 4}, rng);
            auto y = mamba_block(x, p);
            CHECK(y.shape() == Shape{L, 4});
        }
    }
    SECTION("gradient check at L=8, D=4") {
        auto p = MambaBlockParams<double>::init(4, 4, rng);
        auto x = rand_tensor({8, 4}, rng, -1.0, 1.0);
        auto build = [&] { return sum_all(mamba_block(x, p)); };
        CHECK(max_grad_err(build, {x, p.W_in, p.conv_w, p.conv_b, p.W_out, p.ssm.A_log,
                                   p.ssm.w_delta, p.ssm.D_skip}) < 1e-4);
    }
}
