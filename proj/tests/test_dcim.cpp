#include <catch2/catch_amalgamated.hpp>

#include "cipa/dcim.hpp"
#include "test_util.hpp"

using namespace cipa;
using testutil::max_grad_err;
using testutil::rand_tensor;

namespace {

// Local stem that passes the input through unchanged (center-tap kernels).
template <typename T>
void make_local_stem_identity(DcimParams<T>& p) {
    const std::size_t C = p.local_dim();
    for (auto& v : p.local_w1.vec()) v = T(0);
    for (auto& v : p.local_b1.vec()) v = T(0);
    for (auto& v : p.local_w2.vec()) v = T(0);
    for (auto& v : p.local_b2.vec()) v = T(0);
    for (std::size_t c = 0; c < C; ++c) {
        p.local_w1.at({1, 1, c, c}) = T(1);
        p.local_w2.at({1, 1, c, c}) = T(1);
    }
}

}  // namespace

TEST_CASE("region geometry arithmetic") {
    RegionGeometry g16(16, 16, 4);
    CHECK(g16.n() == 16);
    CHECK(g16.m() == 16);
    RegionGeometry g8(8, 8, 8);
    CHECK(g8.n() == 1);
    CHECK(g8.m() == 64);
    for (std::size_t hw : {std::size_t(8), std::size_t(16), std::size_t(32)})
        for (std::size_t r : {std::size_t(2), std::size_t(4), std::size_t(8)}) {
            RegionGeometry g(hw, hw, r);
            CHECK(g.n() * g.m() == hw * hw);
        }
    CHECK_THROWS_AS(RegionGeometry(10, 10, 4), ContractError);
}

TEST_CASE("region split and merge round-trip exactly") {
    Rng rng(31);
    for (std::size_t r : {std::size_t(2), std::size_t(4)}) {
        RegionGeometry g(8, 12, r);
        auto x = rand_tensor({8, 12, 3}, rng);
        auto back = region_merge(region_split(x, g), g);
        CHECK(back.vec() == x.vec());
    }
}

TEST_CASE("region mamba") {
    Rng rng(32);
    auto p = DcimParams<double>::init(3, 4, 4, 4, 4, rng);

    SECTION("zero parameters give the identity (residual passes through)") {
        for (auto& v : p.region_mamba.W_out.vec()) v = 0.0;
        auto tokens = rand_tensor({9, 4}, rng);
        auto y = region_mamba(tokens, p);
        CHECK(y.vec() == tokens.vec());
    }
    SECTION("single region degenerates to a one-step scan") {
        auto tokens = rand_tensor({1, 4}, rng);
        auto y = region_mamba(tokens, p);
        auto ref = add(tokens, mamba_block(layernorm(tokens, p.region_pre_ln_g, p.region_pre_ln_b),
                                           p.region_mamba));
        CHECK(y.vec() == ref.vec());
    }
    SECTION("gradient check at n=9, D=8") {
        auto p8 = DcimParams<double>::init(3, 8, 8, 4, 4, rng);
        auto tokens = rand_tensor({9, 8}, rng, -1.0, 1.0);
        CHECK(max_grad_err([&] { return sum_all(region_mamba(tokens, p8)); },
                           {tokens, p8.region_mamba.W_in, p8.region_mamba.W_out}) < 1e-4);
    }
}

TEST_CASE("local mamba") {
    Rng rng(33);
    auto p = DcimParams<double>::init(3, 4, 4, 2, 4, rng);

    SECTION("zero parameters give the identity") {
        for (auto& v : p.local_mamba.W_out.vec()) v = 0.0;
        auto tokens = rand_tensor({4, 4, 4}, rng);
        auto y = local_mamba(tokens, p);
        CHECK(y.vec() == tokens.vec());
    }
    SECTION("regions are independent: permuting regions permutes outputs") {
        auto tokens = rand_tensor({5, 4, 4}, rng);
        auto y = local_mamba(tokens, p);
        std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
        auto yp = local_mamba(gather_rows(tokens, perm), p);
        auto y_perm = gather_rows(y, perm);
        CHECK(yp.vec() == y_perm.vec());
    }
    SECTION("zeroing one region's tokens changes only that region's output") {
        auto tokens = rand_tensor({4, 4, 4}, rng);
        auto y = local_mamba(tokens, p);
        auto tokens2 = tokens.clone();
        for (std::size_t j = 0; j < 4; ++j)
            for (std::size_t c = 0; c < 4; ++c) tokens2.at({2, j, c}) = 0.0;
        auto y2 = local_mamba(tokens2, p);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 4; ++j)
                for (std::size_t c = 0; c < 4; ++c) {
                    if (i == 2) continue;
                    CHECK(y.at({i, j, c}) == y2.at({i, j, c}));
                }
    }
    SECTION("gradient check at n=2, m=4, C=4") {
        auto tokens = rand_tensor({2, 4, 4}, rng, -1.0, 1.0);
        CHECK(max_grad_err([&] { return sum_all(local_mamba(tokens, p)); },
                           {tokens, p.local_mamba.W_in, p.local_mamba.W_out}) < 1e-4);
    }
}

TEST_CASE("fusion broadcast structure") {
    Rng rng(34);
    RegionGeometry g(8, 8, 4);
    auto p = DcimParams<double>::init(3, 4, 4, 4, 4, rng);

    SECTION("zero regional tokens leave the local tokens unchanged") {
        Tensor<double> regional({g.n(), 4});
        auto local = rand_tensor({g.n(), g.m(), 4}, rng);
        auto fused = dcim_fuse(regional, local, g, p);
        auto ref = region_merge(local, g);
        CHECK(fused.vec() == ref.vec());
    }
    SECTION("zero local tokens broadcast each regional vector over its region") {
        auto regional = rand_tensor({g.n(), 4}, rng);
        Tensor<double> local({g.n(), g.m(), 4});
        auto fused = dcim_fuse(regional, local, g, p);
        auto split = region_split(fused, g);
        for (std::size_t i = 0; i < g.n(); ++i)
            for (std::size_t j = 1; j < g.m(); ++j)
                for (std::size_t c = 0; c < 4; ++c)
                    CHECK(split.at({i, j, c}) == split.at({i, 0, c}));
    }
    SECTION("per-region mean of (fused - local) equals the bridged regional token") {
        auto regional = rand_tensor({g.n(), 4}, rng);
        auto local = rand_tensor({g.n(), g.m(), 4}, rng);
        auto fused = dcim_fuse(regional, local, g, p);
        auto bridged = matmul(regional, p.bridge_w);
        auto resid = region_split(sub(fused, region_merge(local, g)), g);
        for (std::size_t i = 0; i < g.n(); ++i)
            for (std::size_t c = 0; c < 4; ++c) {
                double mean = 0.0;
                for (std::size_t j = 0; j < g.m(); ++j) mean += resid.at({i, j, c});
                mean /= double(g.m());
                CHECK(mean == Catch::Approx(bridged.at({i, c})).margin(1e-12));
            }
    }
}

TEST_CASE("dcim tokenize geometry and errors") {
    Rng rng(35);
    auto p = DcimParams<double>::init(2, 4, 4, 4, 4, rng);
    RegionGeometry g(16, 16, 4);
    auto pet = rand_tensor({16, 16, 2}, rng);
    auto ct = rand_tensor({16, 16, 2}, rng);
    auto t = dcim_tokenize(pet, ct, g, p);
    CHECK(t.regional.shape() == Shape{16, 4});
    CHECK(t.local.shape() == Shape{16, 16, 4});
    CHECK_THROWS_AS(RegionGeometry(18, 16, 4), ContractError);
}

TEST_CASE("dcim forward") {
    Rng rng(36);

    SECTION("both blocks bypassed, identity stems, zero bridge: fused equals CT input") {
        auto p = DcimParams<double>::init(4, 4, 4, 2, 4, rng);
        make_local_stem_identity(p);
        for (auto& v : p.bridge_w.vec()) v = 0.0;
        RegionGeometry g(6, 6, 2);
        auto pet = rand_tensor({6, 6, 4}, rng);
        auto ct = rand_tensor({6, 6, 4}, rng);
        DcimTokens<double> t = dcim_tokenize(pet, ct, g, p);
        auto fused = dcim_fuse(t.regional, t.local, g, p);
        for (std::size_t i = 0; i < ct.numel(); ++i)
            CHECK(fused.data()[i] == Catch::Approx(ct.data()[i]).margin(1e-12));
    }
    SECTION("the six table variants map to distinct wirings") {
        auto wirings = {
            dcim_wiring(DcimVariant::RegionPetLocalPet), dcim_wiring(DcimVariant::RegionCtLocalCt),
            dcim_wiring(DcimVariant::RegionCtLocalPet), dcim_wiring(DcimVariant::LocalCtOnly),
            dcim_wiring(DcimVariant::RegionPetOnly), dcim_wiring(DcimVariant::Full)};
        std::vector<int> keys;
        for (auto w : wirings)
            keys.push_back(w.region_from_pet * 8 + w.local_from_ct * 4 + w.use_region_mamba * 2 +
                           w.use_local_mamba);
        std::sort(keys.begin(), keys.end());
        CHECK(std::unique(keys.begin(), keys.end()) == keys.end());
        auto full = dcim_wiring(DcimVariant::Full);
        CHECK(full.region_from_pet);
        CHECK(full.local_from_ct);
        CHECK(full.use_region_mamba);
        CHECK(full.use_local_mamba);
        CHECK_FALSE(dcim_wiring(DcimVariant::LocalCtOnly).use_region_mamba);
        CHECK_FALSE(dcim_wiring(DcimVariant::RegionPetOnly).use_local_mamba);
    }
    SECTION("variant outputs differ on random input") {
        auto p = DcimParams<double>::init(3, 3, 3, 2, 4, rng);
        RegionGeometry g(4, 4, 2);
        auto pet = rand_tensor({4, 4, 3}, rng);
        auto ct = rand_tensor({4, 4, 3}, rng);
        auto y_full = dcim_forward(pet, ct, g, p, DcimVariant::Full);
        auto y_swap = dcim_forward(pet, ct, g, p, DcimVariant::RegionCtLocalPet);
        double diff = 0.0;
        for (std::size_t i = 0; i < y_full.numel(); ++i)
            diff = std::max(diff, std::abs(y_full.data()[i] - y_swap.data()[i]));
        CHECK(diff > 1e-9);
    }
    SECTION("end-to-end gradient check at 8x8, r=4") {
        auto p = DcimParams<double>::init(3, 3, 3, 4, 4, rng);
        RegionGeometry g(8, 8, 4);
        auto pet = rand_tensor({8, 8, 3}, rng, -1.0, 1.0);
        auto ct = rand_tensor({8, 8, 3}, rng, -1.0, 1.0);
        auto build = [&] { return sum_all(dcim_forward(pet, ct, g, p)); };
        CHECK(max_grad_err(build, {pet, ct, p.bridge_w, p.region_w[0], p.local_w2,
                                   p.region_mamba.W_in, p.local_mamba.W_out}, 1e-4) < 1e-4);
    }
}
