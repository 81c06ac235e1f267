#pragma once

#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>

#include "cipa/checkpoint.hpp"
#include "cipa/data.hpp"
#include "cipa/finite_diff.hpp"
#include "cipa/metrics.hpp"
#include "cipa/net.hpp"
#include "cipa/optim.hpp"

namespace cipa::verify {

// ---------------------------------------------------------------------------
// Verification suites shared by `cipa verify` and the acceptance runner.
// Each suite returns pass/fail plus its worst observed error. The oracles
// here are deliberately independent routes: the LTI kernel, an all-pairs
// Hausdorff recomputation, finite differences, and direct set arithmetic.
// ---------------------------------------------------------------------------

struct SuiteResult {
    std::string name;
    bool pass = false;
    double max_err = 0.0;
    double seconds = 0.0;
    std::string detail;
};

namespace oracle {

// All-pairs boundary-distance HD95. Shares nothing with the EDT path: its
// own boundary extraction, pairwise distances, and the same percentile rule.
inline double hd95_bruteforce(const Tensor<float>& pred, const Tensor<float>& gt,
                              std::pair<double, double> spacing = {1.0, 1.0}) {
    const std::size_t H = pred.extent(0), W = pred.extent(1);
    auto boundary = [&](const Tensor<float>& m) {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                if (m.at({y, x}) == 0.0f) continue;
                bool b = y == 0 || y + 1 == H || x == 0 || x + 1 == W;
                if (!b && m.at({y - 1, x}) == 0.0f) b = true;
                if (!b && m.at({y + 1, x}) == 0.0f) b = true;
                if (!b && m.at({y, x - 1}) == 0.0f) b = true;
                if (!b && m.at({y, x + 1}) == 0.0f) b = true;
                if (b) out.emplace_back(y, x);
            }
        return out;
    };
    const auto bp = boundary(pred), bg = boundary(gt);
    if (bp.empty() && bg.empty()) return 0.0;
    if (bp.empty() || bg.empty()) return image_diagonal(H, W, spacing);
    auto directed = [&](const auto& from, const auto& to, std::vector<double>& pool) {
        for (const auto& [y, x] : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& [gy, gx] : to) {
                const double dy = (double(y) - double(gy)) * spacing.first;
                const double dx = (double(x) - double(gx)) * spacing.second;
                best = std::min(best, dy * dy + dx * dx);
            }
            pool.push_back(std::sqrt(best));
        }
    };
    std::vector<double> pool;
    directed(bp, bg, pool);
    directed(bg, bp, pool);
    std::sort(pool.begin(), pool.end());
    const double idx = 0.95 * double(pool.size() - 1);
    const std::size_t lo = std::size_t(idx);
    const std::size_t hi = std::min(lo + 1, pool.size() - 1);
    return pool[lo] * (1.0 - (idx - double(lo))) + pool[hi] * (idx - double(lo));
}

}  // namespace oracle

namespace detail {

template <typename F>
SuiteResult timed(const std::string& name, F&& body) {
    SuiteResult r;
    r.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        body(r);
    } catch (const std::exception& e) {
        r.pass = false;
        r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

inline Tensor<float> random_mask(std::size_t H, std::size_t W, Rng& rng, double p = 0.3) {
    Tensor<float> m({H, W});
    for (auto& v : m.vec()) v = rng.bernoulli(p) ? 1.0f : 0.0f;
    return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Suite 1: LTI equivalence. Frozen-parameter scans must equal causal
// convolution with the LTI kernel. Route (a) checks the recurrence
// semantics per channel; route (b) drives the production fused kernel with
// constant projections, which also catches injected scan faults.
// ---------------------------------------------------------------------------

inline SuiteResult suite_lti(std::size_t trials = 100, std::uint64_t seed = 101) {
    return detail::timed("lti_equivalence", [&](SuiteResult& r) {
        Rng rng(seed);
        double worst = 0.0;
        for (std::size_t trial = 0; trial < trials; ++trial) {
            const std::size_t D = 1 + rng.uniform_int(8);
            const std::size_t N = 1 + rng.uniform_int(8);
            const std::size_t L = 1 + rng.uniform_int(64);

            // (a) general per-channel frozen parameters
            Tensor<float> A_bar({D, N}), B_bar({D, N}), C({D, N}), skip({D});
            for (auto& v : A_bar.vec()) v = float(rng.uniform(0.05, 0.95));
            for (auto& v : B_bar.vec()) v = float(rng.uniform(-1.0, 1.0));
            for (auto& v : C.vec()) v = float(rng.uniform(-1.0, 1.0));
            for (auto& v : skip.vec()) v = float(rng.uniform(-1.0, 1.0));
            Tensor<float> x({L, D});
            for (auto& v : x.vec()) v = float(rng.uniform(-1.0, 1.0));

            Tensor<float> y_scan = scan_frozen(x, A_bar, B_bar, C, skip);
            Tensor<float> K = lti_kernel(A_bar, B_bar, C, L);
            Tensor<float> y_conv = causal_conv_with_kernel(x, K);
            for (std::size_t i = 0; i < y_scan.numel(); ++i) {
                const double skip_term = double(skip.data()[i % D]) * double(x.data()[i]);
                worst = std::max(worst, std::abs(double(y_scan.data()[i]) -
                                                 (double(y_conv.data()[i]) + skip_term)));
            }

            // (b) fused production kernel under constant projections
            Tensor<float> A({D, N});
            Tensor<float> b_row({N}), c_row({N});
            for (auto& v : A.vec()) v = float(std::log(rng.uniform(0.05, 0.95)));
            for (auto& v : b_row.vec()) v = float(rng.uniform(-1.0, 1.0));
            for (auto& v : c_row.vec()) v = float(rng.uniform(-1.0, 1.0));
            Tensor<float> delta({1, L, D}, 1.0f);
            Tensor<float> B({1, L, N}), Cc({1, L, N});
            for (std::size_t t = 0; t < L; ++t)
                for (std::size_t n = 0; n < N; ++n) {
                    B.data()[t * N + n] = b_row.data()[n];
                    Cc.data()[t * N + n] = c_row.data()[n];
                }
            Tensor<float> y_core = reshape(
                selective_scan_core(reshape(x, {1, L, D}), delta, A, B, Cc, skip), {L, D});
            Tensor<float> A_bar2({D, N}), B_bar2({D, N}), C2({D, N});
            for (std::size_t d = 0; d < D; ++d)
                for (std::size_t n = 0; n < N; ++n) {
                    const float a = A.data()[d * N + n];
                    A_bar2.data()[d * N + n] = std::exp(a);
                    B_bar2.data()[d * N + n] = scalar::zoh_phi(a) * b_row.data()[n];
                    C2.data()[d * N + n] = c_row.data()[n];
                }
            Tensor<float> K2 = lti_kernel(A_bar2, B_bar2, C2, L);
            Tensor<float> y_conv2 = causal_conv_with_kernel(x, K2);
            for (std::size_t i = 0; i < y_core.numel(); ++i) {
                const double skip_term = double(skip.data()[i % D]) * double(x.data()[i]);
                worst = std::max(worst, std::abs(double(y_core.data()[i]) -
                                                 (double(y_conv2.data()[i]) + skip_term)));
            }
        }
        r.max_err = worst;
        r.pass = worst <= 1e-4;
        r.detail = std::to_string(trials) + " frozen configurations";
    });
}

// ---------------------------------------------------------------------------
// Suite 2: gradient checks of every block against central finite
// differences, 64-bit shadow instantiation.
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor<double> randt(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.vec()) v = rng.uniform(lo, hi);
    return t;
}

// Reverse-mode vs central differences for scalar build(); leaves perturbed
// in place. Returns the worst normalized error.
inline double grad_err(const std::function<Tensor<double>()>& build,
                       std::vector<Tensor<double>> leaves, double eps = 1e-4) {
    for (auto& l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();
    }
    {
        OpGraph<double> g;
        Tensor<double> y = build();
        backward(g, y);
    }
    double worst = 0.0;
    for (auto& l : leaves) {
        Tensor<double> fd(l.shape());
        double* d = l.data();
        for (std::size_t i = 0; i < l.numel(); ++i) {
            const double saved = d[i];
            d[i] = saved + eps;
            const double fp = build().item();
            d[i] = saved - eps;
            const double fm = build().item();
            d[i] = saved;
            fd.data()[i] = (fp - fm) / (2.0 * eps);
        }
        worst = std::max(worst, grad_rel_error(l.grad(), fd));
    }
    return worst;
}

}  // namespace detail

inline SuiteResult suite_gradients(std::uint64_t seed = 202) {
    return detail::timed("gradient_checks", [&](SuiteResult& r) {
        Rng rng(seed);
        double worst = 0.0;
        auto track = [&](const char* what, double err) {
            if (err > worst) {
                worst = err;
                r.detail = std::string("worst block: ") + what;
            }
        };

        {  // core primitives (one representative composite)
            auto x = detail::randt({4, 6}, rng, -2.0, 2.0);
            auto w = detail::randt({6, 3}, rng, -1.0, 1.0);
            auto g = detail::randt({3}, rng, 0.5, 1.5);
            auto b = detail::randt({3}, rng);
            track("primitives", detail::grad_err([&] {
                return sum_all(mul(layernorm(silu(matmul(x, w)), g, b),
                                   sigmoid(matmul(x, w))));
            }, {x, w, g, b}, 1e-3));
        }
        {  // selective scan with every parameter group
            auto p = SSMParams<double>::init(3, 4, rng);
            auto x = detail::randt({6, 3}, rng);
            track("selective_scan", detail::grad_err(
                [&] { return sum_all(selective_scan(x, p)); },
                {x, p.A_log, p.W_B, p.W_C, p.w_delta, p.dt_bias, p.D_skip}));
        }
        {  // mamba block
            auto p = MambaBlockParams<double>::init(4, 4, rng);
            auto x = detail::randt({8, 4}, rng);
            track("mamba_block", detail::grad_err(
                [&] { return sum_all(mamba_block(x, p)); },
                {x, p.W_in, p.conv_w, p.conv_b, p.W_out}));
        }
        {  // ss2d
            auto p = Ss2dParams<double>::init(3, 4, rng);
            auto x = detail::randt({4, 4, 3}, rng);
            track("ss2d", detail::grad_err([&] { return sum_all(ss2d(x, p)); },
                                           {x, p.dirs[0].W_B, p.dirs[0].A_log}));
        }
        {  // vss block
            auto p = VssBlockParams<double>::init(4, 4, rng);
            auto x = detail::randt({8, 8, 4}, rng);
            track("vss_block", detail::grad_err([&] { return sum_all(vss_block(x, p)); },
                                                {x, p.W_in, p.W_out, p.mlp_w1}));
        }
        {  // cvss block
            auto p = CvssBlockParams<double>::init(4, 4, rng);
            auto x = detail::randt({8, 8, 4}, rng);
            track("cvss_block", detail::grad_err([&] { return sum_all(cvss_block(x, p)); },
                                                 {x, p.ca_w1, p.ca_b2}));
        }
        {  // crm
            auto p = CrmParams<double>::init(4, 8, 4, rng);
            auto pet = detail::randt({4, 4, 4}, rng);
            auto ct = detail::randt({4, 4, 4}, rng);
            track("crm_forward", detail::grad_err([&] {
                auto out = crm_forward(pet, ct, p);
                return sum_all(add(mul(out.pet_rec, out.pet_rec), mul(out.ct_rec, out.ct_rec)));
            }, {pet, ct, p.comp_w, p.head_w}));
        }
        {  // dcim
            auto p = DcimParams<double>::init(3, 3, 3, 4, 4, rng);
            RegionGeometry g(8, 8, 4);
            auto pet = detail::randt({8, 8, 3}, rng);
            auto ct = detail::randt({8, 8, 3}, rng);
            track("dcim_forward", detail::grad_err(
                [&] { return sum_all(dcim_forward(pet, ct, g, p)); },
                {pet, ct, p.bridge_w, p.region_mamba.W_in, p.local_mamba.W_out}));
        }
        {  // loss at 8x8
            auto logits = detail::randt({8, 8, 2}, rng, -2.0, 2.0);
            Tensor<double> mask({8, 8});
            for (auto& v : mask.vec()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
            track("loss", detail::grad_err(
                [&] { return segmentation_loss(logits, mask).total; }, {logits}));
        }
        r.max_err = worst;
        r.pass = worst <= 1e-4;
    });
}

// ---------------------------------------------------------------------------
// Suite 3: token geometry. Counting identity, split/merge bijection, and
// the fusion broadcast identity at machine precision (double).
// ---------------------------------------------------------------------------

inline SuiteResult suite_geometry(std::uint64_t seed = 303) {
    return detail::timed("token_geometry", [&](SuiteResult& r) {
        Rng rng(seed);
        double worst = 0.0;
        bool ok = true;
        for (std::size_t H : {8u, 16u, 32u})
            for (std::size_t W : {8u, 16u, 32u})
                for (std::size_t rr : {2u, 4u, 8u}) {
                    if (H % rr || W % rr) continue;
                    RegionGeometry g(H, W, rr);
                    ok = ok && g.n() * g.m() == H * W;

                    const std::size_t C = 3;
                    auto x = detail::randt({H, W, C}, rng);
                    auto back = region_merge(region_split(x, g), g);
                    ok = ok && back.vec() == x.vec();

                    // fusion broadcast identity
                    auto p = DcimParams<double>::init(C, C, C, rr, 4, rng);
                    for (auto& v : p.bridge_w.vec()) v = rng.uniform(-1.0, 1.0);
                    auto regional = detail::randt({g.n(), C}, rng);
                    auto local = detail::randt({g.n(), g.m(), C}, rng);
                    auto fused = dcim_fuse(regional, local, g, p);
                    auto bridged = matmul(regional, p.bridge_w);
                    auto resid = region_split(sub(fused, region_merge(local, g)), g);
                    for (std::size_t i = 0; i < g.n(); ++i)
                        for (std::size_t j = 0; j < g.m(); ++j)
                            for (std::size_t c = 0; c < C; ++c)
                                worst = std::max(worst,
                                                 std::abs(resid.at({i, j, c}) - bridged.at({i, c})));
                }
        r.max_err = worst;
        r.pass = ok && worst <= 1e-12;
        r.detail = "(H,W) in {8,16,32}^2, r in {2,4,8}";
    });
}

// ---------------------------------------------------------------------------
// Suite 4: metric oracles. Set-arithmetic recomputation for the counting
// metrics, all-pairs brute force for HD95, plus the pinned closed forms.
// ---------------------------------------------------------------------------

inline SuiteResult suite_metrics(std::size_t trials = 200, std::uint64_t seed = 404) {
    return detail::timed("metric_oracle", [&](SuiteResult& r) {
        Rng rng(seed);
        bool ok = true;
        double worst = 0.0;
        for (std::size_t trial = 0; trial < trials; ++trial) {
            auto pred = detail::random_mask(16, 16, rng, rng.uniform(0.05, 0.6));
            auto gt = detail::random_mask(16, 16, rng, rng.uniform(0.05, 0.6));
            ConfusionCounts c = confusion(pred, gt);

            // direct set arithmetic
            std::size_t inter = 0, uni = 0, same = 0, psz = 0, gsz = 0;
            for (std::size_t i = 0; i < pred.numel(); ++i) {
                const bool p = pred.data()[i] != 0.0f, g = gt.data()[i] != 0.0f;
                inter += p && g;
                uni += p || g;
                same += p == g;
                psz += p;
                gsz += g;
            }
            const double iou_ref = uni == 0 ? 1.0 : double(inter) / double(uni);
            const double f1_ref = psz + gsz == 0 ? 1.0 : 2.0 * double(inter) / double(psz + gsz);
            const double acc_ref = double(same) / double(pred.numel());
            ok = ok && iou(c) == iou_ref && f1(c) == f1_ref && accuracy(c) == acc_ref;
            if (c.tp + c.fp + c.fn > 0)
                worst = std::max(worst, std::abs(f1(c) - 2.0 * iou(c) / (1.0 + iou(c))));

            const double h_impl = hd95(pred, gt);
            const double h_ref = oracle::hd95_bruteforce(pred, gt);
            worst = std::max(worst, std::abs(h_impl - h_ref));
            worst = std::max(worst, std::abs(hd95(pred, gt) - hd95(gt, pred)));
            if (hausdorff_full(pred, gt) + 1e-12 < h_impl) ok = false;
        }
        // 3-4-5 single-pixel case
        Tensor<float> a({8, 8}), b({8, 8});
        a.at({0, 0}) = 1.0f;
        b.at({3, 4}) = 1.0f;
        ok = ok && hd95(a, b) == 5.0;
        ok = ok && hd95(Tensor<float>({8, 8}), Tensor<float>({8, 8})) == 0.0;
        ok = ok && hd95(a, Tensor<float>({8, 8})) == image_diagonal(8, 8);
        r.max_err = worst;
        r.pass = ok && worst <= 1e-9;
        r.detail = std::to_string(trials) + " random 16x16 mask pairs";
    });
}

// ---------------------------------------------------------------------------
// Suite 5: determinism. Two identical short trainings must agree bit-for-bit
// on every parameter, moment, and logged loss.
// ---------------------------------------------------------------------------

inline CipaConfig tiny_config() {
    CipaConfig cfg;
    cfg.resolution = 32;
    cfg.widths = {8, 16, 32, 64};
    cfg.depths = {1, 1, 1, 1};
    cfg.state_size = 4;
    cfg.crm_pool = 16;
    return cfg;
}

inline SuiteResult suite_determinism(std::uint64_t seed = 505) {
    return detail::timed("determinism", [&](SuiteResult& r) {
        SynthSpec spec;
        spec.seed = seed;
        spec.count = 4;
        spec.resolution = 32;
        spec.radius_min = 2.0;
        spec.radius_max = 6.0;
        std::vector<TrainItem<float>> items;
        for (std::size_t i = 0; i < spec.count; ++i) {
            SynthSample s = synth_sample(spec, i);
            items.push_back({s.pair.pet, s.pair.ct, s.pair.mask, s.pair.id});
        }
        auto run = [&] {
            CipaConfig cfg = tiny_config();
            CipaNet<float> net = CipaNet<float>::init(cfg, seed);
            net.set_requires_grad(true);
            AdamWState<float> st = AdamWState<float>::init(net);
            OptimConfig oc;
            oc.lr = 1e-3f;
            oc.total_steps = 6;
            std::vector<double> losses;
            for (std::size_t step = 0; step < oc.total_steps; ++step) {
                std::vector<TrainItem<float>> batch = {items[step % items.size()],
                                                       items[(step + 1) % items.size()]};
                losses.push_back(train_step(net, batch, st, oc).loss);
            }
            std::vector<float> params;
            net.visit_params([&](const std::string&, Tensor<float>& t) {
                params.insert(params.end(), t.vec().begin(), t.vec().end());
            });
            return std::make_pair(losses, params);
        };
        auto [l1, p1] = run();
        auto [l2, p2] = run();
        const bool same_loss = l1 == l2;
        const bool same_params =
            p1.size() == p2.size() &&
            std::memcmp(p1.data(), p2.data(), p1.size() * sizeof(float)) == 0;
        r.pass = same_loss && same_params;
        r.max_err = same_loss && same_params ? 0.0 : 1.0;
        r.detail = "two 6-step trainings, bitwise parameter and loss comparison";
    });
}

inline std::vector<SuiteResult> run_all_suites() {
    return {suite_lti(), suite_gradients(), suite_geometry(), suite_metrics(),
            suite_determinism()};
}

}  // namespace cipa::verify
