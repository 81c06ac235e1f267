#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "cipa/errors.hpp"
#include "cipa/tensor.hpp"

namespace cipa {

// ---------------------------------------------------------------------------
// Segmentation metrics: pixel confusion counts, IoU/F1/accuracy with the
// empty-mask convention, and the 95th-percentile symmetric Hausdorff
// distance over boundary pixels.
// ---------------------------------------------------------------------------

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::size_t total() const { return tp + fp + fn + tn; }
};

template <typename T>
inline void require_binary(const Tensor<T>& t, const char* who) {
    for (const T& v : t.vec())
        if (v != T(0) && v != T(1))
            throw ContractError(std::string(who) + ": mask values must be binary {0,1}");
}

template <typename T>
ConfusionCounts confusion(const Tensor<T>& pred, const Tensor<T>& gt) {
    if (pred.shape() != gt.shape())
        throw ShapeError("confusion: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(gt.shape()));
    require_binary(pred, "confusion");
    require_binary(gt, "confusion");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const bool p = pred.data()[i] != T(0), g = gt.data()[i] != T(0);
        if (p && g) ++c.tp;
        else if (p && !g) ++c.fp;
        else if (!p && g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

// Both masks empty is a perfect match by convention.
inline double iou(const ConfusionCounts& c) {
    const std::size_t den = c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : double(c.tp) / double(den);
}

inline double f1(const ConfusionCounts& c) {
    const std::size_t den = 2 * c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : 2.0 * double(c.tp) / double(den);
}

inline double accuracy(const ConfusionCounts& c) {
    return c.total() == 0 ? 1.0 : double(c.tp + c.tn) / double(c.total());
}

// ---------------------------------------------------------------------------
// HD95. Boundary pixels: foreground with a 4-neighbor background or touching
// the image edge. Directed surface distances are pooled from both directions
// and reduced with a linearly interpolated 95th percentile. Conventions:
// both masks empty -> 0; exactly one empty -> the image diagonal.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
std::vector<std::size_t> boundary_pixels(const Tensor<T>& mask) {
    const std::size_t H = mask.extent(0), W = mask.extent(1);
    std::vector<std::size_t> out;
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            if (mask.data()[y * W + x] == T(0)) continue;
            const bool edge = y == 0 || y + 1 == H || x == 0 || x + 1 == W;
            const bool bg_nbr =
                (y > 0 && mask.data()[(y - 1) * W + x] == T(0)) ||
                (y + 1 < H && mask.data()[(y + 1) * W + x] == T(0)) ||
                (x > 0 && mask.data()[y * W + x - 1] == T(0)) ||
                (x + 1 < W && mask.data()[y * W + x + 1] == T(0));
            if (edge || bg_nbr) out.push_back(y * W + x);
        }
    return out;
}

// 1D squared-distance transform (lower envelope of parabolas), weight w on
// the squared index difference. +inf entries carry no parabola.
inline void dt1d(const std::vector<double>& f, double w, std::vector<double>& d) {
    const std::size_t n = f.size();
    const double inf = std::numeric_limits<double>::infinity();
    d.assign(n, inf);
    int q0 = -1;
    for (std::size_t i = 0; i < n; ++i)
        if (std::isfinite(f[i])) {
            q0 = int(i);
            break;
        }
    if (q0 < 0) return;  // no sources reach this line
    std::vector<int> v(n, 0);
    std::vector<double> z(n + 1, 0.0);
    int k = 0;
    v[0] = q0;
    z[0] = -inf;
    z[1] = inf;
    auto sect = [&](int p, int q) {
        return ((f[q] + w * double(q) * double(q)) - (f[p] + w * double(p) * double(p))) /
               (2.0 * w * double(q - p));
    };
    for (int q = q0 + 1; q < int(n); ++q) {
        if (!std::isfinite(f[q])) continue;
        double s = sect(v[k], q);
        while (k > 0 && s <= z[k]) {
            --k;
            s = sect(v[k], q);
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    k = 0;
    for (int q = 0; q < int(n); ++q) {
        while (z[k + 1] < double(q)) ++k;
        const double dq = double(q) - double(v[k]);
        d[q] = w * dq * dq + f[v[k]];
    }
}

// Exact anisotropic squared EDT to the given source pixels.
inline std::vector<double> edt_sq(const std::vector<std::size_t>& sources, std::size_t H,
                                  std::size_t W, double sy, double sx) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> grid(H * W, inf);
    for (std::size_t s : sources) grid[s] = 0.0;
    std::vector<double> col(H), out(H), row(W), rout(W);
    // vertical pass (weight sy^2)
    for (std::size_t x = 0; x < W; ++x) {
        bool any = false;
        for (std::size_t y = 0; y < H; ++y) {
            col[y] = grid[y * W + x];
            any = any || col[y] == 0.0;
        }
        if (!any) continue;
        dt1d(col, sy * sy, out);
        for (std::size_t y = 0; y < H; ++y) grid[y * W + x] = out[y];
    }
    // horizontal pass (weight sx^2)
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) row[x] = grid[y * W + x];
        dt1d(row, sx * sx, rout);
        for (std::size_t x = 0; x < W; ++x) grid[y * W + x] = rout[x];
    }
    return grid;
}

// Linear interpolation between order statistics of a sorted sample.
inline double percentile_sorted(std::vector<double>& v, double q) {
    std::sort(v.begin(), v.end());
    if (v.empty()) return 0.0;
    const double idx = q * double(v.size() - 1);
    const std::size_t lo = std::size_t(idx);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = idx - double(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

}  // namespace detail

inline double image_diagonal(std::size_t H, std::size_t W,
                             std::pair<double, double> spacing = {1.0, 1.0}) {
    const double dy = double(H) * spacing.first, dx = double(W) * spacing.second;
    return std::sqrt(dy * dy + dx * dx);
}

// Pooled directed boundary distances; also used for the full (100th
// percentile) Hausdorff distance.
template <typename T>
std::vector<double> surface_distances(const Tensor<T>& pred, const Tensor<T>& gt,
                                      std::pair<double, double> spacing = {1.0, 1.0}) {
    if (pred.shape() != gt.shape() || pred.rank() != 2)
        throw ShapeError("hd95: expected matching [H,W] masks");
    require_binary(pred, "hd95");
    require_binary(gt, "hd95");
    const std::size_t H = pred.extent(0), W = pred.extent(1);
    const auto bp = detail::boundary_pixels(pred);
    const auto bg = detail::boundary_pixels(gt);
    std::vector<double> pooled;
    if (bp.empty() || bg.empty()) return pooled;
    const auto d_to_g = detail::edt_sq(bg, H, W, spacing.first, spacing.second);
    const auto d_to_p = detail::edt_sq(bp, H, W, spacing.first, spacing.second);
    pooled.reserve(bp.size() + bg.size());
    for (std::size_t s : bp) pooled.push_back(std::sqrt(d_to_g[s]));
    for (std::size_t s : bg) pooled.push_back(std::sqrt(d_to_p[s]));
    return pooled;
}

template <typename T>
double hd95(const Tensor<T>& pred, const Tensor<T>& gt,
            std::pair<double, double> spacing = {1.0, 1.0}) {
    bool pe = true, ge = true;
    for (const T& v : pred.vec()) pe = pe && v == T(0);
    for (const T& v : gt.vec()) ge = ge && v == T(0);
    if (pe && ge) return 0.0;
    if (pe != ge) return image_diagonal(pred.extent(0), pred.extent(1), spacing);
    std::vector<double> pooled = surface_distances(pred, gt, spacing);
    return detail::percentile_sorted(pooled, 0.95);
}

template <typename T>
double hausdorff_full(const Tensor<T>& pred, const Tensor<T>& gt,
                      std::pair<double, double> spacing = {1.0, 1.0}) {
    std::vector<double> pooled = surface_distances(pred, gt, spacing);
    if (pooled.empty()) return 0.0;
    return *std::max_element(pooled.begin(), pooled.end());
}

// ---------------------------------------------------------------------------
// Dataset-level report: per-image metrics plus means, rows ordered by id.
// ---------------------------------------------------------------------------

struct ImageMetrics {
    std::string id;
    double iou = 0, f1 = 0, acc = 0, hd95 = 0;
};

struct MetricsReport {
    std::vector<ImageMetrics> per_image;
    ImageMetrics mean;  // id empty
    std::size_t count = 0;

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : per_image)
            rows.push_back({{"id", r.id}, {"iou", r.iou}, {"f1", r.f1}, {"acc", r.acc},
                            {"hd95", r.hd95}});
        return nlohmann::json{{"per_image", rows},
                              {"mean", {{"iou", mean.iou}, {"f1", mean.f1}, {"acc", mean.acc},
                                        {"hd95", mean.hd95}}},
                              {"count", count}};
    }
};

struct EvalItem {
    std::string id;
    Tensor<float> pred, gt;
    std::pair<double, double> spacing = {1.0, 1.0};
};

inline MetricsReport evaluate_dataset(std::vector<EvalItem> items) {
    std::sort(items.begin(), items.end(),
              [](const EvalItem& a, const EvalItem& b) { return a.id < b.id; });
    MetricsReport rep;
    rep.count = items.size();
    for (const auto& item : items) {
        if (item.pred.shape() != item.gt.shape())
            throw ShapeError("evaluate_dataset: pred/gt shape mismatch for id " + item.id);
        ConfusionCounts c = confusion(item.pred, item.gt);
        ImageMetrics m;
        m.id = item.id;
        m.iou = iou(c);
        m.f1 = f1(c);
        m.acc = accuracy(c);
        m.hd95 = hd95(item.pred, item.gt, item.spacing);
        rep.per_image.push_back(m);
        rep.mean.iou += m.iou;
        rep.mean.f1 += m.f1;
        rep.mean.acc += m.acc;
        rep.mean.hd95 += m.hd95;
    }
    if (rep.count) {
        rep.mean.iou /= double(rep.count);
        rep.mean.f1 /= double(rep.count);
        rep.mean.acc /= double(rep.count);
        rep.mean.hd95 /= double(rep.count);
    }
    return rep;
}

}  // namespace cipa
