#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cipa/errors.hpp"
#include "cipa/ops.hpp"
#include "cipa/rng.hpp"
#include "cipa/tensor.hpp"

namespace cipa {

// ---------------------------------------------------------------------------
// Co-registered PET/CT planes plus optional ground truth.
// ---------------------------------------------------------------------------

struct ModalityPair {
    Tensor<float> pet, ct;  // [H,W], values in [0,255] after preprocessing
    Tensor<float> mask;     // [H,W] binary, optional
    std::pair<double, double> spacing = {1.0, 1.0};  // row/col mm per pixel
    std::string id;
};

// ---------------------------------------------------------------------------
// Preprocessing: lung-window HU clip for CT, per-slice min-max for PET.
// ---------------------------------------------------------------------------

inline constexpr double kHuLo = -1200.0;
inline constexpr double kHuHi = -200.0;

template <typename T>
Tensor<T> preprocess_ct(const Tensor<T>& raw_hu) {
    Tensor<T> out(raw_hu.shape());
    for (std::size_t i = 0; i < raw_hu.numel(); ++i) {
        double v = double(raw_hu.data()[i]);
        if (!std::isfinite(v)) throw ContractError("preprocess_ct: non-finite HU value");
        v = std::clamp(v, kHuLo, kHuHi);
        out.data()[i] = T((v - kHuLo) / (kHuHi - kHuLo) * 255.0);
    }
    return out;
}

// Inputs are assumed SUV-valued already; a constant slice maps to all zeros.
template <typename T>
Tensor<T> preprocess_pet(const Tensor<T>& raw_suv) {
    double lo = 1e300, hi = -1e300;
    for (std::size_t i = 0; i < raw_suv.numel(); ++i) {
        const double v = double(raw_suv.data()[i]);
        if (!(v >= 0.0)) throw ContractError("preprocess_pet: SUV values must be >= 0");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    Tensor<T> out(raw_suv.shape());
    if (hi <= lo) return out;  // degenerate constant slice
    for (std::size_t i = 0; i < raw_suv.numel(); ++i)
        out.data()[i] = T((double(raw_suv.data()[i]) - lo) / (hi - lo) * 255.0);
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation: random horizontal/vertical flip, then a random square crop
// with side in [0.7, 0.9] of the original, resized back (bilinear images,
// nearest mask). One transform applied to all three planes.
// ---------------------------------------------------------------------------

inline constexpr double kCropLo = 0.7;
inline constexpr double kCropHi = 0.9;

// The randomized transform, drawn separately so its bounds are checkable.
struct AugmentPlan {
    bool hflip = false, vflip = false;
    std::size_t side = 0, oy = 0, ox = 0;

    static AugmentPlan draw(std::size_t H, std::size_t W, Rng& rng) {
        AugmentPlan p;
        p.hflip = rng.bernoulli(0.5);
        p.vflip = rng.bernoulli(0.5);
        const double frac = rng.uniform(kCropLo, kCropHi);
        const std::size_t lo = std::size_t(std::ceil(kCropLo * double(H)));
        const std::size_t hi = std::size_t(std::floor(kCropHi * double(H)));
        p.side = std::clamp<std::size_t>(std::size_t(std::lround(frac * double(H))), lo, hi);
        p.oy = rng.uniform_int(H - p.side + 1);
        p.ox = rng.uniform_int(W - p.side + 1);
        return p;
    }
};

inline ModalityPair augment(const ModalityPair& pair, Rng& rng) {
    if (!pair.mask.defined()) throw ContractError("augment: pair has no mask");
    const std::size_t H = pair.pet.extent(0), W = pair.pet.extent(1);
    Tensor<float> pet = pair.pet, ct = pair.ct, mask = pair.mask;

    const AugmentPlan plan = AugmentPlan::draw(H, W, rng);
    if (plan.hflip) {
        pet = flip(pet, 1);
        ct = flip(ct, 1);
        mask = flip(mask, 1);
    }
    if (plan.vflip) {
        pet = flip(pet, 0);
        ct = flip(ct, 0);
        mask = flip(mask, 0);
    }

    auto crop2d = [&](const Tensor<float>& t) {
        return slice(slice(t, 0, plan.oy, plan.side), 1, plan.ox, plan.side);
    };
    auto as_map = [](const Tensor<float>& t) {
        return reshape(t, {t.extent(0), t.extent(1), 1});
    };
    ModalityPair out;
    out.pet = reshape(resize_bilinear(as_map(crop2d(pet)), H, W), {H, W});
    out.ct = reshape(resize_bilinear(as_map(crop2d(ct)), H, W), {H, W});
    out.mask = reshape(resize_nearest(as_map(crop2d(mask)), H, W), {H, W});
    out.spacing = pair.spacing;
    out.id = pair.id;
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic PET-CT tumor generator. Each sample is a pure function of
// (seed, index): a textured lung-window CT with denser tumor blobs, a
// blurred PET field with high-contrast uptake stamped exactly over the
// tumor supports, and the union of supports as ground truth. Sizes skew
// small.
// ---------------------------------------------------------------------------

struct SynthSpec {
    std::uint64_t seed = 42;
    std::size_t count = 40;
    std::size_t resolution = 64;
    std::size_t tumors_min = 1, tumors_max = 2;
    double radius_min = 4.0, radius_max = 12.0;  // px
    double pet_contrast_min = 2.0, pet_contrast_max = 4.0;
    double ct_texture = 60.0;   // HU amplitude of the low-frequency field
    double pet_noise = 0.05;    // SUV sigma
    double ct_noise = 4.0;      // HU sigma
    double irregularity = 0.25; // total boundary harmonic amplitude
    double train_fraction = 0.8;

    void validate() const {
        if (count < 1) throw ContractError("synth: count must be >= 1");
        if (resolution < 32) throw ContractError("synth: resolution must be >= 32");
        if (tumors_min < 1 || tumors_max < tumors_min)
            throw ContractError("synth: bad tumor count range");
        if (radius_min < 2.0 || radius_max < radius_min)
            throw ContractError("synth: bad radius range (min 2 px)");
        if (pet_contrast_min < 1.5 || pet_contrast_max < pet_contrast_min)
            throw ContractError("synth: PET contrast must keep blobs above background");
        if (irregularity < 0.0 || irregularity > 0.5)
            throw ContractError("synth: irregularity must lie in [0, 0.5]");
        if (train_fraction <= 0.0 || train_fraction >= 1.0)
            throw ContractError("synth: train fraction must lie in (0,1)");
        const double max_extent = radius_max * (1.0 + irregularity) + 1.0;
        if (2.0 * max_extent + 4.0 > double(resolution))
            throw ContractError("synth: radius range too large for the resolution");
    }

    // Conservative per-sample bounds on the mask pixel count implied by the
    // radius range (used as a generator property check).
    std::pair<std::size_t, std::size_t> mask_count_bounds() const {
        const double r_lo = std::max(1.0, radius_min * (1.0 - irregularity) - 1.0);
        const double r_hi = radius_max * (1.0 + irregularity) + 1.0;
        const double pi = 3.14159265358979323846;
        std::size_t lo = std::size_t(std::floor(pi * r_lo * r_lo * 0.75));
        std::size_t hi = std::size_t(std::ceil(double(tumors_max) * pi * r_hi * r_hi * 1.25));
        return {std::max<std::size_t>(lo, 1), hi};
    }
};

struct SynthSample {
    ModalityPair pair;
    Tensor<float> pet_clean;  // pre-noise SUV field; thresholds exactly to the mask
};

namespace detail {

// Low-frequency field: coarse normal grid bilinearly upsampled.
inline Tensor<float> lowfreq_field(std::size_t H, std::size_t W, double sigma, Rng& rng,
                                   std::size_t grid = 8) {
    Tensor<float> coarse({grid, grid, 1});
    for (auto& v : coarse.vec()) v = float(rng.normal(0.0, sigma));
    return reshape(resize_bilinear(coarse, H, W), {H, W});
}

struct TumorBlob {
    double cy, cx, radius;
    double amp[3], phase[3];  // harmonics k = 2,3,4

    bool contains(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double d = std::sqrt(dy * dy + dx * dx);
        const double theta = std::atan2(dy, dx);
        double r = radius;
        for (int k = 0; k < 3; ++k) r += radius * amp[k] * std::cos(double(k + 2) * theta + phase[k]);
        return d <= r;
    }
};

struct Ellipse {
    double cy, cx, ry, rx;
    bool contains(double y, double x) const {
        const double a = (y - cy) / ry, b = (x - cx) / rx;
        return a * a + b * b <= 1.0;
    }
};

}  // namespace detail

// Deterministic sample generation; bit-identical for equal (seed, index).
inline SynthSample synth_sample(const SynthSpec& spec, std::size_t index) {
    spec.validate();
    Rng rng = Rng(spec.seed).fork(0x5359'4e54ull).fork(index);
    const std::size_t H = spec.resolution, W = spec.resolution;

    // lung fields
    detail::Ellipse lungs[2] = {
        {double(H) * 0.5 + rng.uniform(-2, 2), double(W) * 0.30 + rng.uniform(-2, 2),
         double(H) * 0.34, double(W) * 0.20},
        {double(H) * 0.5 + rng.uniform(-2, 2), double(W) * 0.70 + rng.uniform(-2, 2),
         double(H) * 0.34, double(W) * 0.20},
    };

    // tumors, sizes skewed small via u^2
    const std::size_t n_tumors = rng.uniform_int(spec.tumors_min, spec.tumors_max);
    std::vector<detail::TumorBlob> tumors;
    for (std::size_t t = 0; t < n_tumors; ++t) {
        detail::TumorBlob blob{};
        const double u = rng.uniform();
        blob.radius = spec.radius_min + (spec.radius_max - spec.radius_min) * u * u;
        for (int k = 0; k < 3; ++k) {
            blob.amp[k] = rng.uniform(-spec.irregularity / 3.0, spec.irregularity / 3.0);
            blob.phase[k] = rng.uniform(0.0, 6.283185307179586);
        }
        const double margin = blob.radius * (1.0 + spec.irregularity) + 1.0;
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            const double cy = rng.uniform(margin, double(H) - 1.0 - margin);
            const double cx = rng.uniform(margin, double(W) - 1.0 - margin);
            if (lungs[0].contains(cy, cx) || lungs[1].contains(cy, cx)) {
                blob.cy = cy;
                blob.cx = cx;
                placed = true;
            }
        }
        if (!placed) {  // clamp to the nearer lung center
            const auto& lung = lungs[t % 2];
            blob.cy = std::clamp(lung.cy, margin, double(H) - 1.0 - margin);
            blob.cx = std::clamp(lung.cx, margin, double(W) - 1.0 - margin);
        }
        tumors.push_back(blob);
    }

    // CT in raw HU, then windowed
    Tensor<float> ct_hu = detail::lowfreq_field(H, W, spec.ct_texture, rng);
    Tensor<float> mask({H, W});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double hu = -1050.0 + double(ct_hu.at({y, x}));
            if (lungs[0].contains(double(y), double(x)) ||
                lungs[1].contains(double(y), double(x)))
                hu += 150.0;
            bool in_tumor = false;
            for (const auto& b : tumors) in_tumor = in_tumor || b.contains(double(y), double(x));
            if (in_tumor) {
                hu += 350.0;
                mask.at({y, x}) = 1.0f;
            }
            hu += rng.normal(0.0, spec.ct_noise);
            ct_hu.at({y, x}) = float(hu);
        }

    // PET: blurred background in [0.05, 0.95], blobs stamped exactly on the
    // supports; thresholding the clean field at 1.5 recovers the mask.
    Tensor<float> bg = detail::lowfreq_field(H, W, 0.15, rng);
    Tensor<float> pet_clean({H, W});
    const double contrast = rng.uniform(spec.pet_contrast_min, spec.pet_contrast_max);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double v = std::clamp(0.5 + double(bg.at({y, x})), 0.05, 0.95);
            if (mask.at({y, x}) > 0.5f) v += contrast;
            pet_clean.at({y, x}) = float(v);
        }
    Tensor<float> pet_raw({H, W});
    for (std::size_t i = 0; i < pet_raw.numel(); ++i)
        pet_raw.data()[i] =
            float(std::max(0.0, double(pet_clean.data()[i]) + rng.normal(0.0, spec.pet_noise)));

    SynthSample s;
    s.pair.ct = preprocess_ct(ct_hu);
    s.pair.pet = preprocess_pet(pet_raw);
    s.pair.mask = mask;
    s.pair.spacing = {1.0, 1.0};
    char buf[16];
    std::snprintf(buf, sizeof buf, "s%06zu", index);
    s.pair.id = buf;
    s.pet_clean = pet_clean;
    return s;
}

inline float synth_clean_threshold() { return 1.5f; }

// ---------------------------------------------------------------------------
// Shard layout: <root>/<split>/<id>.{pet,ct,mask}.tsr + <root>/manifest.json.
// ---------------------------------------------------------------------------

struct Manifest {
    int schema_version = 1;
    std::size_t resolution = 0;
    std::pair<double, double> spacing = {1.0, 1.0};
    std::map<std::string, std::vector<std::string>> splits;
    nlohmann::json generator;  // spec echo

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["schema_version"] = schema_version;
        j["resolution"] = resolution;
        j["spacing"] = {spacing.first, spacing.second};
        j["splits"] = splits;
        j["generator"] = generator;
        return j;
    }

    static Manifest from_json(const nlohmann::json& j) {
        Manifest m;
        m.schema_version = j.at("schema_version").get<int>();
        m.resolution = j.at("resolution").get<std::size_t>();
        auto sp = j.at("spacing");
        m.spacing = {sp.at(0).get<double>(), sp.at(1).get<double>()};
        m.splits = j.at("splits").get<std::map<std::string, std::vector<std::string>>>();
        m.generator = j.value("generator", nlohmann::json::object());
        return m;
    }

    void validate() const {
        std::set<std::string> seen;
        for (const auto& [split, ids] : splits)
            for (const auto& id : ids)
                if (!seen.insert(id).second)
                    throw ContractError("manifest: id '" + id + "' appears in two splits");
    }
};

inline nlohmann::json synth_spec_to_json(const SynthSpec& s) {
    nlohmann::json j;
    j["seed"] = s.seed;
    j["count"] = s.count;
    j["resolution"] = s.resolution;
    j["tumors_min"] = s.tumors_min;
    j["tumors_max"] = s.tumors_max;
    j["radius_min"] = s.radius_min;
    j["radius_max"] = s.radius_max;
    j["pet_contrast_min"] = s.pet_contrast_min;
    j["pet_contrast_max"] = s.pet_contrast_max;
    j["ct_texture"] = s.ct_texture;
    j["pet_noise"] = s.pet_noise;
    j["ct_noise"] = s.ct_noise;
    j["irregularity"] = s.irregularity;
    j["train_fraction"] = s.train_fraction;
    return j;
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
    SynthSpec s;
    s.seed = j.value("seed", s.seed);
    s.count = j.value("count", s.count);
    s.resolution = j.value("resolution", s.resolution);
    s.tumors_min = j.value("tumors_min", s.tumors_min);
    s.tumors_max = j.value("tumors_max", s.tumors_max);
    s.radius_min = j.value("radius_min", s.radius_min);
    s.radius_max = j.value("radius_max", s.radius_max);
    s.pet_contrast_min = j.value("pet_contrast_min", s.pet_contrast_min);
    s.pet_contrast_max = j.value("pet_contrast_max", s.pet_contrast_max);
    s.ct_texture = j.value("ct_texture", s.ct_texture);
    s.pet_noise = j.value("pet_noise", s.pet_noise);
    s.ct_noise = j.value("ct_noise", s.ct_noise);
    s.irregularity = j.value("irregularity", s.irregularity);
    s.train_fraction = j.value("train_fraction", s.train_fraction);
    return s;
}

// Generates the dataset and writes both splits. Samples 0..k-1 go to train,
// the rest to test (split at the generator-stream level).
inline Manifest write_synth_shards(const SynthSpec& spec, const std::filesystem::path& root) {
    spec.validate();
    Manifest m;
    m.resolution = spec.resolution;
    m.generator = synth_spec_to_json(spec);
    const std::size_t n_train = std::max<std::size_t>(
        1, std::min(spec.count - 1, std::size_t(std::lround(double(spec.count) * spec.train_fraction))));
    for (std::size_t i = 0; i < spec.count; ++i) {
        const std::string split = i < n_train ? "train" : "test";
        SynthSample s = synth_sample(spec, i);
        const std::filesystem::path dir = root / split;
        std::filesystem::create_directories(dir);
        save_tsr(dir / (s.pair.id + ".pet.tsr"), s.pair.pet);
        save_tsr(dir / (s.pair.id + ".ct.tsr"), s.pair.ct);
        save_tsr(dir / (s.pair.id + ".mask.tsr"), s.pair.mask);
        m.splits[split].push_back(s.pair.id);
    }
    std::ofstream os(root / "manifest.json");
    if (!os) throw IoError("write_synth_shards: cannot write manifest");
    os << m.to_json().dump(2) << "\n";
    return m;
}

inline Manifest load_manifest(const std::filesystem::path& root) {
    std::ifstream is(root / "manifest.json");
    if (!is) throw IoError("load_manifest: cannot open " + (root / "manifest.json").string());
    nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded()) throw IoError("load_manifest: unparseable manifest");
    Manifest m = Manifest::from_json(j);
    m.validate();
    return m;
}

inline std::vector<ModalityPair> read_shard(const std::filesystem::path& root,
                                            const std::string& split) {
    Manifest m = load_manifest(root);
    auto it = m.splits.find(split);
    if (it == m.splits.end())
        throw IoError("read_shard: split '" + split + "' not in manifest");
    std::vector<ModalityPair> out;
    for (const std::string& id : it->second) {
        ModalityPair pair;
        pair.id = id;
        pair.spacing = m.spacing;
        for (const char* kind : {"pet", "ct", "mask"}) {
            const std::filesystem::path file = root / split / (id + "." + kind + ".tsr");
            if (!std::filesystem::exists(file))
                throw IoError("read_shard: manifest lists missing file " + file.string());
            Tensor<float> t = load_tsr<float>(file);
            if (t.rank() != 2 || t.extent(0) != m.resolution || t.extent(1) != m.resolution)
                throw IoError("read_shard: bad tensor shape in " + file.string());
            if (std::string(kind) == "pet") pair.pet = t;
            else if (std::string(kind) == "ct") pair.ct = t;
            else pair.mask = t;
        }
        for (float v : pair.mask.vec())
            if (v != 0.0f && v != 1.0f)
                throw IoError("read_shard: non-binary mask for id " + id);
        out.push_back(std::move(pair));
    }
    return out;
}

}  // namespace cipa
