// Acceptance runner: executes every acceptance criterion at its pinned
// tolerance and prints one pass/fail line per criterion. Non-zero exit on
// any failure. Criterion numbers can be passed as arguments to run a
// subset (e.g. ./cipa_acceptance 1 3 5).

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cipa/harness.hpp"
#include "cipa/verify.hpp"

using namespace cipa;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::string read_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

fs::path scratch_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("cipa_acceptance_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// --- criterion 1: LTI oracle -----------------------------------------------

Outcome criterion_lti() {
    const double t0 = now_s();
    auto r = verify::suite_lti(100);
    const double dt = now_s() - t0;
    char buf[160];
    std::snprintf(buf, sizeof buf, "max abs err %.3g (tol 1e-4), %.1fs (budget 10s)", r.max_err,
                  dt);
    return {r.pass && dt < 10.0, buf};
}

// --- criterion 2: gradient suite -------------------------------------------

Outcome criterion_gradients() {
    const double t0 = now_s();
    auto r = verify::suite_gradients();
    const double dt = now_s() - t0;
    char buf[160];
    std::snprintf(buf, sizeof buf, "max rel err %.3g (tol 1e-4), %s, %.1fs (budget 180s)",
                  r.max_err, r.detail.c_str(), dt);
    return {r.pass && dt < 180.0, buf};
}

// --- criterion 3: geometry suite --------------------------------------------

Outcome criterion_geometry() {
    auto r = verify::suite_geometry();
    char buf[160];
    std::snprintf(buf, sizeof buf, "broadcast identity max err %.3g (machine precision)",
                  r.max_err);
    return {r.pass, buf};
}

// --- criterion 4: CRM suite --------------------------------------------------

Outcome criterion_crm() {
    Rng rng(814);
    auto params = CrmParams<float>::init(4, 16, 8, rng);
    bool ok = true;
    for (int trial = 0; trial < 1000 && ok; ++trial) {
        Tensor<float> pet({6, 6, 4}), ct({6, 6, 4});
        for (auto& v : pet.vec()) v = float(rng.uniform(-3.0, 3.0));
        for (auto& v : ct.vec()) v = float(rng.uniform(-3.0, 3.0));
        auto out = crm_forward(pet, ct, params);
        for (float w : out.weights.vec()) ok = ok && w > 0.0f && w < 1.0f;
        for (std::size_t i = 0; i < pet.numel() && ok; ++i) {
            ok = ok && std::abs(out.pet_rec.data()[i]) <= std::abs(pet.data()[i]);
            ok = ok && std::abs(out.ct_rec.data()[i]) <= std::abs(ct.data()[i]);
        }
    }
    Tensor<float> zero({6, 6, 4});
    Tensor<float> other({6, 6, 4});
    for (auto& v : other.vec()) v = float(rng.uniform(-3.0, 3.0));
    auto out = crm_forward(zero, other, params);
    for (float v : out.pet_rec.vec()) ok = ok && v == 0.0f;
    return {ok, "1000 random inputs: weights in (0,1), |out| <= |in|, zero stays zero"};
}

// --- criterion 5: metrics oracle ---------------------------------------------

Outcome criterion_metrics() {
    auto r = verify::suite_metrics(200);
    char buf[160];
    std::snprintf(buf, sizeof buf, "200 pairs, worst oracle gap %.3g (tol 1e-9), 3-4-5 exact",
                  r.max_err);
    return {r.pass, buf};
}

// --- criterion 6: overfit test -----------------------------------------------

harness::RunConfig overfit_config(const fs::path& data, const fs::path& out) {
    harness::RunConfig cfg;
    cfg.seed = 1;
    cfg.data = data;
    cfg.out = out;
    cfg.model.resolution = 64;
    cfg.model.widths = {16, 32, 64, 128};
    cfg.model.depths = {1, 1, 1, 1};
    cfg.model.region_r = 4;
    cfg.steps = 500;
    cfg.batch_size = 4;
    cfg.optim.lr = 2e-3f;
    cfg.augment = false;   // pure memorization budget
    cfg.ckpt_every = 250;
    cfg.synth.seed = 1;
    cfg.synth.count = 40;  // 8:2 split -> 32 training pairs
    cfg.synth.resolution = 64;
    return cfg;
}

Outcome criterion_overfit() {
    const fs::path data = scratch_dir("overfit_data");
    harness::RunConfig cfg = overfit_config(data, scratch_dir("overfit_full"));
    std::ostringstream sink;
    harness::cmd_synth(cfg, true, sink);

    const double t0 = now_s();
    auto full = harness::cmd_train(cfg, false, 0, sink);
    const double t_full = now_s() - t0;

    harness::RunConfig ablated = overfit_config(data, scratch_dir("overfit_ablated"));
    ablated.model.enable_crm = false;
    ablated.model.enable_dcim = false;
    const double t1 = now_s();
    auto abl = harness::cmd_train(ablated, false, 0, sink);
    const double t_abl = now_s() - t1;

    char buf[240];
    std::snprintf(buf, sizeof buf,
                  "full: train IoU %.4f (>= 0.90) in %.1f min; ablated: %.4f (>= 0.80) in "
                  "%.1f min (budget 15 min each)",
                  full.train_report.mean.iou, t_full / 60.0, abl.train_report.mean.iou,
                  t_abl / 60.0);
    const bool pass = full.train_report.mean.iou >= 0.90 && t_full < 900.0 &&
                      abl.train_report.mean.iou >= 0.80 && t_abl < 900.0;
    fs::remove_all(data);
    return {pass, buf};
}

// --- criterion 7: determinism ------------------------------------------------

Outcome criterion_determinism() {
    const fs::path data = scratch_dir("det_data");
    harness::RunConfig cfg;
    cfg.seed = 33;
    cfg.data = data;
    cfg.model = verify::tiny_config();
    cfg.steps = 12;
    cfg.batch_size = 2;
    cfg.ckpt_every = 5;
    cfg.optim.lr = 1e-3f;
    cfg.synth.seed = 33;
    cfg.synth.count = 6;
    cfg.synth.resolution = 32;
    cfg.synth.radius_min = 2.0;
    cfg.synth.radius_max = 6.0;
    std::ostringstream sink;
    harness::cmd_synth(cfg, true, sink);

    // identical config includes an identical run directory: rerun in place
    // and compare against saved copies of the first run's artifacts
    cfg.out = scratch_dir("det_run");
    harness::cmd_train(cfg, false, 0, sink);
    const std::string ckpt_a = read_bytes(cfg.out / "checkpoint.ckpt");
    const std::string log_a = read_bytes(cfg.out / "loss.csv");

    fs::remove_all(cfg.out);
    harness::cmd_train(cfg, false, 0, sink);
    const bool same_ckpt = ckpt_a == read_bytes(cfg.out / "checkpoint.ckpt");
    const bool same_log = log_a == read_bytes(cfg.out / "loss.csv");

    // interrupted + resumed run matches the uninterrupted one
    fs::remove_all(cfg.out);
    harness::cmd_train(cfg, false, 7, sink);  // pause after 7 steps
    harness::cmd_train(cfg, true, 0, sink);   // resume to completion
    const bool resume_ckpt = ckpt_a == read_bytes(cfg.out / "checkpoint.ckpt");
    const bool resume_log = log_a == read_bytes(cfg.out / "loss.csv");

    for (const auto& d : {cfg.out, data}) fs::remove_all(d);
    std::string detail = std::string("repeat run: ckpt ") + (same_ckpt ? "==" : "!=") +
                         ", log " + (same_log ? "==" : "!=") + "; resumed run: ckpt " +
                         (resume_ckpt ? "==" : "!=") + ", log " + (resume_log ? "==" : "!=");
    return {same_ckpt && same_log && resume_ckpt && resume_log, detail};
}

// --- criterion 8: scan scaling -----------------------------------------------

Outcome criterion_bench() {
    std::ostringstream sink;
    auto rep = harness::cmd_bench(sink);
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "worst growth per 4x L: %.2f (budget 5.2); chunked agreement %s",
                  rep.worst_growth, rep.agreement_ok ? "<= 1e-5" : "VIOLATED");
    return {rep.scaling_ok && rep.agreement_ok, buf};
}

// --- criterion 9: preprocessing ------------------------------------------------

Outcome criterion_preprocessing() {
    bool ok = true;
    // HU endpoints map exactly
    Tensor<float> hu = Tensor<float>::from_data({1, 2}, {-1200.f, -200.f});
    auto mapped = preprocess_ct(hu);
    ok = ok && mapped.data()[0] == 0.0f && mapped.data()[1] == 255.0f;

    // crop sides always within [0.7, 0.9] of the original
    for (int trial = 0; trial < 1000 && ok; ++trial) {
        Rng rng(9000 + trial);
        const auto plan = AugmentPlan::draw(64, 64, rng);
        ok = ok && double(plan.side) >= 0.7 * 64.0 && double(plan.side) <= 0.9 * 64.0;
        ok = ok && plan.oy + plan.side <= 64 && plan.ox + plan.side <= 64;
    }

    // seeded augmentation reproducible
    SynthSpec spec;
    spec.resolution = 64;
    auto sample = synth_sample(spec, 3);
    Rng r1(5), r2(5);
    auto a = augment(sample.pair, r1);
    auto b = augment(sample.pair, r2);
    ok = ok && a.pet.vec() == b.pet.vec() && a.ct.vec() == b.ct.vec() &&
         a.mask.vec() == b.mask.vec();
    return {ok, "HU endpoints exact; 1000 crop plans in bounds; augmentation seeded"};
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    auto wanted = [&](int n) { return selected.empty() || selected.count(n); };

    struct Entry {
        int num;
        const char* name;
        Outcome (*fn)();
    };
    const Entry entries[] = {
        {1, "LTI oracle", criterion_lti},
        {2, "gradient suite", criterion_gradients},
        {3, "geometry suite", criterion_geometry},
        {4, "CRM suite", criterion_crm},
        {5, "metrics oracle", criterion_metrics},
        {6, "overfit test", criterion_overfit},
        {7, "determinism", criterion_determinism},
        {8, "scan scaling", criterion_bench},
        {9, "preprocessing", criterion_preprocessing},
    };

    int failures = 0;
    for (const auto& e : entries) {
        if (!wanted(e.num)) continue;
        Outcome out;
        try {
            out = e.fn();
        } catch (const std::exception& ex) {
            out = {false, std::string("exception: ") + ex.what()};
        }
        std::printf("[%s] criterion %d (%s): %s\n", out.pass ? "PASS" : "FAIL", e.num, e.name,
                    out.detail.c_str());
        std::fflush(stdout);
        failures += !out.pass;
    }
    return failures == 0 ? 0 : 1;
}
