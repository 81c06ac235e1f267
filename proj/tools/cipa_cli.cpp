// Command-line surface: synth, train, eval, infer, verify, bench.
// Exit codes: 0 ok, 1 validation error, 2 suite failure, 3 numeric fault.

#include <CLI11.hpp>

#include <iostream>

#include "cipa/harness.hpp"
#include "cipa/verify.hpp"

using namespace cipa;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string out;
    std::string data;
    std::uint64_t seed = 0;
    bool has_seed = false;
    bool force = false;
};

harness::RunConfig effective_config(const GlobalArgs& g) {
    harness::RunConfig cfg;
    if (!g.config_path.empty()) cfg = harness::RunConfig::load(g.config_path);
    if (g.has_seed) {
        cfg.seed = g.seed;
        cfg.synth.seed = g.seed;
    }
    if (!g.out.empty()) cfg.out = g.out;
    if (!g.data.empty()) cfg.data = g.data;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CIPA: cross-modal PET-CT tumor segmentation with selective state spaces"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config_path, "JSON run config (flags override it)");
    auto* seed_opt = app.add_option("--seed", g.seed, "RNG seed (overrides config)");
    app.add_option("--out", g.out, "run/output directory");
    app.add_option("--data", g.data, "dataset directory");
    app.add_flag("--force", g.force, "overwrite existing outputs");

    // synth
    auto* synth = app.add_subcommand("synth", "generate synthetic PET-CT shards");
    std::size_t synth_count = 0, synth_res = 0;
    auto* opt_count = synth->add_option("--count", synth_count, "number of pairs to generate");
    auto* opt_res = synth->add_option("--resolution", synth_res, "image side length");

    // train
    auto* train = app.add_subcommand("train", "train on a shard directory");
    std::size_t tr_steps = 0, tr_batch = 0, tr_stop = 0;
    double tr_lr = 0.0;
    bool tr_resume = false, tr_ablate_crm = false, tr_ablate_dcim = false, tr_no_aug = false;
    std::string tr_variant;
    auto* opt_steps = train->add_option("--steps", tr_steps, "total optimizer steps");
    auto* opt_batch =
        train->add_option("--batch", tr_batch, "batch size (paper value 16 via this flag)");
    auto* opt_lr = train->add_option("--lr", tr_lr, "base learning rate");
    train->add_option("--stop-after", tr_stop, "pause after N steps of this invocation");
    train->add_flag("--resume", tr_resume, "continue from <out>/checkpoint.ckpt");
    train->add_flag("--ablate-crm", tr_ablate_crm, "disable the rectification module");
    train->add_flag("--ablate-dcim", tr_ablate_dcim, "disable the interaction module");
    train->add_option("--dcim-variant", tr_variant,
                      "full|region_pet_local_pet|region_ct_local_ct|region_ct_local_pet|"
                      "local_ct|region_pet");
    train->add_flag("--no-augment", tr_no_aug, "disable training augmentation");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a shard");
    std::string ev_ckpt, ev_split = "test";
    eval->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
    eval->add_option("--split", ev_split, "shard split (default test)");

    // infer
    auto* infer = app.add_subcommand("infer", "segment one PET/CT pair");
    std::string in_ckpt, in_pet, in_ct, in_out = "mask.tsr";
    bool in_png = false;
    infer->add_option("--checkpoint", in_ckpt, "checkpoint path")->required();
    infer->add_option("--pet", in_pet, "PET plane (.tsr, preprocessed)")->required();
    infer->add_option("--ct", in_ct, "CT plane (.tsr, preprocessed)")->required();
    infer->add_option("--mask-out", in_out, "output mask path (.tsr)");
    infer->add_flag("--png", in_png, "also write a PNG rendering");

    // verify
    auto* verify_cmd = app.add_subcommand("verify", "run the verification suites");
    std::string inject_fault;
    verify_cmd->add_option("--inject-fault", inject_fault,
                           "deliberately break a kernel (self-test of the harness)");

    // bench
    auto* bench = app.add_subcommand("bench", "time the scan kernels and check scaling");

    CLI11_PARSE(app, argc, argv);
    g.has_seed = seed_opt->count() > 0;

    try {
        harness::RunConfig cfg = effective_config(g);

        if (*synth) {
            if (opt_count->count()) cfg.synth.count = synth_count;
            if (opt_res->count()) cfg.synth.resolution = synth_res;
            harness::cmd_synth(cfg, g.force);
            return 0;
        }
        if (*train) {
            if (opt_steps->count()) cfg.steps = tr_steps;
            if (opt_batch->count()) cfg.batch_size = tr_batch;
            if (opt_lr->count()) cfg.optim.lr = float(tr_lr);
            if (tr_ablate_crm) cfg.model.enable_crm = false;
            if (tr_ablate_dcim) cfg.model.enable_dcim = false;
            if (!tr_variant.empty()) cfg.model.dcim_variant = dcim_variant_from_name(tr_variant);
            if (tr_no_aug) cfg.augment = false;
            harness::cmd_train(cfg, tr_resume, tr_stop);
            return 0;
        }
        if (*eval) {
            harness::cmd_eval(cfg, ev_ckpt, ev_split);
            return 0;
        }
        if (*infer) {
            harness::cmd_infer(cfg, in_ckpt, in_pet, in_ct, in_out, in_png);
            return 0;
        }
        if (*verify_cmd) {
            if (!inject_fault.empty()) fault::inject(inject_fault);
            auto results = cipa::verify::run_all_suites();
            fault::clear();
            bool all_pass = true;
            for (const auto& r : results) {
                std::printf("[%s] %-18s max_err %-12.3g %5.1fs  %s\n",
                            r.pass ? "PASS" : "FAIL", r.name.c_str(), r.max_err, r.seconds,
                            r.detail.c_str());
                all_pass = all_pass && r.pass;
            }
            return all_pass ? 0 : 2;
        }
        if (*bench) {
            // table to stdout; JSON to <out>/bench.json when --out is given,
            // otherwise appended to stdout
            std::filesystem::path json_out;
            if (!g.out.empty()) {
                std::filesystem::create_directories(cfg.out);
                json_out = cfg.out / "bench.json";
            }
            harness::BenchReport rep = harness::cmd_bench(std::cout, json_out);
            if (json_out.empty()) std::cout << harness::bench_json(rep).dump(2) << "\n";
            return rep.scaling_ok && rep.agreement_ok ? 0 : 2;
        }
    } catch (const NumericFault& e) {
        std::cerr << "numeric fault: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
