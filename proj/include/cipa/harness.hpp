#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cipa/checkpoint.hpp"
#include "cipa/data.hpp"
#include "cipa/image.hpp"
#include "cipa/metrics.hpp"
#include "cipa/net.hpp"
#include "cipa/optim.hpp"

namespace cipa::harness {

// ---------------------------------------------------------------------------
// RunConfig: everything a run needs, loadable from JSON with flag overrides
// applied on top. The effective config is echoed into the run directory and
// fully reconstructs the run together with the seed.
// ---------------------------------------------------------------------------

struct RunConfig {
    std::uint64_t seed = 42;
    std::filesystem::path out = "runs/run";
    std::filesystem::path data = "data/synth";
    CipaConfig model;
    OptimConfig optim;        // lr default 6e-5, cosine to zero over `steps`
    std::size_t steps = 500;  // desk default; paper-scale values are flags away
    std::size_t batch_size = 4;
    std::size_t ckpt_every = 100;
    bool augment = true;
    SynthSpec synth;

    void validate() const {
        model.validate();
        if (steps < 1) throw ContractError("config: steps must be >= 1");
        if (batch_size < 1) throw ContractError("config: batch_size must be >= 1");
        if (ckpt_every < 1) throw ContractError("config: ckpt_every must be >= 1");
        if (!(optim.lr > 0)) throw ContractError("config: lr must be positive");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["out"] = out.string();
        j["data"] = data.string();
        j["model"] = {{"resolution", model.resolution},
                      {"widths", model.widths},
                      {"depths", model.depths},
                      {"state_size", model.state_size},
                      {"expansion", model.expansion},
                      {"mlp_ratio", model.mlp_ratio},
                      {"region_r", model.region_r},
                      {"crm_pool", model.crm_pool},
                      {"num_classes", model.num_classes},
                      {"enable_crm", model.enable_crm},
                      {"enable_dcim", model.enable_dcim},
                      {"dcim_variant", dcim_variant_name(model.dcim_variant)},
                      {"per_direction_params", model.per_direction_params},
                      {"crm_bidirectional", model.crm_bidirectional}};
        j["train"] = {{"steps", steps},
                      {"batch_size", batch_size},
                      {"lr", optim.lr},
                      {"beta1", optim.beta1},
                      {"beta2", optim.beta2},
                      {"eps", optim.eps},
                      {"weight_decay", optim.weight_decay},
                      {"ckpt_every", ckpt_every},
                      {"augment", augment}};
        j["synth"] = synth_spec_to_json(synth);
        return j;
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        c.seed = j.value("seed", c.seed);
        c.out = j.value("out", c.out.string());
        c.data = j.value("data", c.data.string());
        if (j.contains("model")) {
            const auto& m = j.at("model");
            c.model.resolution = m.value("resolution", c.model.resolution);
            if (m.contains("widths")) {
                auto w = m.at("widths").get<std::vector<std::size_t>>();
                if (w.size() != 4) throw ContractError("config: widths must have 4 entries");
                std::copy(w.begin(), w.end(), c.model.widths.begin());
            }
            if (m.contains("depths")) {
                auto d = m.at("depths").get<std::vector<std::size_t>>();
                if (d.size() != 4) throw ContractError("config: depths must have 4 entries");
                std::copy(d.begin(), d.end(), c.model.depths.begin());
            }
            c.model.state_size = m.value("state_size", c.model.state_size);
            c.model.expansion = m.value("expansion", c.model.expansion);
            c.model.mlp_ratio = m.value("mlp_ratio", c.model.mlp_ratio);
            c.model.region_r = m.value("region_r", c.model.region_r);
            c.model.crm_pool = m.value("crm_pool", c.model.crm_pool);
            c.model.num_classes = m.value("num_classes", c.model.num_classes);
            c.model.enable_crm = m.value("enable_crm", c.model.enable_crm);
            c.model.enable_dcim = m.value("enable_dcim", c.model.enable_dcim);
            if (m.contains("dcim_variant"))
                c.model.dcim_variant = dcim_variant_from_name(m.at("dcim_variant"));
            c.model.per_direction_params =
                m.value("per_direction_params", c.model.per_direction_params);
            c.model.crm_bidirectional =
                m.value("crm_bidirectional", c.model.crm_bidirectional);
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            c.steps = t.value("steps", c.steps);
            c.batch_size = t.value("batch_size", c.batch_size);
            c.optim.lr = t.value("lr", c.optim.lr);
            c.optim.beta1 = t.value("beta1", c.optim.beta1);
            c.optim.beta2 = t.value("beta2", c.optim.beta2);
            c.optim.eps = t.value("eps", c.optim.eps);
            c.optim.weight_decay = t.value("weight_decay", c.optim.weight_decay);
            c.ckpt_every = t.value("ckpt_every", c.ckpt_every);
            c.augment = t.value("augment", c.augment);
        }
        if (j.contains("synth")) c.synth = synth_spec_from_json(j.at("synth"));
        c.synth.seed = c.seed;
        return c;
    }

    static RunConfig load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw ContractError("config: cannot open " + path.string());
        nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
        if (j.is_discarded()) throw ContractError("config: unparseable JSON in " + path.string());
        return from_json(j);
    }
};

// One run directory is owned by one process.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
        std::filesystem::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw ContractError("run directory " + dir.string() +
                                " is locked (stale .lock? remove it and retry)");
    }
    ~RunLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            std::filesystem::remove(path_, ec);
        }
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path path_;
    int fd_ = -1;
};

inline void echo_config(const RunConfig& cfg) {
    std::ofstream os(cfg.out / "config.json");
    if (!os) throw IoError("cannot write config echo to " + cfg.out.string());
    os << cfg.to_json().dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// synth: generate shards and print the size histogram.
// ---------------------------------------------------------------------------

inline Manifest cmd_synth(const RunConfig& cfg, bool force, std::ostream& log = std::cout) {
    cfg.synth.validate();
    if (std::filesystem::exists(cfg.data) && !std::filesystem::is_empty(cfg.data) && !force)
        throw ContractError("output dataset directory " + cfg.data.string() +
                            " is not empty (use --force to overwrite)");
    std::filesystem::remove_all(cfg.data);
    Manifest m = write_synth_shards(cfg.synth, cfg.data);

    // tumor-size histogram over the whole dataset
    std::vector<std::size_t> counts;
    for (const auto& [split, ids] : m.splits) {
        auto pairs = read_shard(cfg.data, split);
        for (const auto& p : pairs) {
            std::size_t c = 0;
            for (float v : p.mask.vec()) c += v != 0.0f;
            counts.push_back(c);
        }
    }
    const std::size_t bucket = 100;
    std::map<std::size_t, std::size_t> hist;
    for (std::size_t c : counts) ++hist[c / bucket];
    log << "dataset: " << counts.size() << " pairs at " << cfg.synth.resolution << "x"
        << cfg.synth.resolution << " (train " << m.splits.at("train").size() << ", test "
        << m.splits.at("test").size() << ")\n";
    log << "mask-size histogram (pixels):\n";
    for (const auto& [b, n] : hist) {
        log << "  [" << b * bucket << "," << (b + 1) * bucket << ")  ";
        for (std::size_t i = 0; i < n; ++i) log << '#';
        log << "  " << n << "\n";
    }
    return m;
}

// ---------------------------------------------------------------------------
// train: deterministic batch stream, AdamW + cosine, CSV loss log, periodic
// atomic checkpoints, final metrics on both shards.
// ---------------------------------------------------------------------------

struct TrainSummary {
    std::size_t steps_run = 0;
    double final_loss = 0.0;
    MetricsReport train_report, test_report;
};

inline MetricsReport eval_shard(CipaNet<float>& net, const std::vector<ModalityPair>& pairs) {
    std::vector<EvalItem> items;
    for (const auto& p : pairs) {
        Tensor<float> pred = infer_mask(net.forward(p.pet, p.ct));
        items.push_back({p.id, pred, p.mask, p.spacing});
    }
    return evaluate_dataset(std::move(items));
}

inline void write_report(const std::filesystem::path& path, const MetricsReport& rep) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write report " + path.string());
    os << rep.to_json().dump(2) << "\n";
}

// `stop_after` halts the loop after that many steps of this invocation
// (0 = run to the configured budget); a later resume continues the same
// trajectory bit-exactly because batching and augmentation are stateless in
// (seed, step).
inline TrainSummary cmd_train(const RunConfig& cfg, bool resume = false,
                              std::size_t stop_after = 0, std::ostream& log = std::cout) {
    cfg.validate();
    RunLock lock(cfg.out);
    echo_config(cfg);

    auto train_pairs = read_shard(cfg.data, "train");
    auto test_pairs = read_shard(cfg.data, "test");
    if (train_pairs.empty()) throw ContractError("train: empty train shard");
    for (const auto& p : train_pairs)
        if (p.pet.extent(0) != cfg.model.resolution)
            throw ContractError("train: shard resolution " + std::to_string(p.pet.extent(0)) +
                                " does not match configured " +
                                std::to_string(cfg.model.resolution));

    CipaNet<float> net = CipaNet<float>::init(cfg.model, cfg.seed);
    net.set_requires_grad(true);
    AdamWState<float> state = AdamWState<float>::init(net);
    OptimConfig optim = cfg.optim;
    optim.total_steps = cfg.steps;

    const auto ckpt_path = cfg.out / "checkpoint.ckpt";
    const auto loss_path = cfg.out / "loss.csv";
    if (resume && std::filesystem::exists(ckpt_path)) {
        Checkpoint ckpt = load_checkpoint(ckpt_path);
        restore(net, state, ckpt);
        log << "resumed from step " << state.step << "\n";
    }
    std::ofstream loss_log;
    if (resume && state.step > 0 && std::filesystem::exists(loss_path)) {
        loss_log.open(loss_path, std::ios::app);
    } else {
        loss_log.open(loss_path, std::ios::trunc);
        loss_log << "step,loss,lr\n";
    }
    if (!loss_log) throw IoError("cannot open loss log " + loss_path.string());

    const nlohmann::json echo = cfg.to_json();
    TrainSummary summary;
    std::size_t executed = 0;
    char line[128];
    for (std::size_t step = state.step; step < cfg.steps; ++step) {
        // stateless batch selection and augmentation streams
        Rng batch_rng = Rng(cfg.seed).fork(0xb47c4).fork(step);
        std::vector<TrainItem<float>> batch;
        std::string ids;
        for (std::size_t j = 0; j < cfg.batch_size; ++j) {
            const std::size_t idx = batch_rng.uniform_int(train_pairs.size());
            ModalityPair p = train_pairs[idx];
            if (cfg.augment) {
                Rng aug_rng = Rng(cfg.seed).fork(0xa9u).fork(step * cfg.batch_size + j);
                p = augment(p, aug_rng);
            }
            batch.push_back({p.pet, p.ct, p.mask, p.id});
            ids += (j ? "," : "") + p.id;
        }
        StepResult<float> res;
        try {
            res = train_step(net, batch, state, optim);
        } catch (const NumericFault& e) {
            throw NumericFault(std::string(e.what()) + " at step " + std::to_string(step) +
                               " (batch ids: " + ids + ")");
        }
        std::snprintf(line, sizeof line, "%zu,%.9g,%.9g\n", step, res.loss, double(res.lr));
        loss_log << line;
        if (step == 0 || (step + 1) % 50 == 0)
            log << "step " << step << " loss " << res.loss << " lr " << res.lr << "\n";
        summary.final_loss = res.loss;
        ++executed;
        if ((step + 1) % cfg.ckpt_every == 0 || step + 1 == cfg.steps)
            save_checkpoint(ckpt_path, snapshot(net, state, echo));
        if (stop_after && executed >= stop_after && step + 1 < cfg.steps) {
            save_checkpoint(ckpt_path, snapshot(net, state, echo));
            loss_log.flush();
            summary.steps_run = executed;
            log << "paused after " << executed << " steps at step " << state.step << "\n";
            return summary;
        }
    }
    loss_log.flush();
    summary.steps_run = executed;

    summary.train_report = eval_shard(net, train_pairs);
    summary.test_report = eval_shard(net, test_pairs);
    write_report(cfg.out / "metrics_train.json", summary.train_report);
    write_report(cfg.out / "metrics_test.json", summary.test_report);
    log << "final train iou " << summary.train_report.mean.iou << ", test iou "
        << summary.test_report.mean.iou << "\n";
    return summary;
}

// ---------------------------------------------------------------------------
// eval: run a checkpoint over a shard, emit the JSON report and the
// TP/FP/FN overlays.
// ---------------------------------------------------------------------------

inline CipaConfig model_config_from_checkpoint(const Checkpoint& ckpt, const RunConfig& fallback) {
    if (ckpt.config.contains("model"))
        return RunConfig::from_json(ckpt.config).model;
    return fallback.model;
}

inline MetricsReport cmd_eval(const RunConfig& cfg, const std::filesystem::path& ckpt_path,
                              const std::string& split, std::ostream& log = std::cout) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    CipaConfig model_cfg = model_config_from_checkpoint(ckpt, cfg);
    CipaNet<float> net = CipaNet<float>::init(model_cfg, cfg.seed);
    AdamWState<float> state = AdamWState<float>::init(net);
    restore(net, state, ckpt);

    auto pairs = read_shard(cfg.data, split);
    std::filesystem::create_directories(cfg.out / "overlays");
    std::vector<EvalItem> items;
    for (const auto& p : pairs) {
        Tensor<float> pred = infer_mask(net.forward(p.pet, p.ct));
        items.push_back({p.id, pred, p.mask, p.spacing});
        write_png(cfg.out / "overlays" / (p.id + ".png"), render_overlay(p.ct, pred, p.mask));
    }
    MetricsReport rep = evaluate_dataset(std::move(items));
    write_report(cfg.out / "report.json", rep);
    log << "eval " << split << ": iou " << rep.mean.iou << " f1 " << rep.mean.f1 << " acc "
        << rep.mean.acc << " hd95 " << rep.mean.hd95 << " over " << rep.count << " images\n";
    return rep;
}

// ---------------------------------------------------------------------------
// infer: single pair -> binary mask tensor (optional overlay-style PNG of
// the raw prediction).
// ---------------------------------------------------------------------------

inline void cmd_infer(const RunConfig& cfg, const std::filesystem::path& ckpt_path,
                      const std::filesystem::path& pet_path,
                      const std::filesystem::path& ct_path,
                      const std::filesystem::path& mask_out, bool also_png = false) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    CipaConfig model_cfg = model_config_from_checkpoint(ckpt, cfg);
    CipaNet<float> net = CipaNet<float>::init(model_cfg, cfg.seed);
    AdamWState<float> state = AdamWState<float>::init(net);
    restore(net, state, ckpt);

    Tensor<float> pet = load_tsr<float>(pet_path);
    Tensor<float> ct = load_tsr<float>(ct_path);
    Tensor<float> pred = infer_mask(net.forward(pet, ct));
    if (mask_out.has_parent_path()) std::filesystem::create_directories(mask_out.parent_path());
    save_tsr(mask_out, pred);
    if (also_png) {
        Tensor<float> empty(pred.shape());
        write_png(mask_out.string() + ".png", render_overlay(ct, pred, empty));
    }
}

// ---------------------------------------------------------------------------
// bench: wall-clock scan timings across L and D, the linear-scaling
// assertion, and the chunked-vs-sequential agreement.
// ---------------------------------------------------------------------------

struct BenchRow {
    std::size_t L, D;
    double seq_ms, chunk_ms, tokens_per_s, max_diff;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    bool scaling_ok = true;
    bool agreement_ok = true;
    double worst_growth = 0.0;  // max t(4L)/t(L) observed
};

inline nlohmann::json bench_json(const BenchReport& rep) {
    nlohmann::json j;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rep.rows)
        j["rows"].push_back({{"L", r.L}, {"D", r.D}, {"seq_ms", r.seq_ms},
                             {"chunk_ms", r.chunk_ms}, {"tokens_per_s", r.tokens_per_s},
                             {"max_diff", r.max_diff}});
    j["scaling_ok"] = rep.scaling_ok;
    j["agreement_ok"] = rep.agreement_ok;
    j["worst_growth"] = rep.worst_growth;
    return j;
}

inline BenchReport cmd_bench(std::ostream& log = std::cout,
                             const std::filesystem::path& json_out = {}) {
    BenchReport rep;
    Rng rng(4242);
    const std::size_t chunk = 256;
    for (std::size_t D : {std::size_t(16), std::size_t(64)}) {
        auto params = SSMParams<float>::init(D, 16, rng);
        for (std::size_t L : {std::size_t(256), std::size_t(1024), std::size_t(4096)}) {
            Tensor<float> x({L, D});
            for (auto& v : x.vec()) v = float(rng.uniform(-1.0, 1.0));
            // minimum over several repeats after a warmup; the min is the
            // noise-robust statistic for a contended machine
            auto time_of = [&](auto&& fn) {
                fn();
                double best = 1e300;
                for (int rep_i = 0; rep_i < 5; ++rep_i) {
                    const auto t0 = std::chrono::steady_clock::now();
                    fn();
                    best = std::min(best, std::chrono::duration<double>(
                                              std::chrono::steady_clock::now() - t0)
                                              .count());
                }
                return best;
            };
            Tensor<float> y_seq, y_chunk;
            const double t_seq = time_of([&] { y_seq = selective_scan(x, params); });
            const double t_chunk = time_of([&] { y_chunk = chunked_scan(x, params, chunk); });
            double diff = 0.0;
            for (std::size_t i = 0; i < y_seq.numel(); ++i)
                diff = std::max(diff, std::abs(double(y_seq.data()[i]) - double(y_chunk.data()[i])));
            rep.rows.push_back({L, D, t_seq * 1e3, t_chunk * 1e3,
                                double(L) / t_seq, diff});
            if (diff > 1e-5) rep.agreement_ok = false;
        }
    }
    // linear scaling: quadrupling L may grow time by at most 1.3x the factor
    for (std::size_t base = 0; base < rep.rows.size(); ++base) {
        for (std::size_t next = 0; next < rep.rows.size(); ++next) {
            if (rep.rows[next].D != rep.rows[base].D ||
                rep.rows[next].L != 4 * rep.rows[base].L)
                continue;
            const double growth = rep.rows[next].seq_ms / rep.rows[base].seq_ms;
            rep.worst_growth = std::max(rep.worst_growth, growth);
            if (growth > 4.0 * 1.3) rep.scaling_ok = false;
        }
    }
    char line[160];
    log << "   L     D    seq_ms   chunk_ms   tokens/s    max|diff|\n";
    for (const auto& r : rep.rows) {
        std::snprintf(line, sizeof line, "%5zu %5zu %9.3f %10.3f %10.0f %12.3g\n", r.L, r.D,
                      r.seq_ms, r.chunk_ms, r.tokens_per_s, r.max_diff);
        log << line;
    }
    log << "scaling growth per 4x L: worst " << rep.worst_growth << " (budget 5.2), "
        << (rep.scaling_ok ? "ok" : "FAIL") << "\n";
    log << "chunked agreement: " << (rep.agreement_ok ? "ok" : "FAIL") << "\n";
    if (!json_out.empty()) {
        std::ofstream os(json_out);
        os << bench_json(rep).dump(2) << "\n";
    }
    return rep;
}

}  // namespace cipa::harness
