#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cipa/harness.hpp"
#include "cipa/image.hpp"
#include "cipa/verify.hpp"

using namespace cipa;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("cipa_test_" + name);
    fs::remove_all(dir);
    return dir;
}

harness::RunConfig tiny_run(const fs::path& data, const fs::path& out) {
    harness::RunConfig cfg;
    cfg.seed = 21;
    cfg.data = data;
    cfg.out = out;
    cfg.model = verify::tiny_config();
    cfg.steps = 3;
    cfg.batch_size = 2;
    cfg.ckpt_every = 2;
    cfg.optim.lr = 1e-3f;
    cfg.synth.seed = 21;
    cfg.synth.count = 5;
    cfg.synth.resolution = 32;
    cfg.synth.radius_min = 2.0;
    cfg.synth.radius_max = 6.0;
    return cfg;
}

}  // namespace

TEST_CASE("overlay palette matches the legend exactly") {
    Tensor<float> ct({2, 2}, 100.0f);
    auto pred = Tensor<float>::from_data({2, 2}, {1, 1, 0, 0});
    auto gt = Tensor<float>::from_data({2, 2}, {1, 0, 1, 0});
    RgbImage img = render_overlay(ct, pred, gt);
    const std::uint8_t* tp = img.at(0, 0);
    const std::uint8_t* fp = img.at(0, 1);
    const std::uint8_t* fn = img.at(1, 0);
    const std::uint8_t* tn = img.at(1, 1);
    CHECK((tp[0] == 0 && tp[1] == 255 && tp[2] == 0));
    CHECK((fp[0] == 255 && fp[1] == 0 && fp[2] == 0));
    CHECK((fn[0] == 0 && fn[1] == 0 && fn[2] == 255));
    CHECK((tn[0] == 100 && tn[1] == 100 && tn[2] == 100));

    // a perfect prediction renders no red or blue pixels
    RgbImage perfect = render_overlay(ct, gt, gt);
    for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 2; ++x) {
            const std::uint8_t* px = perfect.at(y, x);
            const bool red = px[0] == 255 && px[1] == 0 && px[2] == 0;
            const bool blue = px[0] == 0 && px[1] == 0 && px[2] == 255;
            CHECK_FALSE(red);
            CHECK_FALSE(blue);
        }
}

TEST_CASE("png write/read round-trip") {
    Rng rng(55);
    RgbImage img;
    img.width = 13;
    img.height = 9;
    img.pixels.resize(3 * 13 * 9);
    for (auto& v : img.pixels) v = std::uint8_t(rng.uniform_int(256));
    const fs::path dir = scratch("png");
    fs::create_directories(dir);
    write_png(dir / "t.png", img);
    RgbImage back = read_png(dir / "t.png");
    CHECK(back.width == img.width);
    CHECK(back.height == img.height);
    CHECK(back.pixels == img.pixels);
    fs::remove_all(dir);
}

TEST_CASE("run config json round-trip with overrides") {
    harness::RunConfig cfg;
    cfg.seed = 99;
    cfg.model.widths = {16, 32, 64, 128};
    cfg.model.enable_crm = false;
    cfg.model.dcim_variant = DcimVariant::LocalCtOnly;
    cfg.steps = 77;
    cfg.optim.lr = 1.5e-4f;
    auto j = cfg.to_json();
    harness::RunConfig back = harness::RunConfig::from_json(j);
    CHECK(back.seed == 99);
    CHECK(back.model.widths == cfg.model.widths);
    CHECK(back.model.enable_crm == false);
    CHECK(back.model.dcim_variant == DcimVariant::LocalCtOnly);
    CHECK(back.steps == 77);
    CHECK(back.optim.lr == cfg.optim.lr);
    CHECK(back.synth.seed == 99);  // seed propagates into the generator

    nlohmann::json bad = j;
    bad["model"]["widths"] = {1, 2, 3};
    CHECK_THROWS_AS(harness::RunConfig::from_json(bad), ContractError);
}

TEST_CASE("synth/train/eval harness flow on a tiny config") {
    const fs::path data = scratch("flow_data");
    const fs::path out = scratch("flow_run");
    harness::RunConfig cfg = tiny_run(data, out);
    std::ostringstream sink;

    harness::cmd_synth(cfg, false, sink);
    CHECK(fs::exists(data / "manifest.json"));

    // refusing to clobber without force
    CHECK_THROWS_AS(harness::cmd_synth(cfg, false, sink), ContractError);
    harness::cmd_synth(cfg, true, sink);  // force overwrites

    auto summary = harness::cmd_train(cfg, false, 0, sink);
    CHECK(summary.steps_run == 3);
    CHECK(fs::exists(out / "checkpoint.ckpt"));
    CHECK(fs::exists(out / "loss.csv"));
    CHECK(fs::exists(out / "config.json"));
    CHECK(fs::exists(out / "metrics_train.json"));
    CHECK_FALSE(fs::exists(out / ".lock"));  // released

    std::ifstream csv(out / "loss.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "step,loss,lr");
    std::string row0;
    std::getline(csv, row0);
    CHECK(row0.rfind("0,", 0) == 0);
    CHECK(row0.find("0.001") != std::string::npos);  // lr echoed at step 0

    auto rep = harness::cmd_eval(cfg, out / "checkpoint.ckpt", "test", sink);
    CHECK(rep.count == 1);
    CHECK(fs::exists(out / "report.json"));
    CHECK(fs::exists(out / "overlays"));

    // a held lock blocks a second owner
    {
        harness::RunLock lock(out);
        CHECK_THROWS_AS(harness::cmd_train(cfg, false, 0, sink), ContractError);
    }

    // infer round-trip on one test pair
    auto ids = load_manifest(data).splits.at("test");
    REQUIRE_FALSE(ids.empty());
    harness::cmd_infer(cfg, out / "checkpoint.ckpt",
                       data / "test" / (ids[0] + ".pet.tsr"),
                       data / "test" / (ids[0] + ".ct.tsr"), out / "pred.tsr", true);
    auto mask = load_tsr<float>(out / "pred.tsr");
    CHECK(mask.shape() == Shape{32, 32});
    for (float v : mask.vec()) CHECK((v == 0.0f || v == 1.0f));

    fs::remove_all(data);
    fs::remove_all(out);
}

TEST_CASE("invalid synth count is a validation error") {
    harness::RunConfig cfg;
    cfg.synth.count = 0;
    CHECK_THROWS_AS(cfg.synth.validate(), ContractError);
}

TEST_CASE("injected scan fault is caught by the LTI suite") {
    fault::inject("scan");
    auto r = verify::suite_lti(10);
    fault::clear();
    CHECK_FALSE(r.pass);
    CHECK(verify::suite_lti(10).pass);  // healthy again after clearing
}

TEST_CASE("repeated synth with one seed produces byte-identical shards") {
    const fs::path a = scratch("synth_a");
    const fs::path b = scratch("synth_b");
    SynthSpec spec;
    spec.seed = 404;
    spec.count = 3;
    spec.resolution = 32;
    spec.radius_min = 2.0;
    spec.radius_max = 6.0;
    write_synth_shards(spec, a);
    write_synth_shards(spec, b);
    for (const char* rel : {"train/s000000.pet.tsr", "train/s000000.ct.tsr",
                            "train/s000000.mask.tsr", "manifest.json"}) {
        std::ifstream fa(a / rel, std::ios::binary), fb(b / rel, std::ios::binary);
        std::ostringstream sa, sb;
        sa << fa.rdbuf();
        sb << fb.rdbuf();
        CHECK(sa.str() == sb.str());
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("all verification suites pass on a healthy build") {
    for (const auto& r : verify::run_all_suites()) {
        INFO(r.name << ": " << r.detail);
        CHECK(r.pass);
    }
}

TEST_CASE("paper-scale configuration validates") {
    harness::RunConfig cfg;
    cfg.model.resolution = 512;
    cfg.model.widths = {32, 64, 128, 256};
    cfg.model.depths = {2, 2, 2, 2};
    cfg.batch_size = 16;
    cfg.optim.lr = 6e-5f;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.model.stage_side(0) == 128);
    CHECK(cfg.model.stage_r(3) == 4);
}
