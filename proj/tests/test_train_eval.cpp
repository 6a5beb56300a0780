#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "core/error.hpp"
#include "train.hpp"

using namespace nseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  static int counter = 0;
  auto p = fs::temp_directory_path() /
           ("nseg_train_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  fs::create_directories(p);
  return p;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.input_size = 32;
  m.num_scales = 2;
  m.scale_strides = {4, 8};
  m.decoder_widths = {4, 8};
  m.backbone_embed_dim = 16;
  m.backbone_patch_size = 8;
  m.backbone_blocks = 2;
  m.adapter_width = 8;
  m.attention_heads = 2;
  m.sampling_points = 2;
  return m;
}

TrainConfig tiny_train(int epochs, double lr0 = 3e-3) {
  TrainConfig t;
  t.optimizer = OptimizerKind::adam;
  t.lr0 = lr0;
  t.weight_decay = 1e-4;
  t.epochs = epochs;
  t.batch_size = 4;
  t.seed = 7;
  return t;
}

}  // namespace

TEST_CASE("poly_lr: endpoints, closed form, monotonicity, range errors") {
  CHECK(poly_lr(0, 1000, 1e-4, 0.9) == 1e-4);
  CHECK(poly_lr(1000, 1000, 1e-4, 0.9) == 0.0);
  CHECK(poly_lr(500, 1000, 1e-4, 0.9) ==
        doctest::Approx(1e-4 * std::pow(0.5, 0.9)).epsilon(1e-12));
  CHECK(1e-4 * std::pow(0.5, 0.9) == doctest::Approx(5.359e-5).epsilon(1e-3));
  double prev = 1e9;
  for (int s = 0; s <= 100; ++s) {
    const double lr = poly_lr(s, 100, 1e-4, 0.9);
    CHECK(lr < prev);
    prev = lr;
  }
  CHECK_THROWS_AS(poly_lr(-1, 100, 1e-4, 0.9), Error);
  CHECK_THROWS_AS(poly_lr(101, 100, 1e-4, 0.9), Error);
  try {
    poly_lr(101, 100, 1e-4, 0.9);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::range);
  }
}

TEST_CASE("optimizers descend a quadratic") {
  for (OptimizerKind kind : {OptimizerKind::sgd_nesterov, OptimizerKind::adam}) {
    ParamStore store;
    ag::Var x = store.add_param("x", Tensor({1}, {10.0}));
    TrainConfig t;
    t.optimizer = kind;
    t.momentum = kind == OptimizerKind::sgd_nesterov ? 0.9 : 0.99;
    t.weight_decay = 0.0;
    Optimizer opt(t);
    for (int i = 0; i < 1000; ++i) {
      store.zero_grads();
      ag::Var diff = ag::add_scalar(x, -3.0);
      ag::backward(ag::mul(diff, diff));
      opt.step(store, kind == OptimizerKind::adam ? 0.05 : 0.01);
    }
    CHECK(std::fabs(x->value[0] - 3.0) < 0.05);
  }
}

TEST_CASE("training protocol end to end on a synthetic cohort") {
  auto dir = temp_dir();
  Manifest manifest = synthesize_dataset((dir / "cohort").string(), 6, 2, 32, 11, 0.1);
  ModelConfig mcfg = tiny_model();
  TrainConfig tcfg = tiny_train(3);
  TrainResult res = train_model(mcfg, tcfg, manifest, (dir / "run").string());

  SUBCASE("checkpoint exists and its digest matches the stored meta") {
    CheckpointMeta meta;
    auto model = load_model_from_checkpoint(res.checkpoint_path, &meta);
    CHECK(model->digest() == meta.param_digest);
    CHECK(meta.model == mcfg);
    CHECK(meta.train == tcfg);
  }

  SUBCASE("persisted val dice sequence is strictly increasing") {
    REQUIRE(!res.persisted_val_dice.empty());
    for (size_t i = 1; i < res.persisted_val_dice.size(); ++i)
      CHECK(res.persisted_val_dice[i] > res.persisted_val_dice[i - 1]);
  }

  SUBCASE("run log lr column equals poly_lr pointwise") {
    std::ifstream log(dir / "run" / "runlog_steps.csv");
    REQUIRE(log.good());
    std::string line;
    std::getline(log, line);
    CHECK(line == "step,lr,loss");
    int64_t rows = 0;
    while (std::getline(log, line)) {
      std::istringstream ss(line);
      std::string step_s, lr_s, loss_s;
      std::getline(ss, step_s, ',');
      std::getline(ss, lr_s, ',');
      std::getline(ss, loss_s, ',');
      const int64_t step = std::stoll(step_s);
      CHECK(std::stod(lr_s) ==
            doctest::Approx(poly_lr(step, res.total_steps, tcfg.lr0, tcfg.poly_exponent))
                .epsilon(1e-15));
      CHECK(std::isfinite(std::stod(loss_s)));
      ++rows;
    }
    CHECK(rows == res.total_steps);
  }

  SUBCASE("evaluation is deterministic and mutation-free") {
    Manifest m2 = Manifest::load((dir / "cohort" / "manifest.csv").string());
    EvalOutput a = evaluate_checkpoint(res.checkpoint_path, m2, Split::val);
    EvalOutput b = evaluate_checkpoint(res.checkpoint_path, m2, Split::val);
    REQUIRE(a.report.rows.size() == b.report.rows.size());
    for (size_t i = 0; i < a.report.rows.size(); ++i)
      CHECK(a.report.rows[i].dice == b.report.rows[i].dice);
    CHECK(a.report.param_digest == b.report.param_digest);
  }

  SUBCASE("config mismatch against the checkpoint snapshot is rejected") {
    ModelConfig other = mcfg;
    other.decoder_widths = {8, 16};
    try {
      evaluate_checkpoint(res.checkpoint_path, manifest, Split::val, false, &other);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Errc::config_mismatch);
    }
    // the matching snapshot passes
    EvalOutput ok = evaluate_checkpoint(res.checkpoint_path, manifest, Split::val, false, &mcfg);
    CHECK(ok.report.rows.size() == manifest.split_records(Split::val).size());
  }

  SUBCASE("zero-shot evaluation reports an unchanged digest and is tagged") {
    Manifest external = synthesize_dataset((dir / "ext").string(), 5, 1, 32, 99, 0.1);
    EvalOutput x = evaluate_checkpoint(res.checkpoint_path, external, Split::test, true);
    CHECK(x.report.zero_shot);
    CheckpointMeta meta = read_checkpoint_meta(res.checkpoint_path);
    CHECK(x.report.param_digest == meta.param_digest);
    const std::string json = x.report.to_json();
    CHECK(json.find("\"mdice\"") != std::string::npos);
    CHECK(json.find("\"miou\"") != std::string::npos);
    CHECK(json.find("\"zero_shot\": true") != std::string::npos);
  }

  fs::remove_all(dir);
}

TEST_CASE("loss smoothed over 50-step windows is non-increasing") {
  auto dir = temp_dir();
  Manifest manifest = synthesize_dataset((dir / "cohort").string(), 6, 2, 32, 11, 0.1);
  TrainConfig tcfg = tiny_train(80);
  TrainResult res = train_model(tiny_model(), tcfg, manifest, (dir / "run").string());
  const auto& losses = res.step_losses;
  REQUIRE(losses.size() > 60);
  auto window_mean = [&](size_t i) {
    double s = 0;
    for (size_t k = i; k < i + 50; ++k) s += losses[k];
    return s / 50.0;
  };
  for (size_t i = 0; i + 51 <= losses.size(); ++i)
    CHECK(window_mean(i + 1) <= window_mean(i) + 1e-9);
  fs::remove_all(dir);
}

TEST_CASE("training errors: empty splits and divergence") {
  auto dir = temp_dir();
  Manifest manifest = synthesize_dataset((dir / "cohort").string(), 6, 1, 32, 21, 0.1);

  SUBCASE("empty train split") {
    Manifest no_train = manifest;
    for (auto& r : no_train.records)
      if (r.split == Split::train) r.split = Split::test;
    try {
      train_model(tiny_model(), tiny_train(1), no_train, (dir / "r1").string());
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Errc::empty_split);
    }
  }
  SUBCASE("empty val split") {
    Manifest no_val = manifest;
    for (auto& r : no_val.records)
      if (r.split == Split::val) r.split = Split::train;
    try {
      train_model(tiny_model(), tiny_train(1), no_val, (dir / "r2").string());
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Errc::empty_split);
    }
  }
  SUBCASE("absurd learning rate diverges with a diagnostic") {
    try {
      train_model(tiny_model(), tiny_train(2, /*lr0=*/1e200), manifest, (dir / "r3").string());
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Errc::diverged);
      CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("predict: native-size {0,255} masks, bitwise deterministic") {
  auto dir = temp_dir();
  Manifest manifest = synthesize_dataset((dir / "cohort").string(), 6, 1, 32, 31, 0.1);
  TrainResult res = train_model(tiny_model(), tiny_train(1), manifest, (dir / "run").string());
  auto model = load_model_from_checkpoint(res.checkpoint_path);

  SynthPatch sample = synthesize_patch(5, 48, {1, 2}, 0.1);  // not the network size
  write_raster((dir / "in.ppm").string(), sample.image);
  predict_to_file(*model, (dir / "in.ppm").string(), (dir / "out1.pgm").string());
  predict_to_file(*model, (dir / "in.ppm").string(), (dir / "out2.pgm").string());

  Raster m1 = read_raster((dir / "out1.pgm").string());
  Raster m2 = read_raster((dir / "out2.pgm").string());
  CHECK(m1.width == 48);
  CHECK(m1.height == 48);
  CHECK(m1.channels == 1);
  for (uint8_t v : m1.px) CHECK((v == 0 || v == 255));
  CHECK(m1.px == m2.px);

  CHECK_THROWS_AS(predict_to_file(*model, (dir / "nope.ppm").string(), (dir / "x.pgm").string()),
                  Error);
  fs::remove_all(dir);
}

TEST_CASE("stitching: disjoint placement and overlap averaging") {
  // Slide whose value is a function of the x coordinate lets tiles be told apart.
  const int w = 24, h = 8, patch = 8;
  Tensor slide({3, h, w});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) slide[(c * h + y) * w + x] = static_cast<double>(x) / w;
  // Predictor: constant map equal to the tile's top-left pixel of channel 0.
  auto predictor = [&](const Tensor& tile) {
    Tensor out({patch, patch});
    out.fill(tile[0]);
    return out;
  };

  SUBCASE("stride == patch: tiles land disjointly, no averaging") {
    Tensor probs = stitch_probabilities(slide, patch, patch, predictor);
    for (int x = 0; x < w; ++x) {
      const double expect = static_cast<double>((x / patch) * patch) / w;
      CHECK(probs[x] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  SUBCASE("two-tile overlap averages the contributions") {
    // width 12, stride 4: tiles at x0 = 0 and 4; columns 4..7 see both.
    const int w2 = 12;
    Tensor narrow({3, h, w2});
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w2; ++x) narrow[(c * h + y) * w2 + x] = static_cast<double>(x);
    Tensor probs = stitch_probabilities(narrow, patch, 4, predictor);
    CHECK(probs[2] == doctest::Approx(0.0));             // tile 0 only
    CHECK(probs[5] == doctest::Approx((0.0 + 4.0) / 2));  // both tiles
    CHECK(probs[10] == doctest::Approx(4.0));            // tile 1 only
  }
  SUBCASE("flush tiles cover indivisible extents completely") {
    const int w3 = 21;  // not a multiple of the stride
    Tensor odd({3, h, w3});
    Tensor probs = stitch_probabilities(odd, patch, patch, predictor);
    CHECK(probs.numel() == h * w3);  // every pixel averaged at least once
    CHECK(probs.all_finite());
  }
  SUBCASE("patch larger than the slide is rejected") {
    CHECK_THROWS_AS(stitch_probabilities(slide, 64, 8, predictor), Error);
  }
}

TEST_CASE("stitch_to_file writes a slide-level {0,255} mask") {
  auto dir = temp_dir();
  Manifest manifest = synthesize_dataset((dir / "cohort").string(), 6, 1, 32, 41, 0.1);
  TrainResult res = train_model(tiny_model(), tiny_train(1), manifest, (dir / "run").string());
  auto model = load_model_from_checkpoint(res.checkpoint_path);

  SynthPatch big = synthesize_patch(77, 64, {2, 3}, 0.1);
  write_raster((dir / "slide.ppm").string(), big.image);
  stitch_to_file(*model, (dir / "slide.ppm").string(), 32, 16, (dir / "mask.pgm").string());
  Raster mask = read_raster((dir / "mask.pgm").string());
  CHECK(mask.width == 64);
  CHECK(mask.height == 64);
  for (uint8_t v : mask.px) CHECK((v == 0 || v == 255));
  fs::remove_all(dir);
}
