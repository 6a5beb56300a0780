#include "train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "core/error.hpp"
#include "losses.hpp"

namespace fs = std::filesystem;

namespace nseg {

double poly_lr(int64_t step, int64_t total_steps, double lr0, double p) {
  check(total_steps > 0, Errc::range, "poly_lr: total_steps must be positive");
  check(step >= 0 && step <= total_steps, Errc::range,
        "poly_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) +
            "]");
  return lr0 * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total_steps), p);
}

Optimizer::Optimizer(const TrainConfig& cfg)
    : kind_(cfg.optimizer), momentum_(cfg.momentum), weight_decay_(cfg.weight_decay) {}

void Optimizer::step(ParamStore& store, double lr) {
  ++t_;
  for (auto& [name, entry] : store.params()) {
    if (!entry.trainable) continue;
    Tensor& value = entry.var->value;
    Tensor& grad = entry.var->g();
    if (kind_ == OptimizerKind::sgd_nesterov) {
      Tensor& buf = m_.try_emplace(name, Tensor::zeros(value.shape())).first->second;
      for (int64_t i = 0; i < value.numel(); ++i) {
        const double g = grad[i] + weight_decay_ * value[i];
        buf[i] = momentum_ * buf[i] + g;
        value[i] -= lr * (g + momentum_ * buf[i]);
      }
    } else {
      const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
      Tensor& m = m_.try_emplace(name, Tensor::zeros(value.shape())).first->second;
      Tensor& v = v_.try_emplace(name, Tensor::zeros(value.shape())).first->second;
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
      for (int64_t i = 0; i < value.numel(); ++i) {
        const double g = grad[i] + weight_decay_ * value[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
      }
    }
  }
}

namespace {

Tensor mask_to_tensor(const BinMask& m) {
  Tensor t({1, m.h, m.w});
  for (int64_t i = 0; i < m.h * m.w; ++i) t[i] = m.v[static_cast<size_t>(i)];
  return t;
}

struct Batch {
  Tensor images;  // [B,3,S,S]
  Tensor masks;   // [B,S,S]
};

Batch assemble_batch(const std::vector<LoadedPatch>& cache, const std::vector<size_t>& idx,
                     size_t from, size_t to, int input_size) {
  const int64_t b = static_cast<int64_t>(to - from);
  Batch out;
  out.images = Tensor({b, 3, input_size, input_size});
  out.masks = Tensor({b, input_size, input_size});
  const int64_t img_n = 3LL * input_size * input_size;
  const int64_t mask_n = 1LL * input_size * input_size;
  for (size_t k = from; k < to; ++k) {
    const LoadedPatch& p = cache[idx[k]];
    const int64_t bi = static_cast<int64_t>(k - from);
    std::copy(p.image.data(), p.image.data() + img_n, out.images.data() + bi * img_n);
    for (int64_t i = 0; i < mask_n; ++i)
      out.masks[bi * mask_n + i] = p.mask.v[static_cast<size_t>(i)];
  }
  return out;
}

// Dihedral augmentation applied jointly to image and mask.
LoadedPatch augment(const LoadedPatch& p, bool flips, bool rotations, Rng& rng) {
  LoadedPatch out = p;
  const int s = static_cast<int>(p.mask.h);
  auto apply = [&](auto&& map_xy) {
    LoadedPatch next;
    next.image = Tensor({3, s, s});
    next.mask = BinMask::make(s, s);
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        auto [sy, sx] = map_xy(y, x);
        for (int c = 0; c < 3; ++c)
          next.image[(static_cast<int64_t>(c) * s + y) * s + x] =
              out.image[(static_cast<int64_t>(c) * s + sy) * s + sx];
        next.mask.v[static_cast<size_t>(y * s + x)] = out.mask.v[static_cast<size_t>(sy * s + sx)];
      }
    out = std::move(next);
  };
  if (flips && rng.uniform() < 0.5)
    apply([&](int y, int x) { return std::pair<int, int>(y, s - 1 - x); });
  if (flips && rng.uniform() < 0.5)
    apply([&](int y, int x) { return std::pair<int, int>(s - 1 - y, x); });
  if (rotations) {
    const int64_t k = rng.randint(0, 4);
    for (int64_t r = 0; r < k; ++r)
      apply([&](int y, int x) { return std::pair<int, int>(s - 1 - x, y); });
  }
  return out;
}

}  // namespace

MetricReport evaluate_model(Model& model, const std::vector<PatchRecord>& records) {
  check(!records.empty(), Errc::empty_split, "evaluation split is empty");
  const int s = model.cfg().input_size;
  std::vector<MetricRow> rows;
  for (const auto& rec : records) {
    LoadedPatch p = load_patch(rec, s);
    Tensor batch({1, 3, s, s});
    std::copy(p.image.data(), p.image.data() + p.image.numel(), batch.data());
    ag::NoGrad guard;
    ag::Var logits = model.forward(batch, /*training=*/false);
    Tensor single({logits->value.dim(1), logits->value.dim(2), logits->value.dim(3)});
    std::copy(logits->value.data(), logits->value.data() + single.numel(), single.data());
    BinMask pred = binarize(single, model.cfg().loss_variant);
    rows.push_back(metrics_row(rec.patch_id, confusion(pred, p.mask)));
  }
  return aggregate(std::move(rows));
}

TrainResult train_model(const ModelConfig& mcfg, const TrainConfig& tcfg,
                        const Manifest& manifest, const std::string& out_dir) {
  auto violations = validate_config(mcfg, tcfg);
  if (!violations.empty())
    fail(Errc::validation,
         "train: invalid config: " + violations.front().field + ": " + violations.front().message);
  std::vector<PatchRecord> train_recs = manifest.split_records(Split::train);
  std::vector<PatchRecord> val_recs = manifest.split_records(Split::val);
  check(!train_recs.empty(), Errc::empty_split, "train split is empty");
  check(!val_recs.empty(), Errc::empty_split, "val split is empty");

  fs::create_directories(out_dir);
  std::ofstream step_log(fs::path(out_dir) / "runlog_steps.csv");
  std::ofstream epoch_log(fs::path(out_dir) / "runlog_epochs.csv");
  check(step_log.good() && epoch_log.good(), Errc::io, "cannot write run logs in " + out_dir);
  step_log.precision(17);
  epoch_log.precision(10);
  step_log << "step,lr,loss\n";
  epoch_log << "epoch,train_loss_mean,val_dice,checkpoint_written\n";

  Model model(mcfg, tcfg.seed);
  const std::string backbone_fp_before = model.backbone_digest();

  std::vector<LoadedPatch> cache;
  cache.reserve(train_recs.size());
  for (const auto& r : train_recs) cache.push_back(load_patch(r, mcfg.input_size));

  const int64_t n_train = static_cast<int64_t>(train_recs.size());
  const int64_t steps_per_epoch = (n_train + tcfg.batch_size - 1) / tcfg.batch_size;
  const int64_t total_steps = steps_per_epoch * tcfg.epochs;

  Optimizer opt(tcfg);
  TrainResult result;
  result.total_steps = total_steps;
  const std::string ckpt_path = (fs::path(out_dir) / "checkpoint_best.nsckpt").string();
  double best_val = -1.0;
  int64_t step = 0;

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::vector<size_t> order(static_cast<size_t>(n_train));
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng epoch_rng(tcfg.seed ^ (0x5EEDBA5Eull + static_cast<uint64_t>(epoch) * 0x9E3779B97F4A7C15ull));
    epoch_rng.shuffle(order);

    double epoch_loss = 0.0;
    int64_t epoch_batches = 0;
    for (int64_t b = 0; b < steps_per_epoch; ++b, ++step) {
      const size_t from = static_cast<size_t>(b * tcfg.batch_size);
      const size_t to = std::min(static_cast<size_t>(n_train), from + tcfg.batch_size);
      Batch batch;
      if (tcfg.augment_flips || tcfg.augment_rotations) {
        std::vector<LoadedPatch> aug;
        std::vector<size_t> idx;
        for (size_t k = from; k < to; ++k) {
          aug.push_back(augment(cache[order[k]], tcfg.augment_flips, tcfg.augment_rotations,
                                epoch_rng));
          idx.push_back(aug.size() - 1);
        }
        batch = assemble_batch(aug, idx, 0, idx.size(), mcfg.input_size);
      } else {
        batch = assemble_batch(cache, order, from, to, mcfg.input_size);
      }

      model.store().zero_grads();
      ag::Var logits = model.forward(batch.images, /*training=*/true);
      ag::Var loss = compound_loss(logits, batch.masks, mcfg.loss_variant);
      if (mcfg.orthogonality_penalty > 0.0)
        loss = ag::add(loss, ag::mul_scalar(model.fapm().orthogonality_penalty(),
                                            mcfg.orthogonality_penalty));
      const double loss_v = ag::scalar(loss);
      if (!std::isfinite(loss_v))
        fail(Errc::diverged, "non-finite loss at step " + std::to_string(step) + " (epoch " +
                                 std::to_string(epoch) + ")");
      ag::backward(loss);
      const double lr = poly_lr(step, total_steps, tcfg.lr0, tcfg.poly_exponent);
      opt.step(model.store(), lr);

      step_log << step << "," << lr << "," << loss_v << "\n";
      result.step_losses.push_back(loss_v);
      epoch_loss += loss_v;
      ++epoch_batches;
    }

    MetricReport val = evaluate_model(model, val_recs);
    const double val_dice = val.dice.mean;
    bool wrote = false;
    if (val_dice > best_val) {
      best_val = val_dice;
      CheckpointMeta meta;
      meta.epoch = epoch;
      meta.val_dice = val_dice;
      meta.param_digest = model.digest();
      meta.model = mcfg;
      meta.train = tcfg;
      write_checkpoint(ckpt_path, model.store(), meta);
      result.best = meta;
      result.persisted_val_dice.push_back(val_dice);
      wrote = true;
    }
    epoch_log << epoch << "," << epoch_loss / static_cast<double>(epoch_batches) << "," << val_dice
              << "," << (wrote ? 1 : 0) << "\n";
    result.final_train_loss = epoch_loss / static_cast<double>(epoch_batches);
  }

  check(model.backbone_digest() == backbone_fp_before, Errc::validation,
        "frozen-backbone contract violated: backbone digest changed during training");

  result.checkpoint_path = ckpt_path;
  result.backbone_digest = model.backbone_digest();
  nlohmann::json j;
  j["checkpoint"] = ckpt_path;
  j["persisted_val_dice"] = result.persisted_val_dice;
  j["best_epoch"] = result.best.epoch;
  j["best_val_dice"] = result.best.val_dice;
  j["total_steps"] = result.total_steps;
  j["final_train_loss"] = result.final_train_loss;
  j["backbone_digest"] = model.backbone_digest();
  std::ofstream(fs::path(out_dir) / "runlog.json") << j.dump(2) << "\n";
  return result;
}

std::unique_ptr<Model> load_model_from_checkpoint(const std::string& path,
                                                  CheckpointMeta* meta_out) {
  CheckpointMeta meta = read_checkpoint_meta(path);
  ModelConfig cfg = meta.model;
  // Parameters come from the checkpoint itself; do not re-read the original
  // backbone weights file.
  cfg.backbone_kind = BackboneKind::stub;
  cfg.backbone_weights.clear();
  auto model = std::make_unique<Model>(cfg, meta.train.seed);
  read_checkpoint_params(path, model->store());
  if (meta_out) *meta_out = meta;
  return model;
}

EvalOutput evaluate_checkpoint(const std::string& checkpoint_path, const Manifest& manifest,
                               Split split, bool zero_shot, const ModelConfig* expected) {
  EvalOutput out;
  auto model = load_model_from_checkpoint(checkpoint_path, &out.meta);
  if (expected) {
    check(*expected == out.meta.model, Errc::config_mismatch,
          "checkpoint config snapshot does not match the requested config");
  }
  const std::string digest_before = model->digest();
  out.report = evaluate_model(*model, manifest.split_records(split));
  const std::string digest_after = model->digest();
  check(digest_before == digest_after, Errc::validation,
        "evaluation mutated parameters (digest changed)");
  out.report.split = to_string(split);
  out.report.zero_shot = zero_shot;
  out.report.param_digest = digest_after;
  return out;
}

void predict_to_file(Model& model, const std::string& image_path,
                     const std::string& out_mask_path) {
  Raster img = read_raster(image_path);
  check(img.channels == 3, Errc::parse, "predict: image must be 3-channel: " + image_path);
  Tensor chw = raster_to_tensor(img);
  const int s = model.cfg().input_size;
  Tensor resized = resize_bilinear_chw(chw, s, s);
  Tensor batch({1, 3, s, s});
  std::copy(resized.data(), resized.data() + resized.numel(), batch.data());
  Tensor probs = model.predict_probs(batch);  // [1,S,S]
  Tensor prob_chw({1, s, s});
  std::copy(probs.data(), probs.data() + probs.numel(), prob_chw.data());
  Tensor back = resize_bilinear_chw(prob_chw, img.height, img.width);
  Raster mask = Raster::make(img.width, img.height, 1);
  for (int64_t i = 0; i < back.numel(); ++i)
    mask.px[static_cast<size_t>(i)] = back[i] > 0.5 ? 255 : 0;
  write_raster(out_mask_path, mask);
}

Tensor stitch_probabilities(const Tensor& slide_chw, int patch_size, int stride,
                            const std::function<Tensor(const Tensor&)>& predictor) {
  check(slide_chw.rank() == 3 && slide_chw.dim(0) == 3, Errc::shape,
        "stitch: slide must be [3,H,W]");
  const int h = static_cast<int>(slide_chw.dim(1));
  const int w = static_cast<int>(slide_chw.dim(2));
  check(patch_size > 0 && stride > 0, Errc::shape, "stitch: bad patch/stride");
  check(patch_size <= h && patch_size <= w, Errc::shape, "stitch: patch larger than slide");

  auto positions = [&](int extent) {
    std::vector<int> xs;
    for (int p = 0; p + patch_size <= extent; p += stride) xs.push_back(p);
    const int flush = extent - patch_size;
    if (xs.empty() || xs.back() != flush) xs.push_back(flush);
    return xs;
  };
  Tensor sum({h, w}), cnt({h, w});
  for (int y0 : positions(h)) {
    for (int x0 : positions(w)) {
      Tensor tile({3, patch_size, patch_size});
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < patch_size; ++y)
          for (int x = 0; x < patch_size; ++x)
            tile[(static_cast<int64_t>(c) * patch_size + y) * patch_size + x] =
                slide_chw[(static_cast<int64_t>(c) * h + y0 + y) * w + x0 + x];
      Tensor probs = predictor(tile);
      check(probs.rank() == 2 && probs.dim(0) == patch_size && probs.dim(1) == patch_size,
            Errc::shape, "stitch: predictor must return [patch,patch] probabilities");
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x) {
          sum[static_cast<int64_t>(y0 + y) * w + x0 + x] +=
              probs[static_cast<int64_t>(y) * patch_size + x];
          cnt[static_cast<int64_t>(y0 + y) * w + x0 + x] += 1.0;
        }
    }
  }
  Tensor avg({h, w});
  for (int64_t i = 0; i < avg.numel(); ++i) avg[i] = sum[i] / cnt[i];
  return avg;
}

void stitch_to_file(Model& model, const std::string& slide_path, int patch_size, int stride,
                    const std::string& out_mask_path) {
  Raster slide = read_raster(slide_path);
  check(slide.channels == 3, Errc::parse, "stitch: slide must be 3-channel: " + slide_path);
  Tensor chw = raster_to_tensor(slide);
  const int s = model.cfg().input_size;
  auto predictor = [&](const Tensor& tile) {
    Tensor resized = resize_bilinear_chw(tile, s, s);
    Tensor batch({1, 3, s, s});
    std::copy(resized.data(), resized.data() + resized.numel(), batch.data());
    Tensor probs = model.predict_probs(batch);
    Tensor prob_chw({1, s, s});
    std::copy(probs.data(), probs.data() + probs.numel(), prob_chw.data());
    Tensor back = resize_bilinear_chw(prob_chw, static_cast<int>(tile.dim(1)),
                                      static_cast<int>(tile.dim(2)));
    Tensor out({tile.dim(1), tile.dim(2)});
    std::copy(back.data(), back.data() + back.numel(), out.data());
    return out;
  };
  Tensor avg = stitch_probabilities(chw, patch_size, stride, predictor);
  Raster mask = Raster::make(slide.width, slide.height, 1);
  for (int64_t i = 0; i < avg.numel(); ++i)
    mask.px[static_cast<size_t>(i)] = avg[i] > 0.5 ? 255 : 0;
  write_raster(out_mask_path, mask);
}

}  // namespace nseg
