#include "nestedseg/nestedseg.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "config.hpp"
#include "core/error.hpp"
#include "data.hpp"
#include "model.hpp"
#include "plots.hpp"
#include "train.hpp"

namespace fs = std::filesystem;

using namespace nseg;

struct nseg_config {
  ModelConfig model;
  TrainConfig train;
};

struct nseg_model {
  std::unique_ptr<Model> model;
  CheckpointMeta meta;
};

namespace {

thread_local std::string g_last_error;

nseg_status status_of(Errc code) {
  switch (code) {
    case Errc::diverged:
      return NSEG_ERR_DIVERGED;
    case Errc::file_not_found:
    case Errc::weights_not_found:
    case Errc::io:
      return NSEG_ERR_IO;
    default:
      return NSEG_ERR_VALIDATION;
  }
}

template <typename F>
nseg_status guarded(F&& fn) {
  try {
    fn();
    return NSEG_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return status_of(e.code());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return NSEG_ERR_VALIDATION;
  }
}

void copy_str(char* dst, size_t cap, const std::string& src) {
  if (!dst || cap == 0) return;
  const size_t n = std::min(cap - 1, src.size());
  std::memcpy(dst, src.data(), n);
  dst[n] = '\0';
}

void fill_eval_summary(const MetricReport& r, nseg_eval_summary* out) {
  if (!out) return;
  out->mdice = r.dice.mean;
  out->mrecall = r.recall.mean;
  out->mprecision = r.precision.mean;
  out->maccuracy = r.accuracy.mean;
  out->miou = r.iou.mean;
  out->sdice = r.dice.stddev;
  out->srecall = r.recall.stddev;
  out->sprecision = r.precision.stddev;
  out->saccuracy = r.accuracy.stddev;
  out->siou = r.iou.stddev;
  out->n_patches = static_cast<int64_t>(r.rows.size());
  out->zero_shot = r.zero_shot ? 1 : 0;
  copy_str(out->param_digest, sizeof(out->param_digest), r.param_digest);
}

void write_report_files(const MetricReport& r, const std::string& out_dir,
                        const std::string& split) {
  fs::create_directories(out_dir);
  std::ofstream csv(fs::path(out_dir) / ("report_" + split + ".csv"));
  check(csv.good(), Errc::io, "cannot write report CSV in " + out_dir);
  csv << r.to_csv();
  std::ofstream json(fs::path(out_dir) / ("summary_" + split + ".json"));
  check(json.good(), Errc::io, "cannot write summary JSON in " + out_dir);
  json << r.to_json() << "\n";
}

}  // namespace

extern "C" {

const char* nseg_version(void) { return "0.1.0"; }

const char* nseg_last_error(void) { return g_last_error.c_str(); }

nseg_status nseg_config_load(const char* path, nseg_config** out) {
  return guarded([&] {
    check(path && out, Errc::validation, "nseg_config_load: null argument");
    auto [m, t] = load_config(path);
    *out = new nseg_config{m, t};
  });
}

nseg_status nseg_config_default(nseg_config** out) {
  return guarded([&] {
    check(out != nullptr, Errc::validation, "nseg_config_default: null argument");
    *out = new nseg_config{ModelConfig::desk_scale(), TrainConfig{}};
  });
}

nseg_status nseg_config_save(const nseg_config* cfg, const char* path) {
  return guarded([&] {
    check(cfg && path, Errc::validation, "nseg_config_save: null argument");
    save_config(path, cfg->model, cfg->train);
  });
}

nseg_status nseg_config_validate(const nseg_config* cfg, char* buf, size_t buf_len,
                                 int* n_violations) {
  return guarded([&] {
    check(cfg != nullptr, Errc::validation, "nseg_config_validate: null config");
    auto v = validate_config(cfg->model, cfg->train);
    if (n_violations) *n_violations = static_cast<int>(v.size());
    std::ostringstream os;
    for (const auto& viol : v) os << viol.field << ": " << viol.message << "\n";
    copy_str(buf, buf_len, os.str());
  });
}

nseg_status nseg_config_set_seed(nseg_config* cfg, uint64_t seed) {
  return guarded([&] {
    check(cfg != nullptr, Errc::validation, "nseg_config_set_seed: null config");
    cfg->train.seed = seed;
  });
}

void nseg_config_free(nseg_config* cfg) { delete cfg; }

nseg_status nseg_synth_dataset(const char* out_dir, int slides, int patches_per_slide, int size,
                               uint64_t seed, double noise_level, const char* name) {
  return guarded([&] {
    check(out_dir != nullptr, Errc::validation, "nseg_synth_dataset: null out_dir");
    synthesize_dataset(out_dir, slides, patches_per_slide, size, seed, noise_level,
                       name ? name : "synthetic");
  });
}

nseg_status nseg_train(const nseg_config* cfg, const char* manifest_path, const char* out_dir,
                       nseg_train_summary* out) {
  return guarded([&] {
    check(cfg && manifest_path && out_dir, Errc::validation, "nseg_train: null argument");
    Manifest manifest = Manifest::load(manifest_path);
    TrainResult res = train_model(cfg->model, cfg->train, manifest, out_dir);
    if (out) {
      out->best_val_dice = res.best.val_dice;
      out->best_epoch = res.best.epoch;
      out->total_steps = res.total_steps;
      out->final_train_loss = res.final_train_loss;
      copy_str(out->checkpoint_path, sizeof(out->checkpoint_path), res.checkpoint_path);
      copy_str(out->backbone_digest, sizeof(out->backbone_digest), res.backbone_digest);
    }
  });
}

nseg_status nseg_evaluate(const char* checkpoint, const char* manifest, const char* split,
                          const char* out_dir, int zero_shot, nseg_eval_summary* out) {
  return guarded([&] {
    check(checkpoint && manifest && split, Errc::validation, "nseg_evaluate: null argument");
    Manifest m = Manifest::load(manifest);
    EvalOutput eo =
        evaluate_checkpoint(checkpoint, m, split_from_string(split), zero_shot != 0);
    if (out_dir) write_report_files(eo.report, out_dir, split);
    fill_eval_summary(eo.report, out);
  });
}

nseg_status nseg_model_load(const char* checkpoint, nseg_model** out) {
  return guarded([&] {
    check(checkpoint && out, Errc::validation, "nseg_model_load: null argument");
    auto handle = std::make_unique<nseg_model>();
    handle->model = load_model_from_checkpoint(checkpoint, &handle->meta);
    *out = handle.release();
  });
}

void nseg_model_free(nseg_model* model) { delete model; }

nseg_status nseg_model_digest(const nseg_model* model, char* buf, size_t buf_len) {
  return guarded([&] {
    check(model != nullptr, Errc::validation, "nseg_model_digest: null model");
    copy_str(buf, buf_len, model->model->digest());
  });
}

nseg_status nseg_predict(nseg_model* model, const char* image_path, const char* out_mask_path) {
  return guarded([&] {
    check(model && image_path && out_mask_path, Errc::validation, "nseg_predict: null argument");
    predict_to_file(*model->model, image_path, out_mask_path);
  });
}

nseg_status nseg_stitch(nseg_model* model, const char* slide_path, int patch_size, int stride,
                        const char* out_mask_path) {
  return guarded([&] {
    check(model && slide_path && out_mask_path, Errc::validation, "nseg_stitch: null argument");
    stitch_to_file(*model->model, slide_path, patch_size, stride, out_mask_path);
  });
}

nseg_status nseg_report_plots(const char* checkpoint, const char* manifest, const char* split,
                              const char* out_dir, int overlay_count) {
  return guarded([&] {
    check(checkpoint && manifest && split && out_dir, Errc::validation,
          "nseg_report_plots: null argument");
    Manifest m = Manifest::load(manifest);
    CheckpointMeta meta;
    auto model = load_model_from_checkpoint(checkpoint, &meta);
    const Split sp = split_from_string(split);
    std::vector<PatchRecord> records = m.split_records(sp);
    check(!records.empty(), Errc::empty_split, "report: split is empty");
    fs::create_directories(out_dir);

    MetricReport report = evaluate_model(*model, records);
    report.split = split;
    report.param_digest = model->digest();
    write_report_files(report, out_dir, split);

    std::vector<double> dices;
    for (const auto& r : report.rows) dices.push_back(r.dice);
    const std::string series_name = m.name.empty() ? split : m.name;
    render_dice_boxplot({{series_name, dices}}, (fs::path(out_dir) / "boxplot.ppm").string());

    const int s = model->cfg().input_size;
    const int n_overlays = std::min<int>(overlay_count, static_cast<int>(records.size()));
    for (int i = 0; i < n_overlays; ++i) {
      LoadedPatch p = load_patch(records[static_cast<size_t>(i)], s);
      Tensor batch({1, 3, s, s});
      std::copy(p.image.data(), p.image.data() + p.image.numel(), batch.data());
      ag::NoGrad guard;
      ag::Var logits = model->forward(batch, false);
      Tensor single({logits->value.dim(1), logits->value.dim(2), logits->value.dim(3)});
      std::copy(logits->value.data(), logits->value.data() + single.numel(), single.data());
      BinMask pred = binarize(single, model->cfg().loss_variant);
      char name[64];
      std::snprintf(name, sizeof(name), "overlay_%03d.ppm", i);
      render_overlay(p.image, p.mask, pred, (fs::path(out_dir) / name).string());
    }
  });
}

nseg_status nseg_boxplot_from_reports(const char* const* report_csv_paths, int count,
                                      const char* out_path) {
  return guarded([&] {
    check(report_csv_paths && out_path && count > 0, Errc::empty_input,
          "nseg_boxplot_from_reports: no reports");
    std::vector<std::pair<std::string, std::vector<double>>> series;
    for (int i = 0; i < count; ++i) {
      std::ifstream in(report_csv_paths[i]);
      check(in.good(), Errc::file_not_found,
            std::string("report not found: ") + report_csv_paths[i]);
      std::string line;
      std::getline(in, line);  // header
      check(line.rfind("patch_id,dice", 0) == 0, Errc::parse,
            std::string("not a report CSV: ") + report_csv_paths[i]);
      std::vector<double> dices;
      while (std::getline(in, line)) {
        if (line.rfind("mean,", 0) == 0 || line.rfind("std,", 0) == 0) continue;
        const size_t c1 = line.find(',');
        const size_t c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos) continue;
        dices.push_back(std::stod(line.substr(c1 + 1, c2 - c1 - 1)));
      }
      check(!dices.empty(), Errc::empty_input,
            std::string("report has no rows: ") + report_csv_paths[i]);
      series.emplace_back(fs::path(report_csv_paths[i]).stem().string(), std::move(dices));
    }
    render_dice_boxplot(series, out_path);
  });
}

}  // extern "C"
