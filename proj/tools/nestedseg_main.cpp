// Command-line front end. Links only the public C API.

#include <cinttypes>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nestedseg/nestedseg.h"

namespace {

int finish(nseg_status st) {
  if (st != NSEG_OK) std::fprintf(stderr, "error: %s\n", nseg_last_error());
  return static_cast<int>(st);
}

struct ConfigHandle {
  nseg_config* cfg = nullptr;
  ~ConfigHandle() { nseg_config_free(cfg); }
};

struct ModelHandle {
  nseg_model* model = nullptr;
  ~ModelHandle() { nseg_model_free(model); }
};

void print_eval(const char* tag, const nseg_eval_summary& s) {
  std::printf("%s: n=%" PRId64 " mDice=%.4f mIoU=%.4f recall=%.4f precision=%.4f accuracy=%.4f\n",
              tag, s.n_patches, s.mdice, s.miou, s.mrecall, s.mprecision, s.maccuracy);
  if (s.zero_shot) std::printf("zero-shot run, parameter digest %s (unchanged)\n", s.param_digest);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nestedseg: tumor-bulk segmentation with a frozen ViT encoder, "
               "fidelity-aware projection and a nested dense decoder"};
  app.require_subcommand(1);

  std::string config_path, manifest_path, checkpoint_path, out_path, split = "test";
  std::string image_path, slide_path, name = "synthetic";
  std::vector<std::string> report_paths;
  uint64_t seed = 0;
  bool seed_given = false;
  bool deterministic = false;
  int slides = 12, patches = 4, size = 64, patch_size = 256, stride = 256, overlays = 4;
  double noise = 0.15;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_flag("--deterministic", deterministic,
                  "fix all RNG streams (execution is single-threaded and deterministic either "
                  "way; the flag pins seed defaults)");
  };

  auto* c_train = app.add_subcommand("train", "train a model on a manifest");
  c_train->add_option("--config", config_path)->required();
  c_train->add_option("--manifest", manifest_path)->required();
  c_train->add_option("--out", out_path)->required();
  c_train->add_option("--seed", seed)->each([&](const std::string&) { seed_given = true; });
  add_common(c_train);

  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on one split");
  c_eval->add_option("--checkpoint", checkpoint_path)->required();
  c_eval->add_option("--manifest", manifest_path)->required();
  c_eval->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  c_eval->add_option("--out", out_path);
  add_common(c_eval);

  auto* c_xeval = app.add_subcommand("xeval", "zero-shot evaluation on an external cohort");
  c_xeval->add_option("--checkpoint", checkpoint_path)->required();
  c_xeval->add_option("--manifest", manifest_path)->required();
  c_xeval->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  c_xeval->add_option("--out", out_path);
  add_common(c_xeval);

  auto* c_predict = app.add_subcommand("predict", "segment one image to a {0,255} mask");
  c_predict->add_option("--checkpoint", checkpoint_path)->required();
  c_predict->add_option("--image", image_path)->required();
  c_predict->add_option("--out", out_path)->required();
  add_common(c_predict);

  auto* c_stitch = app.add_subcommand("stitch", "tile a slide image into one stitched mask");
  c_stitch->add_option("--checkpoint", checkpoint_path)->required();
  c_stitch->add_option("--slide", slide_path)->required();
  c_stitch->add_option("--patch", patch_size);
  c_stitch->add_option("--stride", stride);
  c_stitch->add_option("--out", out_path)->required();
  add_common(c_stitch);

  auto* c_synth = app.add_subcommand("synth", "emit a synthetic dataset + manifest");
  c_synth->add_option("--out", out_path)->required();
  c_synth->add_option("--slides", slides);
  c_synth->add_option("--patches", patches, "patches per slide");
  c_synth->add_option("--size", size, "patch side in pixels");
  c_synth->add_option("--seed", seed);
  c_synth->add_option("--noise", noise);
  c_synth->add_option("--name", name);
  add_common(c_synth);

  auto* c_report = app.add_subcommand("report", "emit boxplot and overlay figures");
  c_report->add_option("--out", out_path)->required();
  c_report->add_option("--checkpoint", checkpoint_path);
  c_report->add_option("--manifest", manifest_path);
  c_report->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  c_report->add_option("--overlays", overlays);
  c_report->add_option("--report", report_paths, "existing report CSVs (one box each)");
  add_common(c_report);

  CLI11_PARSE(app, argc, argv);

  if (c_train->parsed()) {
    ConfigHandle cfg;
    nseg_status st = nseg_config_load(config_path.c_str(), &cfg.cfg);
    if (st != NSEG_OK) return finish(st);
    if (seed_given) nseg_config_set_seed(cfg.cfg, seed);
    nseg_train_summary summary{};
    st = nseg_train(cfg.cfg, manifest_path.c_str(), out_path.c_str(), &summary);
    if (st != NSEG_OK) return finish(st);
    std::printf("best val Dice %.4f at epoch %d (%" PRId64 " steps)\n", summary.best_val_dice,
                summary.best_epoch, summary.total_steps);
    std::printf("checkpoint: %s\nbackbone digest: %s\n", summary.checkpoint_path,
                summary.backbone_digest);
    return finish(NSEG_OK);
  }

  if (c_eval->parsed() || c_xeval->parsed()) {
    const bool zero_shot = c_xeval->parsed();
    nseg_eval_summary summary{};
    nseg_status st =
        nseg_evaluate(checkpoint_path.c_str(), manifest_path.c_str(), split.c_str(),
                      out_path.empty() ? nullptr : out_path.c_str(), zero_shot ? 1 : 0, &summary);
    if (st != NSEG_OK) return finish(st);
    print_eval(zero_shot ? "xeval" : "eval", summary);
    return finish(NSEG_OK);
  }

  if (c_predict->parsed() || c_stitch->parsed()) {
    ModelHandle handle;
    nseg_status st = nseg_model_load(checkpoint_path.c_str(), &handle.model);
    if (st != NSEG_OK) return finish(st);
    if (c_predict->parsed())
      st = nseg_predict(handle.model, image_path.c_str(), out_path.c_str());
    else
      st = nseg_stitch(handle.model, slide_path.c_str(), patch_size, stride, out_path.c_str());
    if (st != NSEG_OK) return finish(st);
    std::printf("wrote %s\n", out_path.c_str());
    return finish(NSEG_OK);
  }

  if (c_synth->parsed()) {
    nseg_status st =
        nseg_synth_dataset(out_path.c_str(), slides, patches, size, seed, noise, name.c_str());
    if (st != NSEG_OK) return finish(st);
    std::printf("wrote synthetic cohort '%s' (%d slides x %d patches) under %s\n", name.c_str(),
                slides, patches, out_path.c_str());
    return finish(NSEG_OK);
  }

  if (c_report->parsed()) {
    if (!report_paths.empty()) {
      std::vector<const char*> ptrs;
      for (const auto& p : report_paths) ptrs.push_back(p.c_str());
      const std::string plot = out_path + "/boxplot.ppm";
      nseg_status st = nseg_boxplot_from_reports(ptrs.data(), static_cast<int>(ptrs.size()),
                                                 plot.c_str());
      if (st != NSEG_OK) return finish(st);
      std::printf("wrote %s\n", plot.c_str());
      return finish(NSEG_OK);
    }
    if (checkpoint_path.empty() || manifest_path.empty()) {
      std::fprintf(stderr, "error: report needs either --report files or --checkpoint with "
                           "--manifest\n");
      return static_cast<int>(NSEG_ERR_VALIDATION);
    }
    nseg_status st = nseg_report_plots(checkpoint_path.c_str(), manifest_path.c_str(),
                                       split.c_str(), out_path.c_str(), overlays);
    if (st != NSEG_OK) return finish(st);
    std::printf("wrote figures under %s\n", out_path.c_str());
    return finish(NSEG_OK);
  }

  return finish(NSEG_OK);
}
