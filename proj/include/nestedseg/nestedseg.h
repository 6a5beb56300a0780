#ifndef NESTEDSEG_H
#define NESTEDSEG_H

/*
 * C API for the nestedseg segmentation library. All functions return
 * nseg_status; on failure nseg_last_error() holds a thread-local message.
 * Status values double as process exit codes for the bundled CLI.
 */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum nseg_status {
  NSEG_OK = 0,
  NSEG_ERR_VALIDATION = 2, /* bad config, shapes, arguments, file contents */
  NSEG_ERR_DIVERGED = 3,   /* non-finite training loss */
  NSEG_ERR_IO = 4          /* missing files, write failures */
} nseg_status;

typedef struct nseg_config nseg_config; /* model + training configuration */
typedef struct nseg_model nseg_model;   /* network loaded from a checkpoint */

const char* nseg_version(void);
const char* nseg_last_error(void);

/* -------- configuration -------- */

nseg_status nseg_config_load(const char* path, nseg_config** out);
nseg_status nseg_config_default(nseg_config** out); /* desk-scale defaults */
nseg_status nseg_config_save(const nseg_config* cfg, const char* path);
/* Writes newline-separated violations into buf (may be NULL to query only);
 * *n_violations receives the count, 0 == valid. */
nseg_status nseg_config_validate(const nseg_config* cfg, char* buf, size_t buf_len,
                                 int* n_violations);
nseg_status nseg_config_set_seed(nseg_config* cfg, uint64_t seed);
void nseg_config_free(nseg_config* cfg);

/* -------- synthetic data -------- */

nseg_status nseg_synth_dataset(const char* out_dir, int slides, int patches_per_slide, int size,
                               uint64_t seed, double noise_level, const char* name);

/* -------- training -------- */

typedef struct nseg_train_summary {
  double best_val_dice;
  int best_epoch;
  int64_t total_steps;
  double final_train_loss;
  char checkpoint_path[1024];
  char backbone_digest[32];
} nseg_train_summary;

nseg_status nseg_train(const nseg_config* cfg, const char* manifest_path, const char* out_dir,
                       nseg_train_summary* out);

/* -------- evaluation -------- */

typedef struct nseg_eval_summary {
  double mdice, mrecall, mprecision, maccuracy, miou;
  double sdice, srecall, sprecision, saccuracy, siou; /* sample std dev */
  int64_t n_patches;
  int zero_shot;
  char param_digest[32];
} nseg_eval_summary;

/* split is "train", "val" or "test". When out_dir is non-NULL, writes
 * report_<split>.csv and summary_<split>.json there. zero_shot != 0 asserts
 * the parameter digest is unchanged by the run and tags the report. */
nseg_status nseg_evaluate(const char* checkpoint, const char* manifest, const char* split,
                          const char* out_dir, int zero_shot, nseg_eval_summary* out);

/* -------- inference -------- */

nseg_status nseg_model_load(const char* checkpoint, nseg_model** out);
void nseg_model_free(nseg_model* model);
nseg_status nseg_model_digest(const nseg_model* model, char* buf, size_t buf_len);
/* Reads a 3-channel raster, writes a {0,255} single-channel mask at the
 * source resolution. */
nseg_status nseg_predict(nseg_model* model, const char* image_path, const char* out_mask_path);
/* Tiles the slide, averages probabilities in overlaps, binarizes once. */
nseg_status nseg_stitch(nseg_model* model, const char* slide_path, int patch_size, int stride,
                        const char* out_mask_path);

/* -------- reporting -------- */

/* Evaluates the split and writes boxplot.ppm, overlay_NNN.ppm panels for the
 * first overlay_count patches, and the report files, all under out_dir. */
nseg_status nseg_report_plots(const char* checkpoint, const char* manifest, const char* split,
                              const char* out_dir, int overlay_count);
/* Boxplot built from previously written report CSVs (one box per file). */
nseg_status nseg_boxplot_from_reports(const char* const* report_csv_paths, int count,
                                      const char* out_path);

#ifdef __cplusplus
}
#endif

#endif /* NESTEDSEG_H */
