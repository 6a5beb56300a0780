#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>

#include "data.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "serialize.hpp"

namespace nseg {

// lr0 * (1 - step/total_steps)^p; Errc::range outside [0, total_steps].
double poly_lr(int64_t step, int64_t total_steps, double lr0, double p);

// SGD with Nesterov momentum (weight decay added to the gradient) or Adam
// with bias correction. Only trainable parameters are touched.
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg);
  void step(ParamStore& store, double lr);

 private:
  OptimizerKind kind_;
  double momentum_, weight_decay_;
  int64_t t_ = 0;
  std::map<std::string, Tensor> m_;  // sgd velocity / adam first moment
  std::map<std::string, Tensor> v_;  // adam second moment
};

struct TrainResult {
  CheckpointMeta best;
  std::string checkpoint_path;
  std::string backbone_digest;
  std::vector<double> persisted_val_dice;  // one entry per checkpoint write
  std::vector<double> step_losses;
  double final_train_loss = 0.0;
  int64_t total_steps = 0;
};

// Full training protocol: epoch loop over the train split, per-step poly
// schedule, frozen backbone, best-val-Dice checkpointing, run log persisted
// under out_dir. Errc::empty_split when train or val is empty; Errc::diverged
// aborts on a non-finite loss.
TrainResult train_model(const ModelConfig& mcfg, const TrainConfig& tcfg,
                        const Manifest& manifest, const std::string& out_dir);

// Patch-by-patch inference + exact pixel metrics over one split.
MetricReport evaluate_model(Model& model, const std::vector<PatchRecord>& records);

std::unique_ptr<Model> load_model_from_checkpoint(const std::string& path,
                                                  CheckpointMeta* meta_out = nullptr);

struct EvalOutput {
  MetricReport report;
  CheckpointMeta meta;
};
// `expected` (when given) must match the checkpoint's config snapshot
// (Errc::config_mismatch otherwise). zero_shot additionally asserts that the
// parameter digest is unchanged by the run and tags the report.
EvalOutput evaluate_checkpoint(const std::string& checkpoint_path, const Manifest& manifest,
                               Split split, bool zero_shot = false,
                               const ModelConfig* expected = nullptr);

// Writes a {0,255} mask at the source image's resolution.
void predict_to_file(Model& model, const std::string& image_path,
                     const std::string& out_mask_path);

// Tiles the slide (grid positions plus flush right/bottom tiles so every
// pixel is covered), averages probabilities where tiles overlap, binarizes
// once at the end. The predictor maps a [3,p,p] tile to a [p,p] probability
// map; the model-backed version handles resizing to the network input.
Tensor stitch_probabilities(const Tensor& slide_chw, int patch_size, int stride,
                            const std::function<Tensor(const Tensor&)>& predictor);
void stitch_to_file(Model& model, const std::string& slide_path, int patch_size, int stride,
                    const std::string& out_mask_path);

}  // namespace nseg
