#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace nseg {

enum class BackboneKind { stub, pretrained_vit };
enum class LossVariant { standard, bce };
enum class OptimizerKind { sgd_nesterov, adam };

std::string to_string(BackboneKind k);
std::string to_string(LossVariant v);
std::string to_string(OptimizerKind o);

// Architecture hyperparameters. Immutable once loaded; every other module
// consumes a validated copy.
struct ModelConfig {
  int input_size = 1024;
  int num_scales = 4;
  std::vector<int> scale_strides = {4, 8, 16, 32};
  BackboneKind backbone_kind = BackboneKind::stub;
  int backbone_embed_dim = 384;
  int backbone_patch_size = 16;
  int backbone_blocks = 12;
  std::string backbone_weights;  // required for pretrained_vit
  int adapter_width = 96;        // channels of the SPM / interaction stream
  std::vector<int> decoder_widths = {8, 16, 32, 64};
  int num_classes = 1;
  LossVariant loss_variant = LossVariant::bce;
  int attention_heads = 6;
  int sampling_points = 4;
  double orthogonality_penalty = 0.0;  // 0 disables the regularizer
  bool deep_supervision = false;       // reserved, must stay false

  bool operator==(const ModelConfig&) const = default;

  static ModelConfig desk_scale();   // input 256, runs on one CPU core
  static ModelConfig paper_scale();  // widths [64,128,256,512], input 1024
};

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::sgd_nesterov;
  double lr0 = 1e-4;          // adam default 3e-4
  double momentum = 0.99;     // sgd only
  double weight_decay = 3e-5; // adam default 1e-4
  double poly_exponent = 0.9;
  int epochs = 100;
  int batch_size = 8;
  uint64_t seed = 0;
  bool augment_flips = false;
  bool augment_rotations = false;

  bool operator==(const TrainConfig&) const = default;
};

struct Violation {
  std::string field;
  std::string message;
  bool operator==(const Violation&) const = default;
};

// Pure: same configs always yield the same list; empty list == valid.
std::vector<Violation> validate_config(const ModelConfig& m, const TrainConfig& t);

// Parses the `[model]` / `[train]` key=value file; fills documented defaults;
// throws Errc::parse on malformed input or unknown keys, Errc::validation when
// an invariant fails (message names the field).
std::pair<ModelConfig, TrainConfig> load_config(const std::string& path);
std::pair<ModelConfig, TrainConfig> parse_config_text(const std::string& text);

std::string config_to_text(const ModelConfig& m, const TrainConfig& t);
void save_config(const std::string& path, const ModelConfig& m, const TrainConfig& t);

}  // namespace nseg
