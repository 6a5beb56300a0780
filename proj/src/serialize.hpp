#pragma once

#include <string>

#include "config.hpp"
#include "core/nn.hpp"

namespace nseg {

// Both containers share one layout: an 8-byte magic, a little-endian u64
// header length, a JSON header describing metadata and tensor entries, then
// the raw float64 payloads in header order.
inline constexpr char kWeightsMagic[] = "NSEGTNS1";  // bare parameter container
inline constexpr char kCheckpointMagic[] = "NSEGCKP1";

struct CheckpointMeta {
  int epoch = 0;
  double val_dice = 0.0;
  std::string param_digest;
  ModelConfig model;
  TrainConfig train;
};

// Bare parameter container (backbone weights files). `meta_json` is free-form.
void write_param_file(const std::string& path, const ParamStore& store,
                      const std::string& meta_json);
// Loads tensors into an empty store (all entries non-trainable); returns meta.
std::string read_param_file(const std::string& path, ParamStore& store);

void write_checkpoint(const std::string& path, const ParamStore& store,
                      const CheckpointMeta& meta);
// Loads tensor values into a store laid out by the checkpoint's own config;
// the caller builds the model from meta.model first, then fills it.
CheckpointMeta read_checkpoint_meta(const std::string& path);
void read_checkpoint_params(const std::string& path, ParamStore& store);

}  // namespace nseg
