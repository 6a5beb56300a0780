#include "serialize.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "core/error.hpp"

namespace nseg {

namespace {

using nlohmann::json;

json config_to_json(const ModelConfig& m, const TrainConfig& t) {
  json j;
  j["model"] = {{"input_size", m.input_size},
                {"num_scales", m.num_scales},
                {"scale_strides", m.scale_strides},
                {"backbone_kind", to_string(m.backbone_kind)},
                {"backbone_embed_dim", m.backbone_embed_dim},
                {"backbone_patch_size", m.backbone_patch_size},
                {"backbone_blocks", m.backbone_blocks},
                {"backbone_weights", m.backbone_weights},
                {"adapter_width", m.adapter_width},
                {"decoder_widths", m.decoder_widths},
                {"num_classes", m.num_classes},
                {"loss_variant", to_string(m.loss_variant)},
                {"attention_heads", m.attention_heads},
                {"sampling_points", m.sampling_points},
                {"orthogonality_penalty", m.orthogonality_penalty},
                {"deep_supervision", m.deep_supervision}};
  j["train"] = {{"optimizer", to_string(t.optimizer)},
                {"lr0", t.lr0},
                {"momentum", t.momentum},
                {"weight_decay", t.weight_decay},
                {"poly_exponent", t.poly_exponent},
                {"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"seed", t.seed},
                {"augment_flips", t.augment_flips},
                {"augment_rotations", t.augment_rotations}};
  return j;
}

void config_from_json(const json& j, ModelConfig& m, TrainConfig& t) {
  const json& jm = j.at("model");
  m.input_size = jm.at("input_size").get<int>();
  m.num_scales = jm.at("num_scales").get<int>();
  m.scale_strides = jm.at("scale_strides").get<std::vector<int>>();
  m.backbone_kind = jm.at("backbone_kind").get<std::string>() == "stub"
                        ? BackboneKind::stub
                        : BackboneKind::pretrained_vit;
  m.backbone_embed_dim = jm.at("backbone_embed_dim").get<int>();
  m.backbone_patch_size = jm.at("backbone_patch_size").get<int>();
  m.backbone_blocks = jm.at("backbone_blocks").get<int>();
  m.backbone_weights = jm.at("backbone_weights").get<std::string>();
  m.adapter_width = jm.at("adapter_width").get<int>();
  m.decoder_widths = jm.at("decoder_widths").get<std::vector<int>>();
  m.num_classes = jm.at("num_classes").get<int>();
  m.loss_variant =
      jm.at("loss_variant").get<std::string>() == "bce" ? LossVariant::bce : LossVariant::standard;
  m.attention_heads = jm.at("attention_heads").get<int>();
  m.sampling_points = jm.at("sampling_points").get<int>();
  m.orthogonality_penalty = jm.at("orthogonality_penalty").get<double>();
  m.deep_supervision = jm.at("deep_supervision").get<bool>();
  const json& jt = j.at("train");
  t.optimizer = jt.at("optimizer").get<std::string>() == "adam" ? OptimizerKind::adam
                                                                : OptimizerKind::sgd_nesterov;
  t.lr0 = jt.at("lr0").get<double>();
  t.momentum = jt.at("momentum").get<double>();
  t.weight_decay = jt.at("weight_decay").get<double>();
  t.poly_exponent = jt.at("poly_exponent").get<double>();
  t.epochs = jt.at("epochs").get<int>();
  t.batch_size = jt.at("batch_size").get<int>();
  t.seed = jt.at("seed").get<uint64_t>();
  t.augment_flips = jt.at("augment_flips").get<bool>();
  t.augment_rotations = jt.at("augment_rotations").get<bool>();
}

json tensor_index(const ParamStore& store) {
  json tensors = json::array();
  for (const auto& [name, e] : store.params()) {
    tensors.push_back({{"name", name},
                       {"kind", "param"},
                       {"trainable", e.trainable},
                       {"shape", e.var->value.shape()}});
  }
  for (const auto& [name, t] : store.state_map()) {
    tensors.push_back({{"name", name}, {"kind", "state"}, {"shape", t.shape()}});
  }
  return tensors;
}

void write_container(const std::string& path, const char* magic, const json& header,
                     const ParamStore& store) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), Errc::io, "cannot open for writing: " + path);
  out.write(magic, 8);
  const std::string head = header.dump();
  const uint64_t len = head.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::string kind = entry.at("kind").get<std::string>();
    const Tensor& t = kind == "param" ? store.params().at(name).var->value
                                      : store.state_map().at(name);
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  check(out.good(), Errc::io, "failed writing: " + path);
}

json read_container(const std::string& path, const char* magic, std::ifstream& in) {
  in.open(path, std::ios::binary);
  check(in.good(), Errc::weights_not_found, "file not found: " + path);
  char got[9] = {0};
  in.read(got, 8);
  check(in.good() && std::memcmp(got, magic, 8) == 0, Errc::parse,
        "bad magic in " + path + " (want " + magic + ")");
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  check(in.good() && len < (1ull << 32), Errc::parse, "bad header length in " + path);
  std::string head(static_cast<size_t>(len), '\0');
  in.read(head.data(), static_cast<std::streamsize>(len));
  check(in.good(), Errc::parse, "truncated header in " + path);
  json j = json::parse(head, nullptr, false);
  check(!j.is_discarded(), Errc::parse, "invalid header JSON in " + path);
  return j;
}

void read_tensors(std::ifstream& in, const json& header, const std::string& path,
                  ParamStore& store, bool fill_existing) {
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::string kind = entry.at("kind").get<std::string>();
    auto shape = entry.at("shape").get<std::vector<int64_t>>();
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    check(in.good(), Errc::parse, "truncated tensor data in " + path);
    if (kind == "param") {
      if (fill_existing) {
        check(store.has_param(name), Errc::weights_shape_mismatch,
              "container tensor '" + name + "' has no matching parameter");
        ag::Var v = store.param(name);
        check(v->value.same_shape(t), Errc::weights_shape_mismatch,
              "shape mismatch for '" + name + "': file " + t.shape_str() + " vs model " +
                  v->value.shape_str());
        v->value = std::move(t);
      } else {
        store.add_param(name, std::move(t), entry.value("trainable", false));
      }
    } else {
      if (fill_existing) {
        Tensor* s = store.state(name);
        check(s->same_shape(t), Errc::weights_shape_mismatch,
              "shape mismatch for state '" + name + "'");
        *s = std::move(t);
      } else {
        store.add_state(name, std::move(t));
      }
    }
  }
}

}  // namespace

void write_param_file(const std::string& path, const ParamStore& store,
                      const std::string& meta_json) {
  json header;
  header["version"] = 1;
  header["meta"] = json::parse(meta_json.empty() ? "{}" : meta_json);
  header["tensors"] = tensor_index(store);
  write_container(path, kWeightsMagic, header, store);
}

std::string read_param_file(const std::string& path, ParamStore& store) {
  std::ifstream in;
  json header = read_container(path, kWeightsMagic, in);
  read_tensors(in, header, path, store, /*fill_existing=*/false);
  return header.value("meta", json::object()).dump();
}

void write_checkpoint(const std::string& path, const ParamStore& store,
                      const CheckpointMeta& meta) {
  json header;
  header["version"] = 1;
  header["meta"] = {{"epoch", meta.epoch},
                    {"val_dice", meta.val_dice},
                    {"param_digest", meta.param_digest},
                    {"config", config_to_json(meta.model, meta.train)}};
  header["tensors"] = tensor_index(store);
  write_container(path, kCheckpointMagic, header, store);
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
  std::ifstream in;
  json header = read_container(path, kCheckpointMagic, in);
  const json& jm = header.at("meta");
  CheckpointMeta meta;
  meta.epoch = jm.at("epoch").get<int>();
  meta.val_dice = jm.at("val_dice").get<double>();
  meta.param_digest = jm.at("param_digest").get<std::string>();
  config_from_json(jm.at("config"), meta.model, meta.train);
  return meta;
}

void read_checkpoint_params(const std::string& path, ParamStore& store) {
  std::ifstream in;
  json header = read_container(path, kCheckpointMagic, in);
  read_tensors(in, header, path, store, /*fill_existing=*/true);
}

}  // namespace nseg
