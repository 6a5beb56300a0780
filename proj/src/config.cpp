#include "config.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "core/error.hpp"

namespace nseg {

std::string to_string(BackboneKind k) {
  return k == BackboneKind::stub ? "stub" : "pretrained_vit";
}
std::string to_string(LossVariant v) { return v == LossVariant::bce ? "bce" : "standard"; }
std::string to_string(OptimizerKind o) {
  return o == OptimizerKind::adam ? "adam" : "sgd_nesterov";
}

ModelConfig ModelConfig::desk_scale() {
  ModelConfig m;
  m.input_size = 256;
  return m;
}

ModelConfig ModelConfig::paper_scale() {
  ModelConfig m;
  m.input_size = 1024;
  m.decoder_widths = {64, 128, 256, 512};
  m.adapter_width = 384;
  return m;
}

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

struct RawConfig {
  std::map<std::string, std::string> model;
  std::map<std::string, std::string> train;
};

RawConfig parse_sections(const std::string& text) {
  RawConfig raw;
  std::map<std::string, std::string>* section = nullptr;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      check(s.back() == ']', Errc::parse, "line " + std::to_string(lineno) + ": unterminated section header");
      std::string name = trim(s.substr(1, s.size() - 2));
      if (name == "model")
        section = &raw.model;
      else if (name == "train")
        section = &raw.train;
      else
        fail(Errc::parse, "line " + std::to_string(lineno) + ": unknown section [" + name + "]");
      continue;
    }
    size_t eq = s.find('=');
    check(eq != std::string::npos, Errc::parse,
          "line " + std::to_string(lineno) + ": expected key = value");
    check(section != nullptr, Errc::parse,
          "line " + std::to_string(lineno) + ": key outside of [model]/[train] section");
    std::string key = trim(s.substr(0, eq));
    std::string val = trim(s.substr(eq + 1));
    check(!key.empty(), Errc::parse, "line " + std::to_string(lineno) + ": empty key");
    check(!section->count(key), Errc::parse,
          "line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    (*section)[key] = val;
  }
  return raw;
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int x = std::stoi(v, &pos);
    check(pos == v.size(), Errc::parse, "key '" + key + "': trailing characters in '" + v + "'");
    return x;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail(Errc::parse, "key '" + key + "': not an integer: '" + v + "'");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    uint64_t x = std::stoull(v, &pos);
    check(pos == v.size(), Errc::parse, "key '" + key + "': trailing characters in '" + v + "'");
    return x;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail(Errc::parse, "key '" + key + "': not an unsigned integer: '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double x = std::stod(v, &pos);
    check(pos == v.size(), Errc::parse, "key '" + key + "': trailing characters in '" + v + "'");
    return x;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail(Errc::parse, "key '" + key + "': not a number: '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  fail(Errc::parse, "key '" + key + "': not a boolean: '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    check(!item.empty(), Errc::parse, "key '" + key + "': empty list element");
    out.push_back(parse_int(key, item));
  }
  check(!out.empty(), Errc::parse, "key '" + key + "': empty list");
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) os << ",";
    os << v[i];
  }
  return os.str();
}

}  // namespace

std::vector<Violation> validate_config(const ModelConfig& m, const TrainConfig& t) {
  std::vector<Violation> v;
  auto bad = [&](const std::string& field, const std::string& msg) {
    v.push_back({field, msg});
  };

  if (m.input_size < 1) bad("input_size", "must be positive");
  if (static_cast<int>(m.scale_strides.size()) != m.num_scales ||
      static_cast<int>(m.decoder_widths.size()) != m.num_scales)
    bad("num_scales", "scale_strides (" + std::to_string(m.scale_strides.size()) +
                          ") and decoder_widths (" + std::to_string(m.decoder_widths.size()) +
                          ") must both have num_scales=" + std::to_string(m.num_scales) +
                          " entries");
  bool increasing = true;
  for (size_t i = 1; i < m.scale_strides.size(); ++i)
    if (m.scale_strides[i] <= m.scale_strides[i - 1]) increasing = false;
  if (!m.scale_strides.empty() && m.scale_strides[0] < 1) increasing = false;
  if (!increasing) bad("scale_strides", "must be positive and strictly increasing");

  if (increasing) {
    std::string offenders;
    for (int s : m.scale_strides)
      if (m.input_size % s != 0) offenders += (offenders.empty() ? "" : ",") + std::to_string(s);
    if (!offenders.empty())
      bad("scale_strides",
          "divisibility: strides {" + offenders + "} do not divide input_size=" +
              std::to_string(m.input_size));
    bool halving = m.scale_strides.empty() || m.scale_strides[0] == 4;
    for (size_t i = 1; i < m.scale_strides.size(); ++i)
      if (m.scale_strides[i] != 2 * m.scale_strides[i - 1]) halving = false;
    if (!halving)
      bad("scale_strides", "must start at 4 and double per level (pyramid halves spatially)");
  }

  if (m.loss_variant == LossVariant::bce && m.num_classes != 1)
    bad("num_classes", "loss_variant=bce requires num_classes=1 (got " +
                           std::to_string(m.num_classes) + ")");
  if (m.loss_variant == LossVariant::standard && m.num_classes < 2)
    bad("num_classes", "loss_variant=standard requires num_classes>=2 (got " +
                           std::to_string(m.num_classes) + ")");

  for (int w : m.decoder_widths)
    if (w < 1) {
      bad("decoder_widths", "widths must be positive");
      break;
    }
  if (m.backbone_embed_dim < 1) bad("backbone_embed_dim", "must be positive");
  if (m.backbone_patch_size < 1) bad("backbone_patch_size", "must be positive");
  if (m.backbone_patch_size >= 1 && m.input_size % m.backbone_patch_size != 0)
    bad("backbone_patch_size", "must divide input_size=" + std::to_string(m.input_size));
  if (m.backbone_blocks < 1)
    bad("backbone_blocks", "must be positive");
  else if (m.backbone_blocks < m.num_scales)
    bad("backbone_blocks", "need at least num_scales=" + std::to_string(m.num_scales) +
                               " blocks (one feature tap per scale)");
  if (m.attention_heads < 1) bad("attention_heads", "must be positive");
  if (m.sampling_points < 1) bad("sampling_points", "must be positive");
  if (m.adapter_width < 1)
    bad("adapter_width", "must be positive");
  else if (m.attention_heads >= 1 && m.adapter_width % m.attention_heads != 0)
    bad("adapter_width", "must be divisible by attention_heads=" +
                             std::to_string(m.attention_heads));
  if (m.orthogonality_penalty < 0) bad("orthogonality_penalty", "must be >= 0");
  if (m.deep_supervision) bad("deep_supervision", "reserved flag, not implemented");

  if (!(t.lr0 > 0)) bad("lr0", "must be > 0");
  if (!(t.momentum >= 0 && t.momentum < 1)) bad("momentum", "must satisfy 0 <= momentum < 1");
  if (t.weight_decay < 0) bad("weight_decay", "must be >= 0");
  if (!(t.poly_exponent > 0)) bad("poly_exponent", "must be > 0");
  if (t.epochs < 1) bad("epochs", "must be >= 1");
  if (t.batch_size < 1) bad("batch_size", "must be >= 1");
  return v;
}

std::pair<ModelConfig, TrainConfig> parse_config_text(const std::string& text) {
  RawConfig raw = parse_sections(text);
  ModelConfig m;
  TrainConfig t;

  // loss_variant first: num_classes default depends on it.
  bool num_classes_set = false;
  for (const auto& [key, val] : raw.model) {
    if (key == "input_size") m.input_size = parse_int(key, val);
    else if (key == "num_scales") m.num_scales = parse_int(key, val);
    else if (key == "scale_strides") m.scale_strides = parse_int_list(key, val);
    else if (key == "backbone_kind") {
      if (val == "stub") m.backbone_kind = BackboneKind::stub;
      else if (val == "pretrained_vit") m.backbone_kind = BackboneKind::pretrained_vit;
      else fail(Errc::parse, "key 'backbone_kind': unknown value '" + val + "'");
    } else if (key == "backbone_embed_dim") m.backbone_embed_dim = parse_int(key, val);
    else if (key == "backbone_patch_size") m.backbone_patch_size = parse_int(key, val);
    else if (key == "backbone_blocks") m.backbone_blocks = parse_int(key, val);
    else if (key == "backbone_weights") m.backbone_weights = val;
    else if (key == "adapter_width") m.adapter_width = parse_int(key, val);
    else if (key == "decoder_widths") m.decoder_widths = parse_int_list(key, val);
    else if (key == "num_classes") { m.num_classes = parse_int(key, val); num_classes_set = true; }
    else if (key == "loss_variant") {
      if (val == "bce") m.loss_variant = LossVariant::bce;
      else if (val == "standard") m.loss_variant = LossVariant::standard;
      else fail(Errc::parse, "key 'loss_variant': unknown value '" + val + "'");
    } else if (key == "attention_heads") m.attention_heads = parse_int(key, val);
    else if (key == "sampling_points") m.sampling_points = parse_int(key, val);
    else if (key == "orthogonality_penalty") m.orthogonality_penalty = parse_double(key, val);
    else if (key == "deep_supervision") m.deep_supervision = parse_bool(key, val);
    else fail(Errc::parse, "unknown key '" + key + "' in [model]");
  }
  if (!num_classes_set) m.num_classes = (m.loss_variant == LossVariant::bce) ? 1 : 2;

  bool lr0_set = false, wd_set = false;
  for (const auto& [key, val] : raw.train) {
    if (key == "optimizer") {
      if (val == "sgd_nesterov") t.optimizer = OptimizerKind::sgd_nesterov;
      else if (val == "adam") t.optimizer = OptimizerKind::adam;
      else fail(Errc::parse, "key 'optimizer': unknown value '" + val + "'");
    } else if (key == "lr0") { t.lr0 = parse_double(key, val); lr0_set = true; }
    else if (key == "momentum") t.momentum = parse_double(key, val);
    else if (key == "weight_decay") { t.weight_decay = parse_double(key, val); wd_set = true; }
    else if (key == "poly_exponent") t.poly_exponent = parse_double(key, val);
    else if (key == "epochs") t.epochs = parse_int(key, val);
    else if (key == "batch_size") t.batch_size = parse_int(key, val);
    else if (key == "seed") t.seed = parse_u64(key, val);
    else if (key == "augment_flips") t.augment_flips = parse_bool(key, val);
    else if (key == "augment_rotations") t.augment_rotations = parse_bool(key, val);
    else fail(Errc::parse, "unknown key '" + key + "' in [train]");
  }
  if (!lr0_set) t.lr0 = (t.optimizer == OptimizerKind::adam) ? 3e-4 : 1e-4;
  if (!wd_set) t.weight_decay = (t.optimizer == OptimizerKind::adam) ? 1e-4 : 3e-5;

  auto violations = validate_config(m, t);
  if (!violations.empty()) {
    std::string msg = "invalid config:";
    for (const auto& viol : violations) msg += "\n  " + viol.field + ": " + viol.message;
    fail(Errc::validation, msg);
  }
  return {m, t};
}

std::pair<ModelConfig, TrainConfig> load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), Errc::file_not_found, "config file not found: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string config_to_text(const ModelConfig& m, const TrainConfig& t) {
  std::ostringstream os;
  os.precision(17);
  os << "[model]\n";
  os << "input_size = " << m.input_size << "\n";
  os << "num_scales = " << m.num_scales << "\n";
  os << "scale_strides = " << join_ints(m.scale_strides) << "\n";
  os << "backbone_kind = " << to_string(m.backbone_kind) << "\n";
  os << "backbone_embed_dim = " << m.backbone_embed_dim << "\n";
  os << "backbone_patch_size = " << m.backbone_patch_size << "\n";
  os << "backbone_blocks = " << m.backbone_blocks << "\n";
  if (!m.backbone_weights.empty()) os << "backbone_weights = " << m.backbone_weights << "\n";
  os << "adapter_width = " << m.adapter_width << "\n";
  os << "decoder_widths = " << join_ints(m.decoder_widths) << "\n";
  os << "num_classes = " << m.num_classes << "\n";
  os << "loss_variant = " << to_string(m.loss_variant) << "\n";
  os << "attention_heads = " << m.attention_heads << "\n";
  os << "sampling_points = " << m.sampling_points << "\n";
  os << "orthogonality_penalty = " << m.orthogonality_penalty << "\n";
  os << "deep_supervision = " << (m.deep_supervision ? "true" : "false") << "\n";
  os << "\n[train]\n";
  os << "optimizer = " << to_string(t.optimizer) << "\n";
  os << "lr0 = " << t.lr0 << "\n";
  os << "momentum = " << t.momentum << "\n";
  os << "weight_decay = " << t.weight_decay << "\n";
  os << "poly_exponent = " << t.poly_exponent << "\n";
  os << "epochs = " << t.epochs << "\n";
  os << "batch_size = " << t.batch_size << "\n";
  os << "seed = " << t.seed << "\n";
  os << "augment_flips = " << (t.augment_flips ? "true" : "false") << "\n";
  os << "augment_rotations = " << (t.augment_rotations ? "true" : "false") << "\n";
  return os.str();
}

void save_config(const std::string& path, const ModelConfig& m, const TrainConfig& t) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), Errc::io, "cannot open config file for writing: " + path);
  out << config_to_text(m, t);
  check(out.good(), Errc::io, "failed writing config file: " + path);
}

}  // namespace nseg
