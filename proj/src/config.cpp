// SPDX-License-Identifier: Apache-2.0
#include "rfp/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#ifndef RFP_VERSION
#define RFP_VERSION "0.0.0"
#endif

namespace rfp {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

uint64_t fnv1a(std::string_view text, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
  }
  return out;
}

template <>
double parse_number<double>(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a real number");
}

std::array<int, 4> four(const FlatConfig& f, const std::string& key) {
  auto v = f.get_int_list(key);
  if (v.size() != 4) throw ConfigError("config key '" + key + "' needs exactly 4 entries");
  return {v[0], v[1], v[2], v[3]};
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

const std::map<std::string, std::string>& default_config_values() {
  static const std::map<std::string, std::string> defaults{
      {"backbone.kind", "stub"},
      {"backbone.stem_channels", "8"},
      {"backbone.stage_channels", "16,24,32,48"},
      {"backbone.blocks", "1,1,1,1"},
      {"backbone.input_policy", "pad"},
      {"fpn.out_channels", "32"},
      {"fpn.levels", "6"},
      {"rfp.enabled", "true"},
      {"rfp.branches", "3"},
      {"rfp.dilations", "auto"},
      {"rfp.share_weights", "true"},
      {"rfp.fusion", "branch_pool"},
      {"rfp.inference", "all"},
      {"rfp.use_bias", "false"},
      {"rfp.post_relu", "false"},
      {"rfp.init_gain", "1"},
      {"head.anchor_scale", "4"},
      {"head.pos_iou", "0.35"},
      {"head.neg_iou", "0.3"},
      {"head.loss_lambda", "1"},
      {"head.neg_pos_ratio", "3"},
      {"head.score_thresh", "0.05"},
      {"head.nms_iou", "0.4"},
      {"head.pre_nms_top_k", "400"},
      {"head.max_detections", "100"},
      {"train.lr", "0.02"},
      {"train.momentum", "0.9"},
      {"train.weight_decay", "0.0001"},
      {"train.steps", "1000"},
      {"train.batch", "8"},
      {"train.seed", "1"},
      {"train.hflip", "true"},
      {"train.random_crop", "false"},
      {"train.lr_drop_at", "0.8"},
      {"train.warmup_steps", "50"},
      {"train.clip_grad_norm", "0"},
      {"train.log_every", "25"},
      {"data.image_size", "128"},
      {"data.channels", "1"},
      {"data.objects_min", "1"},
      {"data.objects_max", "3"},
      {"data.min_size", "8"},
      {"data.max_size", "96"},
      {"data.clutter", "1"},
      {"data.seed", "1"},
      {"data.train_images", "500"},
      {"data.test_images", "200"},
      {"data.dir", ""},
      {"report.dir", "runs/default"},
  };
  return defaults;
}

FlatConfig FlatConfig::parse(const std::string& text, const std::string& origin) {
  FlatConfig cfg;
  cfg.values_ = default_config_values();
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::map<std::string, int> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    const std::string where = origin + ":" + std::to_string(line_no);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (seen.count(key)) {
      throw ConfigError(where + ": key '" + key + "' repeats line " + std::to_string(seen[key]));
    }
    seen[key] = line_no;
    if (!cfg.has(key)) throw ConfigError(where + ": unknown config key '" + key + "'");
    cfg.values_[key] = trim(std::string_view(t).substr(eq + 1));
  }
  return cfg;
}

FlatConfig FlatConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void FlatConfig::set(const std::string& key, const std::string& value) {
  if (!has(key)) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = trim(value);
}

const std::string& FlatConfig::raw(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::string FlatConfig::get_string(const std::string& key) const { return raw(key); }
int FlatConfig::get_int(const std::string& key) const { return parse_number<int>(key, raw(key)); }
uint64_t FlatConfig::get_u64(const std::string& key) const { return parse_number<uint64_t>(key, raw(key)); }
double FlatConfig::get_double(const std::string& key) const { return parse_number<double>(key, raw(key)); }

bool FlatConfig::get_bool(const std::string& key) const {
  const std::string v = lower(raw(key));
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + raw(key) + "'");
}

std::vector<int> FlatConfig::get_int_list(const std::string& key) const {
  std::vector<int> out;
  std::stringstream ss(raw(key));
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  return out;
}

std::string FlatConfig::to_text() const {
  std::string s;
  for (const auto& [k, v] : values_) s += k + " = " + v + "\n";
  return s;
}

namespace {

// Enum parsers report the bad value; prefix the key it came from.
template <class Parse>
auto keyed(const FlatConfig& f, const std::string& key, Parse parse) {
  try {
    return parse(f.get_string(key));
  } catch (const ConfigError& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_flat(const FlatConfig& f) {
  ExperimentConfig e;
  e.flat = f;
  DetectorConfig& m = e.model;

  const std::string kind = f.get_string("backbone.kind");
  if (kind == "stub") {
    m.backbone_kind = BackboneKind::stub;
  } else if (kind == "resnet50") {
    m.backbone_kind = BackboneKind::resnet50;
  } else {
    throw ConfigError("config key 'backbone.kind': expected stub or resnet50, got '" + kind + "'");
  }
  m.backbone.in_channels = f.get_int("data.channels");
  m.backbone.stem_channels = f.get_int("backbone.stem_channels");
  m.backbone.stage_channels = four(f, "backbone.stage_channels");
  m.backbone.blocks = four(f, "backbone.blocks");
  m.backbone.input_policy = keyed(f, "backbone.input_policy", [](const std::string& v) { return parse_input_policy(v); });
  m.fpn.out_channels = f.get_int("fpn.out_channels");
  m.fpn.levels = f.get_int("fpn.levels");

  m.rfp_enabled = f.get_bool("rfp.enabled");
  RfpConfig& r = m.rfp;
  r.branches = f.get_int("rfp.branches");
  if (r.branches < 1) throw ConfigError("config key 'rfp.branches' must be >= 1");
  r.dilations = lower(f.get_string("rfp.dilations")) == "auto" ? default_dilations(r.branches)
                                                                : f.get_int_list("rfp.dilations");
  r.share_weights = f.get_bool("rfp.share_weights");
  r.fusion = keyed(f, "rfp.fusion", [](const std::string& v) { return parse_fusion(v); });
  const std::string inf = lower(f.get_string("rfp.inference"));
  if (inf == "all") {
    r.single_branch.reset();
  } else if (inf.rfind("single:", 0) == 0) {
    r.single_branch = parse_number<int>("rfp.inference", inf.substr(7));
  } else {
    throw ConfigError("config key 'rfp.inference': expected all or single:<branch>, got '" + inf + "'");
  }
  r.channels = m.fpn.out_channels;
  r.use_bias = f.get_bool("rfp.use_bias");
  r.post_relu = f.get_bool("rfp.post_relu");
  m.rfp_init_gain = f.get_double("rfp.init_gain");
  if (!(m.rfp_init_gain > 0)) throw ConfigError("config key 'rfp.init_gain' must be positive");

  HeadConfig& h = m.head;
  h.anchor_scale = f.get_double("head.anchor_scale");
  h.pos_iou = f.get_double("head.pos_iou");
  h.neg_iou = f.get_double("head.neg_iou");
  h.loss_lambda = f.get_double("head.loss_lambda");
  h.neg_pos_ratio = f.get_int("head.neg_pos_ratio");
  h.score_thresh = f.get_double("head.score_thresh");
  h.nms_iou = f.get_double("head.nms_iou");
  h.pre_nms_top_k = f.get_int("head.pre_nms_top_k");
  h.max_detections = f.get_int("head.max_detections");
  if (h.neg_pos_ratio < 0) throw ConfigError("config key 'head.neg_pos_ratio' must be >= 0");
  if (h.pre_nms_top_k < 1 || h.max_detections < 1) {
    throw ConfigError("head.pre_nms_top_k and head.max_detections must be >= 1");
  }

  TrainConfig& t = e.train;
  t.lr = f.get_double("train.lr");
  t.momentum = f.get_double("train.momentum");
  t.weight_decay = f.get_double("train.weight_decay");
  t.steps = f.get_int("train.steps");
  t.batch = f.get_int("train.batch");
  t.seed = f.get_u64("train.seed");
  t.hflip = f.get_bool("train.hflip");
  t.random_crop = f.get_bool("train.random_crop");
  t.lr_drop_at = f.get_double("train.lr_drop_at");
  t.warmup_steps = f.get_int("train.warmup_steps");
  t.clip_grad_norm = f.get_double("train.clip_grad_norm");
  t.log_every = f.get_int("train.log_every");
  if (t.steps < 0) throw ConfigError("config key 'train.steps' must be >= 0");
  if (t.batch < 1) throw ConfigError("config key 'train.batch' must be >= 1");
  if (t.lr < 0) throw ConfigError("config key 'train.lr' must be >= 0");
  if (t.momentum < 0 || t.momentum >= 1) throw ConfigError("config key 'train.momentum' must be in [0,1)");
  if (t.log_every < 1) throw ConfigError("config key 'train.log_every' must be >= 1");
  if (!(t.clip_grad_norm >= 0)) throw ConfigError("config key 'train.clip_grad_norm' must be >= 0");

  SceneSpec& d = e.data;
  d.image_size = f.get_int("data.image_size");
  d.channels = f.get_int("data.channels");
  d.objects_min = f.get_int("data.objects_min");
  d.objects_max = f.get_int("data.objects_max");
  d.min_size = f.get_double("data.min_size");
  d.max_size = f.get_double("data.max_size");
  d.clutter = f.get_double("data.clutter");
  d.seed = f.get_u64("data.seed");
  e.train_images = f.get_int("data.train_images");
  e.test_images = f.get_int("data.test_images");
  e.data_dir = f.get_string("data.dir");
  e.report_dir = f.get_string("report.dir");
  if (e.train_images < 0 || e.test_images < 0) throw ConfigError("data image counts must be >= 0");
  m.image_h = m.image_w = d.image_size;

  if (m.backbone_kind == BackboneKind::stub) {
    d.validate();
    m.validate();
  } else {
    m.fpn.validate();
    if (m.rfp_enabled) m.rfp.validate();
  }
  return e;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides) {
  FlatConfig f = path.empty() ? FlatConfig::parse("") : FlatConfig::load(path);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    f.set(trim(std::string_view(o).substr(0, eq)), o.substr(eq + 1));
  }
  return from_flat(f);
}

uint64_t ExperimentConfig::architecture_hash() const {
  // Everything that fixes parameter names and shapes, resolved rather than raw.
  const DetectorConfig& m = model;
  std::ostringstream s;
  s << "in=" << m.backbone.in_channels << ";stem=" << m.backbone.stem_channels << ";stages="
    << join({m.backbone.stage_channels.begin(), m.backbone.stage_channels.end()}) << ";blocks="
    << join({m.backbone.blocks.begin(), m.backbone.blocks.end()}) << ";fpn=" << m.fpn.out_channels
    << "x" << m.fpn.levels << ";rfp=" << m.rfp_enabled;
  if (m.rfp_enabled) {
    s << ";b=" << m.rfp.branches << ";d=" << join(m.rfp.dilations) << ";share=" << m.rfp.share_weights
      << ";fusion=" << to_string(m.rfp.fusion) << ";bias=" << m.rfp.use_bias << ";relu=" << m.rfp.post_relu;
  }
  return fnv1a(s.str());
}

uint64_t ExperimentConfig::config_hash() const { return fnv1a(flat.to_text()); }

void store_rfp_config(FlatConfig& flat, const RfpConfig& rfp) {
  flat.set("rfp.branches", std::to_string(rfp.branches));
  flat.set("rfp.dilations", join(rfp.dilations));
  flat.set("rfp.share_weights", rfp.share_weights ? "true" : "false");
  flat.set("rfp.fusion", to_string(rfp.fusion));
  flat.set("rfp.inference", rfp.single_branch ? "single:" + std::to_string(*rfp.single_branch) : "all");
  flat.set("rfp.use_bias", rfp.use_bias ? "true" : "false");
  flat.set("rfp.post_relu", rfp.post_relu ? "true" : "false");
}

std::string format_hash(uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string code_version() { return std::string("rfp-artifact ") + RFP_VERSION; }

}  // namespace rfp
