#include "pointseg/config.hpp"

#include <fstream>
#include <sstream>

#include "pointseg/errors.hpp"
#include "pointseg/rng.hpp"

namespace pointseg::config {

using nlohmann::json;

json defaults() {
  return json{
      {"seed", 0},
      {"deterministic", true},
      {"phantom",
       {{"height", 64},
        {"width", 64},
        {"frames", 8},
        {"count", 264},
        {"points", 64},
        {"amplitude_range", {0.04, 0.12}},
        {"cycle_range", {6, 10}},
        {"radius_in_range", {8.0, 12.0}},
        {"radius_out_range", {16.0, 22.0}},
        {"center_jitter", 4.0},
        {"speckle_range", {0.2, 0.7}},
        {"blur_range", {0.8, 1.4}},
        {"shadow_probability", 0.5},
        {"shadow_span_range", {0.5, 1.8}},
        {"shadow_duration_range", {2, 5}},
        {"pixel_spacing", 1.0}}},
      {"splits", {{"ratios", {0.7575757575757576, 0.09090909090909091, 0.15151515151515152}}, {"seed", 17}}},
      {"encoder",
       {{"dim", 48},
        {"heads", 4},
        {"layers", 2},
        {"strides", {8, 16, 32}},
        {"attention", "deformable"},
        {"sampling_points", 4},
        {"backbone", "small_residual"},
        {"resnet_base_width", 64}}},
      {"tracker",
       {{"refine_layers", 3},
        {"grid", 8},
        {"visibility_threshold", 0.5},
        {"manual_points", json::array()}}},
      {"fusion",
       {{"layers", 3},
        {"classes", 1},
        {"use_points", true},
        {"use_mlp", true},
        {"use_point_sa", true},
        {"use_point_tsa", true}}},
      {"loss",
       {{"mask_layer_weights", {0.25, 0.5, 1.0}},
        {"dice_weight", 1.0},
        {"dice_epsilon", 1.0},
        {"temporal_weight", 100.0},
        {"temporal_layer_mode", "scaled"},
        {"pair_limit", 0},
        {"visibility_gated", true},
        {"tracking_visibility_weight", 1.0},
        {"tracking_layer_weights", json::array()},
        {"tracking_mask_by_visibility", true}}},
      {"train",
       {{"stage", "tracker"},
        {"lr", 2e-4},
        {"weight_decay", 1e-4},
        {"batch", 1},
        {"accumulation", 4},
        {"epochs", 12},
        {"patience", 4},
        {"grad_clip", 1.0},
        {"lr_schedule", "constant"},
        {"clip_frames", 8},
        {"checkpoint_every", 1},
        {"joint_tracking", false},
        {"annotated_frames", json::array()},
        {"min_epochs", 2}}},
  };
}

namespace {

json parse_scalar(const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  // arrays: comma-separated inside brackets
  if (!value.empty() && value.front() == '[') {
    try {
      return json::parse(value);
    } catch (const json::exception&) {
      throw ConfigError("override value is not valid JSON: " + value);
    }
  }
  try {
    std::size_t pos = 0;
    if (value.find_first_not_of("+-0123456789") == std::string::npos) {
      const long long v = std::stoll(value, &pos);
      if (pos == value.size()) return v;
    }
    const double d = std::stod(value, &pos);
    if (pos == value.size()) return d;
  } catch (...) {
  }
  return value;  // plain string
}

std::string known_keys(const json& obj) {
  std::string out;
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!out.empty()) out += ", ";
    out += it.key();
  }
  return out;
}

}  // namespace

void apply_override(json& tree, const std::string& dotted_key, const std::string& value) {
  json* node = &tree;
  std::stringstream ss(dotted_key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty override key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i]))
      throw ConfigError("unknown config key '" + dotted_key + "' (valid keys here: " +
                        known_keys(*node) + ")");
    node = &(*node)[parts[i]];
  }
  if (!node->is_object() || !node->contains(parts.back()))
    throw ConfigError("unknown config key '" + dotted_key + "' (valid keys here: " +
                      known_keys(*node) + ")");
  (*node)[parts.back()] = parse_scalar(value);
}

void merge_strict(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object())
    throw ConfigError("config: expected an object at '" + (path.empty() ? "<root>" : path) + "'");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string here = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key()))
      throw ConfigError("unknown config key '" + here + "' (valid keys here: " +
                        known_keys(base) + ")");
    if (base[it.key()].is_object() && it.value().is_object())
      merge_strict(base[it.key()], it.value(), here);
    else
      base[it.key()] = it.value();
  }
}

json resolve(const std::filesystem::path& config_file,
             const std::vector<std::string>& overrides) {
  json cfg = defaults();
  if (!config_file.empty()) {
    std::ifstream f(config_file);
    if (!f) throw IoError("cannot open config file: " + config_file.string());
    json file_cfg;
    try {
      f >> file_cfg;
    } catch (const json::exception& e) {
      throw ConfigError("config file parse error: " + std::string(e.what()));
    }
    merge_strict(cfg, file_cfg);
  }
  for (const std::string& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override must be key=value, got '" + ov + "'");
    apply_override(cfg, ov.substr(0, eq), ov.substr(eq + 1));
  }
  return cfg;
}

encoder::EncoderConfig encoder_config(const json& cfg, const std::string& which) {
  const json& e = cfg.at("encoder");
  encoder::EncoderConfig ec;
  ec.dim = e.at("dim").get<std::int64_t>();
  ec.heads = e.at("heads").get<int>();
  ec.layers = e.at("layers").get<int>();
  ec.strides = e.at("strides").get<std::vector<std::int64_t>>();
  const std::string attn = e.at("attention").get<std::string>();
  if (attn == "deformable")
    ec.attention = encoder::AttentionMode::deformable;
  else if (attn == "dense")
    ec.attention = encoder::AttentionMode::dense;
  else
    throw ConfigError("encoder.attention must be 'deformable' or 'dense'");
  ec.sampling_points = e.at("sampling_points").get<std::int64_t>();
  const std::string bb = e.at("backbone").get<std::string>();
  if (bb == "small_residual")
    ec.backbone = encoder::Backbone::small_residual;
  else if (bb == "residual50")
    ec.backbone = encoder::Backbone::residual50;
  else
    throw ConfigError("encoder.backbone must be 'small_residual' or 'residual50'");
  ec.resnet_base_width = e.at("resnet_base_width").get<std::int64_t>();
  (void)which;
  return ec;
}

tracker::TrackerConfig tracker_config(const json& cfg) {
  const json& t = cfg.at("tracker");
  tracker::TrackerConfig tc;
  tc.refine_layers = t.at("refine_layers").get<int>();
  tc.grid = t.at("grid").get<std::int64_t>();
  tc.vis_threshold = t.at("visibility_threshold").get<double>();
  for (const auto& mp : t.at("manual_points"))
    tc.manual_points.push_back({mp.at(0).get<double>(), mp.at(1).get<double>()});
  return tc;
}

segmenter::FusionConfig fusion_config(const json& cfg) {
  const json& f = cfg.at("fusion");
  segmenter::FusionConfig fc;
  fc.layers = f.at("layers").get<int>();
  fc.classes = f.at("classes").get<std::int64_t>();
  fc.use_points = f.at("use_points").get<bool>();
  fc.use_mlp = f.at("use_mlp").get<bool>();
  fc.use_point_sa = f.at("use_point_sa").get<bool>();
  fc.use_point_tsa = f.at("use_point_tsa").get<bool>();
  return fc;
}

losses::LossWeights loss_weights(const json& cfg) {
  const json& l = cfg.at("loss");
  losses::LossWeights lw;
  lw.mask_layer = l.at("mask_layer_weights").get<std::vector<double>>();
  lw.dice = l.at("dice_weight").get<double>();
  lw.dice_epsilon = l.at("dice_epsilon").get<double>();
  lw.temporal = l.at("temporal_weight").get<double>();
  const std::string mode = l.at("temporal_layer_mode").get<std::string>();
  if (mode == "scaled")
    lw.temporal_layer_scaled = true;
  else if (mode == "uniform")
    lw.temporal_layer_scaled = false;
  else
    throw ConfigError("loss.temporal_layer_mode must be 'scaled' or 'uniform'");
  lw.pair_limit = l.at("pair_limit").get<std::int64_t>();
  lw.visibility_gated = l.at("visibility_gated").get<bool>();
  for (double w : lw.mask_layer)
    if (w < 0.0) throw ConfigError("loss weights must be >= 0");
  if (lw.dice < 0.0 || lw.temporal < 0.0) throw ConfigError("loss weights must be >= 0");
  return lw;
}

train::AdamWConfig adamw_config(const json& cfg) {
  const json& t = cfg.at("train");
  train::AdamWConfig ac;
  ac.lr = t.at("lr").get<double>();
  ac.weight_decay = t.at("weight_decay").get<double>();
  return ac;
}

std::uint64_t config_hash(const json& cfg) {
  return rng::stream_id(cfg.dump());
}

}  // namespace pointseg::config
