#pragma once

#include <map>
#include <optional>
#include <variant>

#include "uwf/common.hpp"

namespace uwf {

/// Minimal TOML-style config: [sections], key = value, where value is a
/// quoted string, number, boolean, or flat array of those. # starts a comment.
class ConfigTree {
 public:
  struct Value {
    enum class Kind { boolean, number, string, array };
    Kind kind = Kind::string;
    bool b = false;
    double num = 0.0;
    std::string str;
    std::vector<Value> arr;
  };

  static ConfigTree parse(const std::string& text) {
    ConfigTree tree;
    std::istringstream in(text);
    std::string line, section;
    size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string s = strip_comment(line);
      s = trim(s);
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']')
          throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section");
        section = trim(s.substr(1, s.size() - 2));
        if (section.empty())
          throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
        continue;
      }
      size_t eq = s.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(s.substr(0, eq));
      std::string val = trim(s.substr(eq + 1));
      if (key.empty())
        throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
      tree.values_[section + "." + key] = parse_value(val, lineno);
    }
    return tree;
  }

  static ConfigTree parse_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
    return parse(read_text_file(path));
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second.kind != Value::Kind::string)
      throw ConfigError("config key '" + key + "' must be a string");
    return it->second.str;
  }

  double get_number(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second.kind != Value::Kind::number)
      throw ConfigError("config key '" + key + "' must be a number");
    return it->second.num;
  }

  int get_int(const std::string& key, int fallback) const {
    double v = get_number(key, fallback);
    double r = std::round(v);
    if (std::abs(v - r) > 1e-9) throw ConfigError("config key '" + key + "' must be an integer");
    return static_cast<int>(r);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second.kind != Value::Kind::boolean)
      throw ConfigError("config key '" + key + "' must be true or false");
    return it->second.b;
  }

  std::vector<std::string> get_string_array(const std::string& key,
                                            std::vector<std::string> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second.kind != Value::Kind::array)
      throw ConfigError("config key '" + key + "' must be an array");
    std::vector<std::string> out;
    for (const auto& v : it->second.arr) {
      if (v.kind != Value::Kind::string)
        throw ConfigError("config key '" + key + "' must hold strings");
      out.push_back(v.str);
    }
    return out;
  }

  std::vector<double> get_number_array(const std::string& key,
                                       std::vector<double> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second.kind != Value::Kind::array)
      throw ConfigError("config key '" + key + "' must be an array");
    std::vector<double> out;
    for (const auto& v : it->second.arr) {
      if (v.kind != Value::Kind::number)
        throw ConfigError("config key '" + key + "' must hold numbers");
      out.push_back(v.num);
    }
    return out;
  }

 private:
  static std::string strip_comment(const std::string& line) {
    bool in_str = false;
    for (size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') in_str = !in_str;
      if (line[i] == '#' && !in_str) return line.substr(0, i);
    }
    return line;
  }

  static Value parse_value(const std::string& raw, size_t lineno) {
    Value v;
    if (raw.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty value");
    if (raw.front() == '"') {
      if (raw.size() < 2 || raw.back() != '"')
        throw ConfigError("config line " + std::to_string(lineno) + ": unterminated string");
      v.kind = Value::Kind::string;
      v.str = raw.substr(1, raw.size() - 2);
      return v;
    }
    if (raw.front() == '[') {
      if (raw.back() != ']')
        throw ConfigError("config line " + std::to_string(lineno) + ": unterminated array");
      v.kind = Value::Kind::array;
      std::string inner = trim(raw.substr(1, raw.size() - 2));
      if (inner.empty()) return v;
      std::vector<std::string> parts;
      std::string cur;
      bool in_str = false;
      for (char c : inner) {
        if (c == '"') in_str = !in_str;
        if (c == ',' && !in_str) {
          parts.push_back(cur);
          cur.clear();
        } else {
          cur += c;
        }
      }
      parts.push_back(cur);
      for (auto& p : parts) v.arr.push_back(parse_value(trim(p), lineno));
      return v;
    }
    if (raw == "true" || raw == "false") {
      v.kind = Value::Kind::boolean;
      v.b = raw == "true";
      return v;
    }
    try {
      size_t used = 0;
      v.num = std::stod(raw, &used);
      if (used != raw.size()) throw std::invalid_argument(raw);
      v.kind = Value::Kind::number;
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config line " + std::to_string(lineno) + ": cannot parse value '" + raw +
                        "' (strings must be quoted)");
    }
  }

  std::map<std::string, Value> values_;
};

/// Everything one run needs; every artifact written embeds this snapshot.
struct RunConfig {
  // [run]
  std::string manifest;
  std::string output_dir = "runs/out";
  int task_id = 1;
  std::string domain = "rgb";  // rgb | frequency | both (evaluate only)
  uint64_t seed = 42;
  std::vector<std::string> architectures = {"lightweight_cnn", "residual_cnn",
                                            "patch_transformer", "retinal_foundation"};
  bool force = false;

  // [split]
  std::array<double, 3> split_ratios{0.64, 0.16, 0.20};
  uint64_t split_seed = 42;

  // [spatial]
  int crop_size = 800;
  int resize_target = 0;  // 0 -> task default (448 for task 1) or model input size
  double neutral_offset = 0.5;
  double blur_scale = 1.0 / 30.0;
  bool pad_if_needed = false;
  double hflip_prob = 0.5, vflip_prob = 0.5, rotation_degrees_max = 15.0;
  double zoom_lo = 0.9, zoom_hi = 1.1;
  bool dump_stages = false;

  // [frequency]
  double clip_percentile = 0.99;
  bool dump_spectrum = false;

  // [model]
  int input_size = 224;
  double unfreeze_fraction = 0.25;
  int vit_depth = 12;
  int foundation_depth = 4;
  std::string foundation_checkpoint;
  bool allow_substitute_encoder = false;

  // [train]
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  int batch_size = 16;
  int max_epochs = 100;
  int early_stop_patience = 10;
  double cutmix_alpha = 1.0;
  int use_cutmix = -1;  // -1 default (foundation only), 0 off, 1 on everywhere

  // [evaluate]
  double threshold = 0.5;
  std::string threshold_rule = "fixed";  // fixed | youden-validation

  // [explain]
  std::string explain_model = "lightweight_cnn";
  double overlay_alpha = 0.4;
  std::vector<std::string> explain_images;
  int explain_count = 8;

  // [synth]
  int synth_n = 300;
  int synth_image_size = 96;
  std::string synth_dir;

  static RunConfig from_tree(const ConfigTree& t) {
    RunConfig c;
    c.manifest = t.get_string("run.manifest", c.manifest);
    c.output_dir = t.get_string("run.output_dir", c.output_dir);
    c.task_id = t.get_int("run.task", c.task_id);
    c.domain = t.get_string("run.domain", c.domain);
    c.seed = static_cast<uint64_t>(t.get_number("run.seed", static_cast<double>(c.seed)));
    c.architectures = t.get_string_array("run.architectures", c.architectures);
    c.force = t.get_bool("run.force", c.force);

    auto ratios = t.get_number_array("split.ratios",
                                     {c.split_ratios[0], c.split_ratios[1], c.split_ratios[2]});
    if (ratios.size() != 3) throw ConfigError("split.ratios must have 3 entries");
    c.split_ratios = {ratios[0], ratios[1], ratios[2]};
    c.split_seed = static_cast<uint64_t>(
        t.get_number("split.seed", static_cast<double>(c.seed)));

    c.crop_size = t.get_int("spatial.crop_size", c.crop_size);
    c.resize_target = t.get_int("spatial.resize_target", c.resize_target);
    c.neutral_offset = t.get_number("spatial.neutral_offset", c.neutral_offset);
    c.blur_scale = t.get_number("spatial.blur_scale", c.blur_scale);
    c.pad_if_needed = t.get_bool("spatial.pad_if_needed", c.pad_if_needed);
    c.hflip_prob = t.get_number("spatial.hflip_prob", c.hflip_prob);
    c.vflip_prob = t.get_number("spatial.vflip_prob", c.vflip_prob);
    c.rotation_degrees_max = t.get_number("spatial.rotation_degrees_max", c.rotation_degrees_max);
    c.zoom_lo = t.get_number("spatial.zoom_lo", c.zoom_lo);
    c.zoom_hi = t.get_number("spatial.zoom_hi", c.zoom_hi);

    c.clip_percentile = t.get_number("frequency.clip_percentile", c.clip_percentile);

    c.input_size = t.get_int("model.input_size", c.input_size);
    c.unfreeze_fraction = t.get_number("model.unfreeze_fraction", c.unfreeze_fraction);
    c.vit_depth = t.get_int("model.vit_depth", c.vit_depth);
    c.foundation_depth = t.get_int("model.foundation_depth", c.foundation_depth);
    c.foundation_checkpoint = t.get_string("model.foundation_checkpoint", c.foundation_checkpoint);
    c.allow_substitute_encoder =
        t.get_bool("model.allow_substitute_encoder", c.allow_substitute_encoder);

    c.learning_rate = t.get_number("train.learning_rate", c.learning_rate);
    c.weight_decay = t.get_number("train.weight_decay", c.weight_decay);
    c.batch_size = t.get_int("train.batch_size", c.batch_size);
    c.max_epochs = t.get_int("train.max_epochs", c.max_epochs);
    c.early_stop_patience = t.get_int("train.patience", c.early_stop_patience);
    c.cutmix_alpha = t.get_number("train.cutmix_alpha", c.cutmix_alpha);
    if (t.has("train.use_cutmix")) c.use_cutmix = t.get_bool("train.use_cutmix", false) ? 1 : 0;

    c.threshold = t.get_number("evaluate.threshold", c.threshold);
    c.threshold_rule = t.get_string("evaluate.threshold_rule", c.threshold_rule);

    c.explain_model = t.get_string("explain.model", c.explain_model);
    c.overlay_alpha = t.get_number("explain.alpha", c.overlay_alpha);
    c.explain_images = t.get_string_array("explain.images", c.explain_images);
    c.explain_count = t.get_int("explain.count", c.explain_count);

    c.synth_n = t.get_int("synth.n", c.synth_n);
    c.synth_image_size = t.get_int("synth.image_size", c.synth_image_size);
    c.synth_dir = t.get_string("synth.out_dir", c.synth_dir);
    return c;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    return from_tree(ConfigTree::parse_file(path));
  }

  void validate() const {
    if (task_id < 1 || task_id > 3) throw ConfigError("run.task must be 1, 2 or 3");
    if (domain != "rgb" && domain != "frequency" && domain != "both")
      throw ConfigError("run.domain must be rgb, frequency or both");
    if (threshold_rule != "fixed" && threshold_rule != "youden-validation")
      throw ConfigError("evaluate.threshold_rule must be fixed or youden-validation");
    if (!(clip_percentile > 0.0 && clip_percentile <= 1.0))
      throw ConfigError("frequency.clip_percentile must be in (0, 1]");
  }

  /// The merged effective configuration, written next to every output set.
  std::string to_toml() const {
    std::ostringstream s;
    s << std::setprecision(12);
    s << "[run]\n";
    s << "manifest = \"" << manifest << "\"\n";
    s << "output_dir = \"" << output_dir << "\"\n";
    s << "task = " << task_id << "\n";
    s << "domain = \"" << domain << "\"\n";
    s << "seed = " << seed << "\n";
    s << "architectures = [";
    for (size_t i = 0; i < architectures.size(); ++i)
      s << (i ? ", " : "") << '"' << architectures[i] << '"';
    s << "]\n";
    s << "force = " << (force ? "true" : "false") << "\n\n";
    s << "[split]\n";
    s << "ratios = [" << split_ratios[0] << ", " << split_ratios[1] << ", " << split_ratios[2]
      << "]\n";
    s << "seed = " << split_seed << "\n\n";
    s << "[spatial]\n";
    s << "crop_size = " << crop_size << "\n";
    s << "resize_target = " << resize_target << "\n";
    s << "neutral_offset = " << neutral_offset << "\n";
    s << "blur_scale = " << blur_scale << "\n";
    s << "pad_if_needed = " << (pad_if_needed ? "true" : "false") << "\n";
    s << "hflip_prob = " << hflip_prob << "\n";
    s << "vflip_prob = " << vflip_prob << "\n";
    s << "rotation_degrees_max = " << rotation_degrees_max << "\n";
    s << "zoom_lo = " << zoom_lo << "\n";
    s << "zoom_hi = " << zoom_hi << "\n\n";
    s << "[frequency]\n";
    s << "clip_percentile = " << clip_percentile << "\n\n";
    s << "[model]\n";
    s << "input_size = " << input_size << "\n";
    s << "unfreeze_fraction = " << unfreeze_fraction << "\n";
    s << "vit_depth = " << vit_depth << "\n";
    s << "foundation_depth = " << foundation_depth << "\n";
    s << "foundation_checkpoint = \"" << foundation_checkpoint << "\"\n";
    s << "allow_substitute_encoder = " << (allow_substitute_encoder ? "true" : "false") << "\n\n";
    s << "[train]\n";
    s << "learning_rate = " << learning_rate << "\n";
    s << "weight_decay = " << weight_decay << "\n";
    s << "batch_size = " << batch_size << "\n";
    s << "max_epochs = " << max_epochs << "\n";
    s << "patience = " << early_stop_patience << "\n";
    s << "cutmix_alpha = " << cutmix_alpha << "\n";
    if (use_cutmix >= 0) s << "use_cutmix = " << (use_cutmix ? "true" : "false") << "\n";
    s << "\n[evaluate]\n";
    s << "threshold = " << threshold << "\n";
    s << "threshold_rule = \"" << threshold_rule << "\"\n\n";
    s << "[explain]\n";
    s << "model = \"" << explain_model << "\"\n";
    s << "alpha = " << overlay_alpha << "\n";
    s << "count = " << explain_count << "\n\n";
    s << "[synth]\n";
    s << "n = " << synth_n << "\n";
    s << "image_size = " << synth_image_size << "\n";
    s << "out_dir = \"" << synth_dir << "\"\n";
    return s.str();
  }
};

}  // namespace uwf
