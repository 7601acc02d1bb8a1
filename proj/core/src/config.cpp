#include "adafocus/config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "adafocus/serialize.hpp"

namespace adafocus {

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
  throw ConfigError("config: " + key + " = '" + value + "' is not " + want);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) bad_value(key, value, "an integer");
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  double out = 0.0;
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) bad_value(key, value, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value, "a boolean (true/false)");
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::vector<double> parse_double_list(const std::string& key, const std::string& value) {
  std::vector<double> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(key, trim(item)));
  if (out.empty()) bad_value(key, value, "a comma-separated list of numbers");
  return out;
}

std::string format_double_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_double(v[i]);
  }
  return out;
}

using Getter = std::function<std::string(const RunConfig&)>;
using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

struct Field {
  std::string section;
  std::string key;
  Getter get;
  Setter set;
};

// Accessor-based helpers: `acc` returns a mutable reference into RunConfig.
template <typename Acc>
Field integer(std::string section, std::string key, Acc acc) {
  return {section, key,
          [acc](const RunConfig& c) { return std::to_string(acc(const_cast<RunConfig&>(c))); },
          [acc](RunConfig& c, const std::string& k, const std::string& v) {
            using T = std::remove_reference_t<decltype(acc(c))>;
            acc(c) = parse_integer<T>(k, v);
          }};
}

template <typename Acc>
Field real(std::string section, std::string key, Acc acc) {
  return {section, key,
          [acc](const RunConfig& c) { return format_double(acc(const_cast<RunConfig&>(c))); },
          [acc](RunConfig& c, const std::string& k, const std::string& v) {
            acc(c) = parse_double(k, v);
          }};
}

template <typename Acc>
Field boolean(std::string section, std::string key, Acc acc) {
  return {section, key,
          [acc](const RunConfig& c) {
            return std::string(acc(const_cast<RunConfig&>(c)) ? "true" : "false");
          },
          [acc](RunConfig& c, const std::string& k, const std::string& v) {
            acc(c) = parse_bool(k, v);
          }};
}

void add_stage_fields(std::vector<Field>& f, const std::string& name, StageConfig TrainingPlan::*member) {
  auto st = [member](RunConfig& c) -> StageConfig& { return c.plan.*member; };
  f.push_back(integer(name, "epochs", [st](RunConfig& c) -> int& { return st(c).epochs; }));
  f.push_back(integer(name, "batch_size", [st](RunConfig& c) -> int& { return st(c).batch_size; }));
  f.push_back(real(name, "learning_rate", [st](RunConfig& c) -> double& { return st(c).learning_rate; }));
  f.push_back(real(name, "momentum", [st](RunConfig& c) -> double& { return st(c).momentum; }));
  f.push_back(real(name, "weight_decay", [st](RunConfig& c) -> double& { return st(c).weight_decay; }));
  f.push_back(real(name, "max_grad_norm", [st](RunConfig& c) -> double& { return st(c).max_grad_norm; }));
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(integer("run", "seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; }));
    f.push_back({"run", "runs_dir", [](const RunConfig& c) { return c.runs_dir; },
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   if (v.empty()) bad_value(k, v, "a non-empty path");
                   c.runs_dir = v;
                 }});

    f.push_back(integer("data", "num_classes", [](RunConfig& c) -> int& { return c.data.num_classes; }));
    f.push_back(integer("data", "frames", [](RunConfig& c) -> int& { return c.data.frames; }));
    f.push_back(integer("data", "frame_size", [](RunConfig& c) -> int& { return c.data.frame_size; }));
    f.push_back(integer("data", "glyph_size", [](RunConfig& c) -> int& { return c.data.glyph_size; }));
    f.push_back(integer("data", "num_distractors", [](RunConfig& c) -> int& { return c.data.num_distractors; }));
    f.push_back(integer("data", "max_step", [](RunConfig& c) -> int& { return c.data.max_step; }));
    f.push_back(real("data", "noise_std", [](RunConfig& c) -> double& { return c.data.noise_std; }));
    f.push_back(real("data", "distractor_level", [](RunConfig& c) -> double& { return c.data.distractor_level; }));
    f.push_back(integer("data", "channels", [](RunConfig& c) -> int& { return c.data.channels; }));
    f.push_back(integer("data", "train_size", [](RunConfig& c) -> int& { return c.sizes.train; }));
    f.push_back(integer("data", "calibration_size", [](RunConfig& c) -> int& { return c.sizes.calibration; }));
    f.push_back(integer("data", "test_size", [](RunConfig& c) -> int& { return c.sizes.test; }));

    f.push_back(integer("model", "patch_size", [](RunConfig& c) -> int& { return c.plan.bundle.patch_size; }));
    f.push_back(integer("model", "grid_k", [](RunConfig& c) -> int& { return c.plan.bundle.grid_k; }));
    f.push_back({"model", "glance_layers",
                 [](const RunConfig& c) { return format_backbone(c.plan.bundle.glance_spec); },
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   c.plan.bundle.glance_spec = parse_backbone(v, c.data.channels);
                 }});
    f.push_back({"model", "focus_layers",
                 [](const RunConfig& c) { return format_backbone(c.plan.bundle.focus_spec); },
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   c.plan.bundle.focus_spec = parse_backbone(v, c.data.channels);
                 }});
    f.push_back({"model", "classifier",
                 [](const RunConfig& c) { return std::string(to_string(c.plan.bundle.classifier_kind)); },
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   c.plan.bundle.classifier_kind = nn::parse_classifier_kind(v);
                 }});
    f.push_back(integer("model", "classifier_hidden",
                        [](RunConfig& c) -> int& { return c.plan.bundle.classifier_hidden; }));
    f.push_back(integer("model", "policy_channels",
                        [](RunConfig& c) -> int& { return c.plan.bundle.policy_channels; }));
    f.push_back(integer("model", "policy_hidden", [](RunConfig& c) -> int& { return c.plan.bundle.policy_hidden; }));
    f.push_back(boolean("model", "feature_reuse", [](RunConfig& c) -> bool& { return c.plan.bundle.feature_reuse; }));
    f.push_back(boolean("model", "adafocus_plus", [](RunConfig& c) -> bool& { return c.plan.bundle.adafocus_plus; }));

    f.push_back(boolean("pretrain", "skip", [](RunConfig& c) -> bool& { return c.plan.skip_pretrain; }));
    add_stage_fields(f, "pretrain", &TrainingPlan::pretrain);
    add_stage_fields(f, "stage1", &TrainingPlan::stage1);
    f.push_back(integer("stage2", "epochs", [](RunConfig& c) -> int& { return c.plan.stage2.epochs; }));
    f.push_back({"stage2", "reward",
                 [](const RunConfig& c) { return std::string(to_string(c.plan.stage2.reward)); },
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   c.plan.stage2.reward = parse_reward_kind(v);
                 }});
    f.push_back(real("stage2", "lambda", [](RunConfig& c) -> double& { return c.plan.stage2.skip_lambda; }));
    f.push_back(real("stage2", "gamma", [](RunConfig& c) -> double& { return c.plan.stage2.ppo.gamma; }));
    f.push_back(real("stage2", "clip_epsilon", [](RunConfig& c) -> double& { return c.plan.stage2.ppo.clip_epsilon; }));
    f.push_back(integer("stage2", "ppo_epochs",
                        [](RunConfig& c) -> int& { return c.plan.stage2.ppo.epochs_per_batch; }));
    f.push_back(real("stage2", "value_loss_coef",
                     [](RunConfig& c) -> double& { return c.plan.stage2.ppo.value_loss_coef; }));
    f.push_back(real("stage2", "entropy_coef", [](RunConfig& c) -> double& { return c.plan.stage2.ppo.entropy_coef; }));
    f.push_back(real("stage2", "learning_rate",
                     [](RunConfig& c) -> double& { return c.plan.stage2.ppo.learning_rate; }));
    f.push_back(integer("stage2", "batch_size", [](RunConfig& c) -> int& { return c.plan.stage2.ppo.batch_size; }));
    f.push_back(real("stage2", "max_grad_norm", [](RunConfig& c) -> double& { return c.plan.stage2.ppo.max_grad_norm; }));
    add_stage_fields(f, "stage3", &TrainingPlan::stage3);
    f.push_back(boolean("stage3", "train_focus", [](RunConfig& c) -> bool& { return c.plan.stage3.train_focus; }));
    f.push_back(boolean("stage3", "sample_policy", [](RunConfig& c) -> bool& { return c.plan.stage3.sample_policy; }));
    f.push_back(real("stage3", "min_keep_fraction", [](RunConfig& c) -> double& { return c.plan.stage3.min_keep_fraction; }));

    f.push_back({"eval", "mode", [](const RunConfig& c) { return std::string(to_string(c.eval.mode)); },
                 [](RunConfig& c, const std::string&, const std::string& v) { c.eval.mode = parse_eval_mode(v); }});
    f.push_back({"eval", "policy", [](const RunConfig& c) { return std::string(to_string(c.eval.policy)); },
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   c.eval.policy = parse_policy_variant(v);
                 }});
    f.push_back(boolean("eval", "use_skip", [](RunConfig& c) -> bool& { return c.eval.use_skip; }));
    f.push_back(boolean("eval", "hold_model_constant",
                        [](RunConfig& c) -> bool& { return c.eval.hold_model_constant; }));
    f.push_back({"eval", "etas", [](const RunConfig& c) { return format_double_list(c.eval.etas); },
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   c.eval.etas = parse_double_list(k, v);
                 }});
    f.push_back(real("eval", "calibration_eta", [](RunConfig& c) -> double& { return c.eval.calibration_eta; }));
    f.push_back(integer("eval", "consistency_samples",
                        [](RunConfig& c) -> int& { return c.eval.consistency_samples; }));
    return f;
  }();
  return table;
}

const Field& find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields()) {
    if (f.section == section && f.key == key) return f;
  }
  throw ConfigError("config: unknown key '" + section + "." + key + "'");
}

void set_field(RunConfig& c, const std::string& section, const std::string& key, const std::string& value) {
  const auto& f = find_field(section, key);
  try {
    f.set(c, section + "." + key, trim(value));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config: " + section + "." + key + ": " + e.what());
  }
}

}  // namespace

RunConfig::RunConfig() { sync(); }

void RunConfig::sync() {
  auto& b = plan.bundle;
  b.channels = data.channels;
  b.frame_size = data.frame_size;
  b.num_classes = data.num_classes;
  b.glance_spec.input_channels = data.channels;
  b.focus_spec.input_channels = data.channels;
}

void RunConfig::validate() const {
  data.validate();
  if (sizes.train < data.num_classes || sizes.calibration < 1 || sizes.test < 1) {
    throw ConfigError("config: split sizes must be positive and train_size >= num_classes");
  }
  if (plan.bundle.channels != data.channels || plan.bundle.frame_size != data.frame_size ||
      plan.bundle.num_classes != data.num_classes) {
    throw ConfigError("config: model shape disagrees with data (call sync)");
  }
  plan.bundle.validate();
  plan.pretrain.validate();
  plan.stage1.validate();
  plan.stage2.validate();
  plan.stage3.validate();
  if (plan.pretrain.stage != Stage::kPretrain || plan.stage1.stage != Stage::kStage1 ||
      plan.stage2.stage != Stage::kStage2 || plan.stage3.stage != Stage::kStage3) {
    throw ConfigError("config: stage sections carry the wrong stage tag");
  }
  if (eval.etas.empty()) throw ConfigError("config: eval.etas is empty");
  for (double e : eval.etas) {
    if (!(e > 0.0 && e <= 1.0)) throw ConfigError("config: eval.etas entries must lie in (0, 1]");
  }
  if (!(eval.calibration_eta > 0.0 && eval.calibration_eta <= 1.0)) {
    throw ConfigError("config: eval.calibration_eta must lie in (0, 1]");
  }
  if (eval.consistency_samples < 1) throw ConfigError("config: eval.consistency_samples must be >= 1");
  if (eval.use_skip && !plan.bundle.adafocus_plus) {
    throw ConfigError("config: eval.use_skip requires model.adafocus_plus");
  }
}

RunConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
  RunConfig c;
  // Data first: layer specs and sync depend on the channel count.
  std::vector<std::pair<std::string, std::string>> later;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError("config: key '" + section + "' outside any section");
    }
    for (const auto& [key, value] : body) {
      if (!value.empty()) throw ConfigError("config: nested key under " + section + "." + key);
      if (section == "data") {
        set_field(c, section, key, value.data());
      } else {
        find_field(section, key);
        later.emplace_back(section + "." + key, value.data());
      }
    }
  }
  c.sync();
  for (const auto& [name, value] : later) {
    const auto dot = name.find('.');
    set_field(c, name.substr(0, dot), name.substr(dot + 1), value);
  }
  c.sync();
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const Error& e) {
    throw ConfigError("config: cannot read " + path.string() + ": " + e.what());
  }
  return parse_config(text);
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("config: override '" + assignment + "' is not section.key=value");
  }
  const auto section = trim(assignment.substr(0, dot));
  const auto key = trim(assignment.substr(dot + 1, eq - dot - 1));
  set_field(config, section, key, assignment.substr(eq + 1));
  if (section == "data" && key == "channels") {
    config.plan.bundle.glance_spec.input_channels = config.data.channels;
    config.plan.bundle.focus_spec.input_channels = config.data.channels;
  }
  config.sync();
}

std::string render_config(const RunConfig& config) {
  std::ostringstream os;
  std::string current;
  for (const auto& f : fields()) {
    if (f.section != current) {
      if (!current.empty()) os << '\n';
      os << '[' << f.section << "]\n";
      current = f.section;
    }
    os << f.key << " = " << f.get(config) << '\n';
  }
  return os.str();
}

std::uint64_t config_hash(const RunConfig& config) {
  RunConfig c = config;
  c.seed = 0;
  c.runs_dir = "-";
  return fnv1a(render_config(c));
}

std::string run_dir_name(const RunConfig& config) {
  return hex64(config_hash(config)).substr(0, 12) + "-s" + std::to_string(config.seed);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.section + "." + f.key);
  return out;
}

nn::ConvBackboneSpec parse_backbone(const std::string& text, int input_channels) {
  nn::ConvBackboneSpec spec;
  spec.input_channels = input_channels;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    const auto x = item.find('x');
    const auto slash = item.find('/');
    if (x == std::string::npos || slash == std::string::npos || slash < x) {
      throw ConfigError("config: layer '" + item + "' is not <channels>x<kernel>/<stride>");
    }
    nn::ConvLayerSpec l;
    l.out_channels = parse_integer<int>("layer channels", item.substr(0, x));
    l.kernel = parse_integer<int>("layer kernel", item.substr(x + 1, slash - x - 1));
    l.stride = parse_integer<int>("layer stride", item.substr(slash + 1));
    l.act = nn::Nonlinearity::kRelu;
    spec.layers.push_back(l);
  }
  if (spec.layers.empty()) throw ConfigError("config: backbone has no layers");
  spec.validate();
  return spec;
}

std::string format_backbone(const nn::ConvBackboneSpec& spec) {
  std::string out;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (i) out += ',';
    out += std::to_string(l.out_channels) + 'x' + std::to_string(l.kernel) + '/' + std::to_string(l.stride);
  }
  return out;
}

}  // namespace adafocus
