#include "kd/config.hpp"

#include <cctype>
#include <cerrno>
#include <cstdlib>
#include <fstream>

#include "kd/errors.hpp"

extern char** environ;

namespace kd {
namespace {

enum class Kind { kInt, kUint, kReal, kBool, kString, kSeeds, kMethod };

struct KeySpec {
  const char* name;
  Kind kind;
};

// The whole flat key set; resolution walks this table, so adding a key here
// is the single change needed to expose a new knob.
constexpr KeySpec kKeys[] = {
    {"method", Kind::kMethod},
    {"seed", Kind::kUint},
    {"seeds", Kind::kSeeds},
    {"data_root", Kind::kString},
    {"run_dir", Kind::kString},
    {"teacher", Kind::kString},
    {"student", Kind::kString},
    {"teacher_ckpt", Kind::kString},
    {"toy", Kind::kBool},
    {"batch_size", Kind::kInt},
    {"max_epochs", Kind::kInt},
    {"learning_rate", Kind::kReal},
    {"momentum", Kind::kReal},
    {"weight_decay", Kind::kReal},
    {"lr_patience", Kind::kInt},
    {"lr_factor", Kind::kReal},
    {"early_stop_patience", Kind::kInt},
    {"ss_views", Kind::kInt},
    {"temperature", Kind::kReal},
    {"lambda_kd", Kind::kReal},
    {"lambda_d", Kind::kReal},
    {"lambda_a", Kind::kReal},
    {"huber_delta", Kind::kReal},
    {"lambda_blkd", Kind::kReal},
    {"lambda_drkd", Kind::kReal},
    {"lambda_crkd", Kind::kReal},
    {"lambda_sskd", Kind::kReal},
    {"ss_temperature", Kind::kReal},
    {"augment", Kind::kBool},
    {"noise_sigma", Kind::kReal},
    {"test_fraction", Kind::kReal},
    {"val_fraction", Kind::kReal},
    {"split_seed", Kind::kUint},
    {"input_size", Kind::kInt},
};

const KeySpec* find_key(const std::string& name) {
  for (const auto& k : kKeys)
    if (name == k.name) return &k;
  return nullptr;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& detail) {
  throw ConfigError("config key '" + key + "': " + detail);
}

std::int64_t parse_int(const std::string& key, const std::string& text) {
  errno = 0;
  char* end = nullptr;
  long long v = std::strtoll(text.c_str(), &end, 10);
  if (errno != 0 || end == text.c_str() || *end != '\0')
    bad_value(key, "expected an integer, got '" + text + "'");
  return static_cast<std::int64_t>(v);
}

std::uint64_t parse_uint(const std::string& key, const std::string& text) {
  errno = 0;
  char* end = nullptr;
  unsigned long long v = std::strtoull(text.c_str(), &end, 10);
  if (errno != 0 || end == text.c_str() || *end != '\0' || text.find('-') != std::string::npos)
    bad_value(key, "expected a non-negative integer, got '" + text + "'");
  return static_cast<std::uint64_t>(v);
}

double parse_real(const std::string& key, const std::string& text) {
  errno = 0;
  char* end = nullptr;
  double v = std::strtod(text.c_str(), &end);
  if (errno != 0 || end == text.c_str() || *end != '\0')
    bad_value(key, "expected a number, got '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  bad_value(key, "expected true/false/1/0, got '" + text + "'");
}

std::vector<std::uint64_t> parse_seeds(const std::string& key, const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t comma = text.find(',', start);
    std::string part = text.substr(start, comma == std::string::npos ? comma : comma - start);
    if (part.empty()) bad_value(key, "expected comma-separated integers, got '" + text + "'");
    seeds.push_back(parse_uint(key, part));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (seeds.empty()) bad_value(key, "seed list is empty");
  return seeds;
}

// A single override, already typed.
struct Value {
  std::int64_t i = 0;
  std::uint64_t u = 0;
  double r = 0.0;
  bool b = false;
  std::string s;
  std::vector<std::uint64_t> seeds;
  Method method = Method::kSsdKd;
};

Value value_from_string(const KeySpec& spec, const std::string& text) {
  Value v;
  switch (spec.kind) {
    case Kind::kInt: v.i = parse_int(spec.name, text); break;
    case Kind::kUint: v.u = parse_uint(spec.name, text); break;
    case Kind::kReal: v.r = parse_real(spec.name, text); break;
    case Kind::kBool: v.b = parse_bool(spec.name, text); break;
    case Kind::kString: v.s = text; break;
    case Kind::kSeeds: v.seeds = parse_seeds(spec.name, text); break;
    case Kind::kMethod:
      try {
        v.method = parse_method(text);
      } catch (const NotFoundError& e) {
        throw ConfigError(e.what());
      }
      break;
  }
  return v;
}

Value value_from_json(const KeySpec& spec, const nlohmann::json& j) {
  const std::string key = spec.name;
  Value v;
  switch (spec.kind) {
    case Kind::kInt:
      if (!j.is_number_integer()) bad_value(key, "expected an integer");
      v.i = j.get<std::int64_t>();
      break;
    case Kind::kUint:
      if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0))
        bad_value(key, "expected a non-negative integer");
      v.u = j.get<std::uint64_t>();
      break;
    case Kind::kReal:
      if (!j.is_number()) bad_value(key, "expected a number");
      v.r = j.get<double>();
      break;
    case Kind::kBool:
      if (!j.is_boolean()) bad_value(key, "expected a boolean");
      v.b = j.get<bool>();
      break;
    case Kind::kString:
      if (!j.is_string()) bad_value(key, "expected a string");
      v.s = j.get<std::string>();
      break;
    case Kind::kSeeds:
      if (j.is_string()) {
        v.seeds = parse_seeds(key, j.get<std::string>());
      } else if (j.is_array()) {
        for (const auto& item : j) {
          if (!item.is_number_integer() && !item.is_number_unsigned())
            bad_value(key, "expected an array of integers");
          if (item.is_number_integer() && item.get<std::int64_t>() < 0)
            bad_value(key, "seeds must be non-negative");
          v.seeds.push_back(item.get<std::uint64_t>());
        }
        if (v.seeds.empty()) bad_value(key, "seed list is empty");
      } else {
        bad_value(key, "expected an array of integers or a comma-separated string");
      }
      break;
    case Kind::kMethod:
      if (!j.is_string()) bad_value(key, "expected a method name string");
      try {
        v.method = parse_method(j.get<std::string>());
      } catch (const NotFoundError& e) {
        throw ConfigError(e.what());
      }
      break;
  }
  return v;
}

void apply(RunConfig& cfg, const std::string& key, const Value& v) {
  DistillConfig& d = cfg.distill;
  LossWeights& lw = d.loss_weights;
  if (key == "method") d.method = v.method;
  else if (key == "seed") d.seed = v.u;
  else if (key == "seeds") cfg.seeds = v.seeds;
  else if (key == "data_root") cfg.data_root = v.s;
  else if (key == "run_dir") cfg.run_dir = v.s;
  else if (key == "teacher") cfg.teacher = v.s;
  else if (key == "student") cfg.student = v.s;
  else if (key == "teacher_ckpt") cfg.teacher_ckpt = v.s;
  else if (key == "toy") cfg.toy = v.b;  // already folded into the defaults
  else if (key == "batch_size") d.batch_size = v.i;
  else if (key == "max_epochs") d.max_epochs = v.i;
  else if (key == "learning_rate") d.optimizer.learning_rate = v.r;
  else if (key == "momentum") d.optimizer.momentum = v.r;
  else if (key == "weight_decay") d.optimizer.weight_decay = v.r;
  else if (key == "lr_patience") d.lr_patience = v.i;
  else if (key == "lr_factor") d.lr_factor = v.r;
  else if (key == "early_stop_patience") d.early_stop_patience = v.i;
  else if (key == "ss_views") d.ss_views = v.i;
  else if (key == "temperature") lw.temperature = v.r;
  else if (key == "lambda_kd") lw.lambda_kd = v.r;
  else if (key == "lambda_d") lw.lambda_d = v.r;
  else if (key == "lambda_a") lw.lambda_a = v.r;
  else if (key == "huber_delta") lw.huber_delta = v.r;
  else if (key == "lambda_blkd") lw.lambda_blkd = v.r;
  else if (key == "lambda_drkd") lw.lambda_drkd = v.r;
  else if (key == "lambda_crkd") lw.lambda_crkd = v.r;
  else if (key == "lambda_sskd") lw.lambda_sskd = v.r;
  else if (key == "ss_temperature") lw.ss_temperature = v.r;
  else if (key == "augment") d.augmentation = v.b ? AugmentPolicy() : AugmentPolicy::none();
  else if (key == "noise_sigma") d.augmentation.noise_sigma = v.r;
  else if (key == "test_fraction") cfg.test_fraction = v.r;
  else if (key == "val_fraction") cfg.val_fraction = v.r;
  else if (key == "split_seed") cfg.split_seed = v.u;
  else if (key == "input_size") cfg.input_size = v.i;
  else throw ConfigError("unknown config key '" + key + "'");
}

// Toy scale: tiny backbones, small batches, and a channel-relation weight
// calibrated for tiny Gram magnitudes (the paper-scale 1000 assumes
// large-backbone feature maps).
void apply_toy_profile(RunConfig& cfg) {
  cfg.toy = true;
  cfg.teacher = "tiny-teacher";
  cfg.student = "tiny-student";
  cfg.distill.batch_size = 16;
  cfg.distill.loss_weights.lambda_crkd = 1.0;
}

bool layer_sets_toy(const nlohmann::json& file, const std::map<std::string, std::string>& env,
                    const std::map<std::string, std::string>& flags) {
  bool toy = false;
  if (file.is_object() && file.contains("toy")) {
    if (!file.at("toy").is_boolean()) bad_value("toy", "expected a boolean");
    toy = file.at("toy").get<bool>();
  }
  auto it = env.find("toy");
  if (it != env.end()) toy = parse_bool("toy", it->second);
  it = flags.find("toy");
  if (it != flags.end()) toy = parse_bool("toy", it->second);
  return toy;
}

}  // namespace

nlohmann::ordered_json RunConfig::to_json() const {
  const DistillConfig& d = distill;
  const LossWeights& lw = d.loss_weights;
  nlohmann::ordered_json j;
  j["method"] = method_name(d.method);
  j["seed"] = d.seed;
  if (!seeds.empty()) j["seeds"] = seeds;
  j["data_root"] = data_root;
  j["run_dir"] = run_dir;
  j["teacher"] = teacher;
  j["student"] = student;
  j["teacher_ckpt"] = teacher_ckpt;
  j["toy"] = toy;
  j["batch_size"] = d.batch_size;
  j["max_epochs"] = d.max_epochs;
  j["learning_rate"] = d.optimizer.learning_rate;
  j["momentum"] = d.optimizer.momentum;
  j["weight_decay"] = d.optimizer.weight_decay;
  j["lr_patience"] = d.lr_patience;
  j["lr_factor"] = d.lr_factor;
  j["early_stop_patience"] = d.early_stop_patience;
  j["ss_views"] = d.ss_views;
  j["temperature"] = lw.temperature;
  j["lambda_kd"] = lw.lambda_kd;
  j["lambda_d"] = lw.lambda_d;
  j["lambda_a"] = lw.lambda_a;
  j["huber_delta"] = lw.huber_delta;
  j["lambda_blkd"] = lw.lambda_blkd;
  j["lambda_drkd"] = lw.lambda_drkd;
  j["lambda_crkd"] = lw.lambda_crkd;
  j["lambda_sskd"] = lw.lambda_sskd;
  j["ss_temperature"] = lw.ss_temperature;
  j["augment"] = d.augmentation.flips || d.augmentation.brightness || d.augmentation.contrast ||
                 d.augmentation.saturation || d.augmentation.scaling || d.augmentation.noise;
  j["noise_sigma"] = d.augmentation.noise_sigma;
  j["test_fraction"] = test_fraction;
  j["val_fraction"] = val_fraction;
  j["split_seed"] = split_seed;
  j["input_size"] = input_size;
  return j;
}

RunConfig resolve_config(const nlohmann::json& file,
                         const std::map<std::string, std::string>& env,
                         const std::map<std::string, std::string>& flags) {
  if (!file.is_null() && !file.is_object())
    throw ConfigError("config file must hold a JSON object");

  RunConfig cfg;
  if (layer_sets_toy(file, env, flags)) apply_toy_profile(cfg);

  if (file.is_object()) {
    for (const auto& [key, value] : file.items()) {
      const KeySpec* spec = find_key(key);
      if (!spec) throw ConfigError("unknown config key '" + key + "'");
      apply(cfg, key, value_from_json(*spec, value));
    }
  }
  for (const auto* layer : {&env, &flags}) {
    for (const auto& [key, text] : *layer) {
      const KeySpec* spec = find_key(key);
      if (!spec) throw ConfigError("unknown config key '" + key + "'");
      apply(cfg, key, value_from_string(*spec, text));
    }
  }

  try {
    cfg.distill.validate();
    SplitSpec split;
    split.test_fraction = cfg.test_fraction;
    split.val_fraction = cfg.val_fraction;
    split.train_fraction = 1.0 - cfg.val_fraction;
    split.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (cfg.input_size < 0) throw ConfigError("input_size must be non-negative");
  return cfg;
}

std::map<std::string, std::string> environment_overrides() {
  std::map<std::string, std::string> out;
  const std::string prefix = kEnvPrefix;
  for (char** entry = environ; entry != nullptr && *entry != nullptr; ++entry) {
    std::string text = *entry;
    if (text.rfind(prefix, 0) != 0) continue;
    std::size_t eq = text.find('=');
    if (eq == std::string::npos) continue;
    std::string key = text.substr(prefix.size(), eq - prefix.size());
    for (char& c : key) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    out[key] = text.substr(eq + 1);
  }
  return out;
}

nlohmann::json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("config file not found: " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out;
    for (const auto& k : kKeys) out.emplace_back(k.name);
    return out;
  }();
  return keys;
}

}  // namespace kd
