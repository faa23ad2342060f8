#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "kd/data.hpp"
#include "kd/training.hpp"

namespace kd {

// Environment-variable prefix for config overrides (SKINKD_LEARNING_RATE,
// SKINKD_METHOD, ...). Keys are the lowercased remainder.
inline constexpr const char* kEnvPrefix = "SKINKD_";

// One fully resolved run setup: everything the commands need beyond the
// training loop itself.
struct RunConfig {
  DistillConfig distill;
  std::string data_root;
  std::string run_dir;
  std::string teacher = "resnet50";      // backbone name
  std::string student = "mobilenetv2";   // backbone name
  std::string teacher_ckpt;              // checkpoint path for distillation
  bool toy = false;
  std::vector<std::uint64_t> seeds;  // sweep seeds; empty -> {distill.seed}
  double test_fraction = 0.10;
  double val_fraction = 0.2;  // of the non-test remainder
  std::uint64_t split_seed = 0;
  std::int64_t input_size = 0;  // 0 -> backbone default

  // The full resolved document (config.snapshot content).
  nlohmann::ordered_json to_json() const;
};

// Layered resolution over a flat key set: defaults (paper profile, or the
// toy profile when any layer sets toy=true), then file, then environment,
// then flags — later layers win. Environment and flag values are strings and
// are parsed according to the key's type; the file uses native JSON types.
// Unknown keys, malformed values, and inconsistent results (via
// DistillConfig::validate) all throw ConfigError naming the offender.
RunConfig resolve_config(const nlohmann::json& file,
                         const std::map<std::string, std::string>& env,
                         const std::map<std::string, std::string>& flags);

// SKINKD_*-prefixed variables from the process environment, keyed by the
// lowercased suffix ("SKINKD_BATCH_SIZE=64" -> {"batch_size", "64"}).
std::map<std::string, std::string> environment_overrides();

// Loads and parses a JSON config file; NotFoundError / ConfigError.
nlohmann::json load_config_file(const std::string& path);

// The documented key set, for help text and error messages.
const std::vector<std::string>& config_keys();

}  // namespace kd
