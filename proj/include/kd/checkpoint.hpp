#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kd/models.hpp"

namespace kd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Versioned training snapshot: backbone identity, every named parameter at
// exact float32 precision, optimizer momentum, schedule counters, and the
// loop's random-engine state. Round-trips losslessly; readers refuse other
// format versions.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  BackboneSpec spec;
  std::int64_t epoch = 0;
  double best_val_loss = 0.0;
  std::int64_t epochs_since_improve = 0;
  double learning_rate = 0.0;
  std::string rng_state;
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::pair<std::string, Tensor>> momentum;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);

// Throws CheckpointError (with the failing byte offset) on corrupt input and
// on version mismatch; NotFoundError when the file does not exist.
Checkpoint load_checkpoint(const std::string& path);

// Captures spec + parameters of a model (no schedule state).
Checkpoint snapshot_model(const Model& model);

// Copies checkpoint parameters into an already built model; names and shapes
// must match exactly.
void apply_parameters(Model& model, const Checkpoint& ckpt);

// Builds the checkpoint's backbone and restores its parameters.
Model restore_model(const Checkpoint& ckpt);

// Fills a freshly built model from a weights file named by its spec's
// pretrained_source. Missing file -> UnavailableError (never a silent random
// fallback); wrong backbone or shape -> InvalidArgument.
void load_pretrained_into(Model& model, const std::string& source);

}  // namespace kd
