#pragma once

#include <string>
#include <utility>
#include <vector>

#include "kd/ops.hpp"
#include "kd/rng.hpp"

namespace kd {

// Backbone identity plus the knobs a caller may adjust before building
// (class count, input size). Registry defaults come from backbone_spec().
struct BackboneSpec {
  std::string name;
  std::int64_t input_h = 32;
  std::int64_t input_w = 32;
  std::int64_t input_channels = 3;
  std::int64_t class_count = 8;
  std::int64_t embedding_width = 0;     // width after global average pooling
  std::int64_t last_conv_channels = 0;  // K of the final feature maps
  std::int64_t projection_dim = 128;    // contrastive head output width
  std::string pretrained_source;        // optional checkpoint to load from

  void validate() const;
};

// The three knowledge carriers from one forward pass.
struct ModelTaps {
  Var features;   // (B, K, Hf, Wf) last conv block output
  Var embedding;  // (B, D) global average pool of features
  Var logits;     // (B, C)
};

// A built backbone: conv-norm-relu blocks with stride-2 downsampling, global
// average pooling, one FC classifier, and a two-layer projection head for
// the contrastive objective. All parameters are leaf Vars; handles returned
// by parameters() share state with the model.
class Model {
 public:
  const BackboneSpec& spec() const { return spec_; }

  // One pass computing all three taps; differentiable end to end.
  ModelTaps forward_with_taps(const Var& images) const;

  // Contrastive projection of embeddings: (B, D) -> (B, projection_dim).
  Var project(const Var& embeddings) const;

  // Named parameters in a stable order (the checkpoint key order).
  const std::vector<std::pair<std::string, Var>>& named_parameters() const {
    return params_;
  }
  std::vector<Var> parameters() const;
  Var parameter(const std::string& name) const;  // NotFoundError if absent

  // Rounds every parameter to float32 precision (storage contract: the
  // checkpoint holds exact 32-bit values, so training re-quantizes after
  // every update to keep memory and disk in agreement).
  void quantize_parameters();

  // Freeze/unfreeze: frozen models record no tape during forward.
  void set_trainable(bool trainable);
  bool trainable() const { return trainable_; }

 private:
  friend Model build_backbone(const BackboneSpec& spec, std::uint64_t seed);

  struct Block {
    Var conv_w, conv_b;  // 3x3 stride-2 convolution
    Var gamma, beta;     // per-channel normalization affine
  };

  BackboneSpec spec_;
  std::vector<Block> blocks_;
  Var fc_w_, fc_b_;
  Var proj_w1_, proj_b1_, proj_w2_, proj_b2_;
  std::vector<std::pair<std::string, Var>> params_;
  bool trainable_ = true;
};

// Names available to build_backbone, in registry order.
std::vector<std::string> registered_backbones();

// Registry defaults for a name; NotFoundError lists the registry on a miss.
BackboneSpec backbone_spec(const std::string& name);

// Deterministic construction: the same (spec, seed) yields bit-identical
// parameters. If spec.pretrained_source is set, parameters are loaded from
// that checkpoint instead (UnavailableError when it cannot be provided;
// never a silent random fallback).
Model build_backbone(const BackboneSpec& spec, std::uint64_t seed);

}  // namespace kd
