#pragma once

#include <cstdint>

#include "kd/ops.hpp"
#include "kd/rng.hpp"

namespace kd {

// Knowledge representations consumed by the distillation losses: softened
// class probabilities, inter-instance geometric potentials over embeddings,
// per-instance channel Gram matrices, and the trainable channel adapter that
// makes student feature maps commensurable with the teacher's.

// Row-wise softmax of logits/temperature. logits: (B,C) with B >= 1, C >= 2.
Var softened_probabilities(const Var& logits, double temperature);

// Pairwise Euclidean distances divided by their batch mean. `degenerate` is
// set (and values are all zero, no division) when every embedding coincides.
struct DistancePotential {
  Var values;  // (B,B), zero diagonal, symmetric
  bool degenerate = false;
};
DistancePotential distance_potential(const Var& embeddings);

// Cosine of the angle at vertex e_j for every ordered triple (i,j,k) of
// distinct indices. Triples containing a coincident pair are masked: value 0,
// no gradient.
struct AnglePotential {
  Var values;         // (B,B,B)
  Tensor valid_mask;  // 1.0 where the angle is defined
  bool has_degenerate_triples = false;
};
AnglePotential angle_potential(const Var& embeddings);

// Per-instance channel similarity: (B,K,H,W) -> (B,K,K) with
// R[k,k'] = <Vec(f_k), Vec(f_k')>. Symmetric positive semidefinite.
Var channel_relation_matrix(const Var& features);

// Trainable 1x1 projection from the student's channel count to the
// teacher's. Parameters are leaf Vars owned by this object; register them
// with the student's optimizer.
class ChannelAdapter {
 public:
  ChannelAdapter(std::int64_t student_channels, std::int64_t teacher_channels,
                 Rng& rng);

  std::int64_t in_channels() const { return in_channels_; }
  std::int64_t out_channels() const { return out_channels_; }
  const Var& weight() const { return weight_; }
  const Var& bias() const { return bias_; }
  std::vector<Var> parameters() const { return {weight_, bias_}; }

 private:
  std::int64_t in_channels_;
  std::int64_t out_channels_;
  Var weight_;  // (K_teacher, K_student, 1, 1)
  Var bias_;    // (K_teacher)
};

// Projects student feature maps onto the teacher's channel count, bilinearly
// resizing to (target_h, target_w) first when the spatial sizes differ.
Var adapt_channels(const Var& student_features, const ChannelAdapter& adapter,
                   std::int64_t target_h, std::int64_t target_w);

}  // namespace kd
