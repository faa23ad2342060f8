#pragma once

#include <vector>

#include "kd/relations.hpp"

namespace kd {

// Distillation objectives. Every loss is a scalar Var with mean reduction
// over its enumerated terms (batch rows, ordered pairs, ordered triples,
// similarity rows), so the lambda weights are batch-size-independent.
// Teacher-side inputs are detached internally: gradients flow only into the
// student (teacher-is-constant contract).

// Per-class inverse-frequency weights w_c = N/(C*n_c); the average weight
// applied across the dataset is 1 (equivalently, harmonic mean 1).
struct ClassWeights {
  std::vector<double> weights;

  void validate() const;
  std::int64_t class_count() const { return static_cast<std::int64_t>(weights.size()); }
  static ClassWeights uniform(std::int64_t class_count);
};

// Every tunable balance constant in one place. Defaults follow the reference
// protocol: temperature 4 with a T^2-scaled soft term weighted 0.9 against
// the hard term; distance/angle terms at 1/2 with unit Huber threshold;
// composite weights (1, 1, 1000, 1); self-supervision softmax at 0.5.
struct LossWeights {
  double temperature = 4.0;
  double lambda_kd = 0.9;

  double lambda_d = 1.0;
  double lambda_a = 2.0;
  double huber_delta = 1.0;

  double lambda_blkd = 1.0;
  double lambda_drkd = 1.0;
  double lambda_crkd = 1000.0;
  double lambda_sskd = 1.0;

  double ss_temperature = 0.5;

  void validate() const;
};

// Projections of B*V augmented views, (B*V, P), plus the similarity softmax
// temperature they should be compared at.
struct SelfSupervisionBatch {
  Var projections;
  std::int64_t views = 0;
  double temperature = 0.5;
};

// Mean over rows of KL(teacher soft distribution || student soft
// distribution) at `temperature`, scaled by temperature^2.
Var kd_loss(const Var& teacher_logits, const Var& student_logits, double temperature);

// Mean over rows of -w_{y_i} * log softmax(student_logits)[y_i].
Var weighted_cross_entropy(const Var& student_logits, const std::vector<int>& labels,
                           const ClassWeights& weights);

// (1 - lambda_kd) * WCE + lambda_kd * KD.
Var blkd_loss(const Var& teacher_logits, const Var& student_logits,
              const std::vector<int>& labels, const ClassWeights& weights,
              const LossWeights& lw);

// lambda_d * mean-pair Huber(distance potentials) +
// lambda_a * mean-triple Huber(angle potentials). B = 2 computes the
// distance term only.
Var drkd_loss(const Var& teacher_embeddings, const Var& student_embeddings,
              const LossWeights& lw);

// Mean over instances of ||R_teacher - R_student||_F / (K * H * W), Gram
// matrices of the (already channel-adapted) feature maps.
Var crkd_loss(const Var& teacher_features, const Var& adapted_student_features);

// Mean-row KL between the two models' masked cosine-similarity softmax
// distributions over the B*V projected views.
Var sskd_loss(const SelfSupervisionBatch& teacher_ss, const SelfSupervisionBatch& student_ss);

// Everything a composite objective may need for one batch. Self-supervision
// members are optional; composite losses that need them throw when absent.
struct DistillBatchInputs {
  Var teacher_logits;
  Var student_logits;
  std::vector<int> labels;
  ClassWeights class_weights;

  Var teacher_embeddings;
  Var student_embeddings;

  Var teacher_features;
  Var adapted_student_features;

  bool has_self_supervision = false;
  SelfSupervisionBatch teacher_ss;
  SelfSupervisionBatch student_ss;
};

// lambda_blkd * BLKD + lambda_drkd * DRKD + lambda_crkd * CRKD.
Var dkd_loss(const DistillBatchInputs& in, const LossWeights& lw);

// dkd_loss + lambda_sskd * SSKD.
Var ssdkd_loss(const DistillBatchInputs& in, const LossWeights& lw);

}  // namespace kd
