#include "kd/losses.hpp"

#include <cmath>
#include <iostream>

namespace kd {

void ClassWeights::validate() const {
  if (weights.empty()) throw InvalidArgument("class weights are empty");
  double inv_sum = 0.0;
  for (double w : weights) {
    if (!std::isfinite(w) || w <= 0.0)
      throw InvalidArgument("class weights must be positive and finite");
    inv_sum += 1.0 / w;
  }
  // w_c = N/(C*n_c) makes the dataset-average applied weight exactly 1,
  // i.e. the harmonic mean of the weight vector is 1.
  double harmonic_mean = static_cast<double>(weights.size()) / inv_sum;
  if (std::abs(harmonic_mean - 1.0) > 1e-6)
    throw InvalidArgument("class weights must be inverse-frequency normalized "
                          "(harmonic mean 1), got " + std::to_string(harmonic_mean));
}

ClassWeights ClassWeights::uniform(std::int64_t class_count) {
  if (class_count < 1) throw InvalidArgument("class count must be positive");
  return {std::vector<double>(static_cast<std::size_t>(class_count), 1.0)};
}

void LossWeights::validate() const {
  auto finite_nonneg = [](double v, const char* name) {
    if (!std::isfinite(v) || v < 0.0)
      throw InvalidArgument(std::string(name) + " must be finite and nonnegative");
  };
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be positive");
  if (!(ss_temperature > 0.0)) throw InvalidArgument("ss_temperature must be positive");
  if (!(huber_delta > 0.0)) throw InvalidArgument("huber_delta must be positive");
  if (!std::isfinite(lambda_kd) || lambda_kd < 0.0 || lambda_kd > 1.0)
    throw InvalidArgument("lambda_kd must be in [0,1]");
  finite_nonneg(lambda_d, "lambda_d");
  finite_nonneg(lambda_a, "lambda_a");
  finite_nonneg(lambda_blkd, "lambda_blkd");
  finite_nonneg(lambda_drkd, "lambda_drkd");
  finite_nonneg(lambda_crkd, "lambda_crkd");
  finite_nonneg(lambda_sskd, "lambda_sskd");
}

namespace {

void require_matching_logits(const Var& t, const Var& s) {
  if (t.value().ndim() != 2 || s.value().ndim() != 2 || t.shape() != s.shape())
    throw InvalidArgument("teacher and student logits must share shape (B,C), got " +
                          shape_str(t.shape()) + " vs " + shape_str(s.shape()));
}

// Mean over rows of KL(p || q) given both log-distributions, p constant.
Var mean_row_kl(const Var& log_p_const, const Var& log_q) {
  Var p = vexp(log_p_const);
  Var per_element = mul(p, sub(log_p_const, log_q));
  std::int64_t rows = log_q.value().dim(0);
  return mul_scalar(sum(per_element), 1.0 / static_cast<double>(rows));
}

}  // namespace

Var kd_loss(const Var& teacher_logits, const Var& student_logits, double temperature) {
  require_matching_logits(teacher_logits, student_logits);
  if (temperature <= 0.0) throw InvalidArgument("temperature must be positive");
  Var log_pt = log_softmax_rows(mul_scalar(teacher_logits.detach(), 1.0 / temperature));
  Var log_ps = log_softmax_rows(mul_scalar(student_logits, 1.0 / temperature));
  return mul_scalar(mean_row_kl(log_pt, log_ps), temperature * temperature);
}

Var weighted_cross_entropy(const Var& student_logits, const std::vector<int>& labels,
                           const ClassWeights& weights) {
  if (student_logits.value().ndim() != 2)
    throw InvalidArgument("student logits must be (B,C)");
  std::int64_t b = student_logits.value().dim(0);
  std::int64_t c = student_logits.value().dim(1);
  if (static_cast<std::int64_t>(labels.size()) != b)
    throw InvalidArgument("label count does not match batch size");
  weights.validate();
  if (weights.class_count() != c)
    throw InvalidArgument("class weight count does not match logit width");
  Tensor w({b});
  for (std::int64_t i = 0; i < b; ++i) {
    int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw InvalidArgument("label out of range: " + std::to_string(y));
    w[i] = weights.weights[static_cast<std::size_t>(y)];
  }
  Var log_ps = log_softmax_rows(student_logits);
  Var picked = pick_rows(log_ps, labels);
  Var weighted = mul(picked, Var::leaf(std::move(w), false));
  return mul_scalar(sum(weighted), -1.0 / static_cast<double>(b));
}

Var blkd_loss(const Var& teacher_logits, const Var& student_logits,
              const std::vector<int>& labels, const ClassWeights& weights,
              const LossWeights& lw) {
  lw.validate();
  Var wce = weighted_cross_entropy(student_logits, labels, weights);
  if (lw.lambda_kd == 0.0) return wce;
  Var kd = kd_loss(teacher_logits, student_logits, lw.temperature);
  return add(mul_scalar(wce, 1.0 - lw.lambda_kd), mul_scalar(kd, lw.lambda_kd));
}

Var drkd_loss(const Var& teacher_embeddings, const Var& student_embeddings,
              const LossWeights& lw) {
  lw.validate();
  if (teacher_embeddings.value().ndim() != 2 || student_embeddings.value().ndim() != 2)
    throw InvalidArgument("embeddings must be (B,D)");
  std::int64_t b = teacher_embeddings.value().dim(0);
  if (student_embeddings.value().dim(0) != b)
    throw InvalidArgument("teacher and student batch sizes differ");
  if (b < 2) throw InvalidArgument("relational loss needs B >= 2");

  Var teacher_const = teacher_embeddings.detach();

  DistancePotential dt = distance_potential(teacher_const);
  DistancePotential ds = distance_potential(student_embeddings);
  Var hd = huber(ds.values, dt.values, lw.huber_delta);
  // Diagonal terms are Huber(0,0) = 0; the mean runs over ordered distinct pairs.
  Var dist_term = mul_scalar(sum(hd), 1.0 / static_cast<double>(b * (b - 1)));
  Var total = mul_scalar(dist_term, lw.lambda_d);

  if (b < 3) {
    std::cerr << "drkd_loss: batch of 2 has no triples; angle term skipped\n";
    return total;
  }

  AnglePotential at = angle_potential(teacher_const);
  AnglePotential as = angle_potential(student_embeddings);
  Tensor joint_mask = at.valid_mask;
  for (std::int64_t i = 0; i < joint_mask.numel(); ++i) joint_mask[i] *= as.valid_mask[i];
  Var ha = huber(as.values, at.values, lw.huber_delta);
  Var masked = mul(ha, Var::leaf(std::move(joint_mask), false));
  double triples = static_cast<double>(b * (b - 1) * (b - 2));
  Var angle_term = mul_scalar(sum(masked), 1.0 / triples);
  return add(total, mul_scalar(angle_term, lw.lambda_a));
}

Var crkd_loss(const Var& teacher_features, const Var& adapted_student_features) {
  if (teacher_features.value().ndim() != 4 || adapted_student_features.value().ndim() != 4)
    throw InvalidArgument("features must be (B,K,H,W)");
  if (teacher_features.shape() != adapted_student_features.shape())
    throw InvalidArgument("teacher and adapted student features must share shape, got " +
                          shape_str(teacher_features.shape()) + " vs " +
                          shape_str(adapted_student_features.shape()));
  std::int64_t b = teacher_features.value().dim(0);
  std::int64_t k = teacher_features.value().dim(1);
  std::int64_t h = teacher_features.value().dim(2);
  std::int64_t w = teacher_features.value().dim(3);

  Var rt = channel_relation_matrix(teacher_features.detach());
  Var rs = channel_relation_matrix(adapted_student_features);
  Var diff = reshape(sub(rt, rs), {b, k * k});
  Var fro = row_norms(diff);  // per-instance Frobenius norm
  double denom = static_cast<double>(k * h * w) * static_cast<double>(b);
  return mul_scalar(sum(fro), 1.0 / denom);
}

Var sskd_loss(const SelfSupervisionBatch& teacher_ss, const SelfSupervisionBatch& student_ss) {
  if (teacher_ss.views < 2 || student_ss.views < 2)
    throw InvalidArgument("self-supervision needs at least 2 views");
  if (teacher_ss.views != student_ss.views)
    throw InvalidArgument("teacher and student view counts differ");
  if (!(teacher_ss.temperature > 0.0) || teacher_ss.temperature != student_ss.temperature)
    throw InvalidArgument("similarity temperatures must be positive and equal");
  if (teacher_ss.projections.value().ndim() != 2 || student_ss.projections.value().ndim() != 2)
    throw InvalidArgument("projections must be (B*V, P)");
  std::int64_t n = teacher_ss.projections.value().dim(0);
  if (student_ss.projections.value().dim(0) != n)
    throw InvalidArgument("teacher and student projection row counts differ");
  if (n % teacher_ss.views != 0)
    throw InvalidArgument("projection rows are not a multiple of the view count");

  double tau = teacher_ss.temperature;
  auto soft_rows = [tau](const Var& projections) {
    Var z = rows_l2_normalize(projections);
    Var sim = matmul(z, transpose(z));
    // A view is never its own positive: remove the diagonal before softmax.
    Var masked = fill_diagonal(sim, -1e30);
    return log_softmax_rows(mul_scalar(masked, 1.0 / tau));
  };

  Var log_pt = soft_rows(teacher_ss.projections.detach());
  Var log_ps = soft_rows(student_ss.projections);
  Var p = vexp(log_pt);
  Var per_element = mul(p, sub(log_pt, log_ps));
  return mul_scalar(sum(per_element), 1.0 / static_cast<double>(n));
}

Var dkd_loss(const DistillBatchInputs& in, const LossWeights& lw) {
  lw.validate();
  Var total = Var::leaf(Tensor::scalar(0.0), false);
  if (lw.lambda_blkd != 0.0) {
    if (!in.teacher_logits.defined() || !in.student_logits.defined())
      throw InvalidArgument("dkd_loss: lambda_blkd != 0 but logits are missing");
    total = add(total, mul_scalar(blkd_loss(in.teacher_logits, in.student_logits,
                                            in.labels, in.class_weights, lw),
                                  lw.lambda_blkd));
  }
  if (lw.lambda_drkd != 0.0) {
    if (!in.teacher_embeddings.defined() || !in.student_embeddings.defined())
      throw InvalidArgument("dkd_loss: lambda_drkd != 0 but embeddings are missing");
    total = add(total, mul_scalar(drkd_loss(in.teacher_embeddings, in.student_embeddings, lw),
                                  lw.lambda_drkd));
  }
  if (lw.lambda_crkd != 0.0) {
    if (!in.teacher_features.defined() || !in.adapted_student_features.defined())
      throw InvalidArgument("dkd_loss: lambda_crkd != 0 but feature maps are missing");
    total = add(total, mul_scalar(crkd_loss(in.teacher_features, in.adapted_student_features),
                                  lw.lambda_crkd));
  }
  return total;
}

Var ssdkd_loss(const DistillBatchInputs& in, const LossWeights& lw) {
  lw.validate();
  Var total = dkd_loss(in, lw);
  if (lw.lambda_sskd != 0.0) {
    if (!in.has_self_supervision)
      throw InvalidArgument("ssdkd_loss needs self-supervision inputs when lambda_sskd != 0");
    total = add(total, mul_scalar(sskd_loss(in.teacher_ss, in.student_ss), lw.lambda_sskd));
  }
  return total;
}

}  // namespace kd
