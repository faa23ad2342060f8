#include "kd/relations.hpp"

#include <cmath>

namespace kd {

Var softened_probabilities(const Var& logits, double temperature) {
  if (temperature <= 0.0)
    throw InvalidArgument("temperature must be positive");
  if (logits.value().ndim() != 2)
    throw InvalidArgument("logits must be (B,C)");
  if (logits.value().dim(0) < 1 || logits.value().dim(1) < 2)
    throw InvalidArgument("logits need B >= 1 and C >= 2");
  check_finite(logits.value(), "logits");
  return vexp(log_softmax_rows(mul_scalar(logits, 1.0 / temperature)));
}

DistancePotential distance_potential(const Var& embeddings) {
  if (embeddings.value().ndim() != 2)
    throw InvalidArgument("embeddings must be (B,D)");
  std::int64_t b = embeddings.value().dim(0);
  if (b < 2) throw InvalidArgument("distance potential needs B >= 2");
  check_finite(embeddings.value(), "embeddings");

  Var d = pairwise_distances(embeddings);
  double total = 0.0;
  for (std::int64_t i = 0; i < d.value().numel(); ++i) total += d.value()[i];
  if (total == 0.0) {
    // Every embedding coincides; the normalizer is undefined.
    return {Var::leaf(Tensor::zeros({b, b}), false), true};
  }
  // Mean over the B(B-1) ordered distinct pairs (the diagonal is zero).
  Var mu = mul_scalar(sum(d), 1.0 / static_cast<double>(b * (b - 1)));
  return {scale_by(d, reciprocal(mu)), false};
}

AnglePotential angle_potential(const Var& embeddings) {
  if (embeddings.value().ndim() != 2)
    throw InvalidArgument("embeddings must be (B,D)");
  std::int64_t b = embeddings.value().dim(0);
  if (b < 3) throw InvalidArgument("angle potential needs B >= 3");
  check_finite(embeddings.value(), "embeddings");

  auto ap = angle_potentials_op(embeddings);
  AnglePotential out{ap.values, ap.valid_mask, false};
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < b; ++j)
      for (std::int64_t k = 0; k < b; ++k)
        if (i != j && j != k && i != k && out.valid_mask(i, j, k) == 0.0)
          out.has_degenerate_triples = true;
  return out;
}

Var channel_relation_matrix(const Var& features) {
  if (features.value().ndim() != 4)
    throw InvalidArgument("features must be (B,K,H,W)");
  check_finite(features.value(), "features");
  return gram(features);
}

ChannelAdapter::ChannelAdapter(std::int64_t student_channels,
                               std::int64_t teacher_channels, Rng& rng)
    : in_channels_(student_channels), out_channels_(teacher_channels) {
  if (student_channels < 1 || teacher_channels < 1)
    throw InvalidArgument("adapter channel counts must be positive");
  Tensor w({teacher_channels, student_channels, 1, 1});
  // Variance 1/K_student keeps output magnitude near input magnitude.
  double scale = 1.0 / std::sqrt(static_cast<double>(student_channels));
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal() * scale;
  weight_ = Var::leaf(std::move(w), true);
  bias_ = Var::leaf(Tensor::zeros({teacher_channels}), true);
}

Var adapt_channels(const Var& student_features, const ChannelAdapter& adapter,
                   std::int64_t target_h, std::int64_t target_w) {
  if (student_features.value().ndim() != 4)
    throw InvalidArgument("student features must be (B,K,H,W)");
  if (student_features.value().dim(1) != adapter.in_channels())
    throw InvalidArgument("adapter expects " + std::to_string(adapter.in_channels()) +
                          " channels, got " + std::to_string(student_features.value().dim(1)));
  Var x = student_features;
  if (x.value().dim(2) != target_h || x.value().dim(3) != target_w)
    x = bilinear_resize(x, target_h, target_w);
  return conv2d(x, adapter.weight(), adapter.bias(), {});
}

}  // namespace kd
