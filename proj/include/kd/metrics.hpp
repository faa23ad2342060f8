#pragma once

#include <string>
#include <vector>

#include "kd/models.hpp"
#include "kd/tensor.hpp"

namespace kd {

inline constexpr int kMetricsSchemaVersion = 1;

// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  std::int64_t classes = 0;
  std::vector<std::int64_t> counts;  // row-major classes x classes

  explicit ConfusionMatrix(std::int64_t c = 0)
      : classes(c), counts(static_cast<std::size_t>(c * c), 0) {}
  std::int64_t& at(std::int64_t truth, std::int64_t pred) {
    return counts[static_cast<std::size_t>(truth * classes + pred)];
  }
  std::int64_t at(std::int64_t truth, std::int64_t pred) const {
    return counts[static_cast<std::size_t>(truth * classes + pred)];
  }
  std::int64_t total() const;
  std::int64_t row_sum(std::int64_t truth) const;
};

struct RocPoint {
  double fpr = 0.0, tpr = 0.0;
};

struct MetricsReport {
  double acc = 0.0;
  double bacc = 0.0;
  double auc_macro = 0.0;
  double map_macro = 0.0;
  std::vector<double> per_class_recall;
  std::vector<double> per_class_ap;
  std::vector<double> per_class_auc;
  ConfusionMatrix confusion;
  std::vector<std::vector<RocPoint>> roc_points;   // per class
  std::vector<std::int64_t> excluded_classes;      // absent from the labels

  // Versioned JSON document with every field above.
  std::string to_json() const;
};

// Inverse of MetricsReport::to_json; InvalidArgument on malformed documents
// or an unsupported schema_version.
MetricsReport report_from_json(const std::string& text);

// Lowest index wins ties (deterministic argmax).
std::int64_t argmax_row(const Tensor& scores, std::int64_t row);

// Mean per-class recall; classes with zero row sum are excluded.
// InvalidArgument on an all-zero matrix.
double balanced_accuracy(const ConfusionMatrix& confusion);

struct RocResult {
  double auc_macro = 0.0;
  std::vector<double> per_class_auc;               // NaN for excluded classes
  std::vector<std::vector<RocPoint>> roc_points;
  std::vector<std::int64_t> excluded_classes;
};

// One-vs-rest ROC per class by descending threshold sweep over the score
// column; trapezoidal AUC; macro average over classes with both positives
// and negatives present.
RocResult roc_auc_macro(const Tensor& scores, const std::vector<std::int64_t>& labels);

struct ApResult {
  double map_macro = 0.0;
  std::vector<double> per_class_ap;                // NaN for excluded classes
  std::vector<std::int64_t> excluded_classes;
};

// One-vs-rest average precision: precision at each positive hit of the
// score-sorted list (descending, ties kept in original order), averaged.
ApResult mean_average_precision(const Tensor& scores, const std::vector<std::int64_t>& labels);

// Full report from an (N, C) score matrix; predictions by argmax.
MetricsReport evaluate_scores(const Tensor& scores, const std::vector<std::int64_t>& labels);

// Runs the model over the images (no tape), converts logits to softmax
// scores at T=1, and reports. InvalidArgument on an empty set.
MetricsReport evaluate_model(Model& model, const std::vector<Tensor>& images,
                             const std::vector<std::int64_t>& labels,
                             std::int64_t batch_size = 64);

}  // namespace kd
