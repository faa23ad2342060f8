#pragma once

#include <string>
#include <vector>

#include "kd/metrics.hpp"
#include "kd/tensor.hpp"

namespace kd {

// Figures are rendered as (3, H, W) RGB tensors in [0, 1] — the library's
// in-memory image convention — so callers persist them with save_image.
// Layouts are fixed per figure type; the same input renders identically.

// Square per-class heatmap: rows are true classes, columns predictions,
// cells shaded by the row-normalized rate and annotated with the raw count.
// Class names label both axes; when empty, indices are used. InvalidArgument
// when the matrix is empty or the name count does not match.
Tensor render_confusion_matrix(const ConfusionMatrix& confusion,
                               const std::vector<std::string>& class_names,
                               const std::string& title = "");

// One-vs-rest ROC curves on a shared unit square with the chance diagonal
// and a legend carrying per-class AUC. Classes with empty curves (excluded
// at evaluation time) are skipped. InvalidArgument when no curve is drawable
// or the auc/name counts do not match the curve count.
Tensor render_roc_curves(const std::vector<std::vector<RocPoint>>& curves,
                         const std::vector<double>& per_class_auc,
                         const std::vector<std::string>& class_names,
                         const std::string& title = "");

}  // namespace kd
