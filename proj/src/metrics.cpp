#include "kd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "kd/errors.hpp"
#include "kd/ops.hpp"

namespace kd {

namespace {

using nlohmann::json;

json number_or_null(double v) {
  if (std::isnan(v)) return nullptr;
  return v;
}

// Indices of the score column sorted descending; ties keep ascending
// original order (stable ranking contract).
std::vector<std::int64_t> ranked_indices(const Tensor& scores, std::int64_t cls) {
  std::int64_t n = scores.dim(0), c = scores.dim(1);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    return scores[a * c + cls] > scores[b * c + cls];
  });
  return order;
}

}  // namespace

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (auto v : counts) t += v;
  return t;
}

std::int64_t ConfusionMatrix::row_sum(std::int64_t truth) const {
  std::int64_t t = 0;
  for (std::int64_t p = 0; p < classes; ++p) t += at(truth, p);
  return t;
}

std::int64_t argmax_row(const Tensor& scores, std::int64_t row) {
  std::int64_t c = scores.dim(1);
  std::int64_t best = 0;
  for (std::int64_t j = 1; j < c; ++j)
    if (scores[row * c + j] > scores[row * c + best]) best = j;
  return best;
}

double balanced_accuracy(const ConfusionMatrix& confusion) {
  if (confusion.total() == 0)
    throw InvalidArgument("balanced accuracy of an empty confusion matrix");
  double sum = 0.0;
  std::int64_t present = 0;
  for (std::int64_t t = 0; t < confusion.classes; ++t) {
    std::int64_t row = confusion.row_sum(t);
    if (row == 0) continue;
    sum += static_cast<double>(confusion.at(t, t)) / static_cast<double>(row);
    ++present;
  }
  return sum / static_cast<double>(present);
}

RocResult roc_auc_macro(const Tensor& scores, const std::vector<std::int64_t>& labels) {
  std::int64_t n = scores.dim(0), classes = scores.dim(1);
  RocResult out;
  out.per_class_auc.assign(static_cast<std::size_t>(classes),
                           std::numeric_limits<double>::quiet_NaN());
  out.roc_points.resize(static_cast<std::size_t>(classes));

  double auc_sum = 0.0;
  std::int64_t included = 0;
  for (std::int64_t cls = 0; cls < classes; ++cls) {
    std::int64_t pos = 0;
    for (auto y : labels) pos += (y == cls);
    std::int64_t neg = n - pos;
    if (pos == 0 || neg == 0) {
      out.excluded_classes.push_back(cls);
      std::cerr << "warning: class " << cls << " has no "
                << (pos == 0 ? "positives" : "negatives") << "; excluded from AUC\n";
      continue;
    }

    auto order = ranked_indices(scores, cls);
    auto& points = out.roc_points[static_cast<std::size_t>(cls)];
    points.push_back({0.0, 0.0});
    double auc = 0.0;
    std::int64_t tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < order.size()) {
      // consume a whole tie group before emitting a point
      double threshold = scores[order[i] * classes + cls];
      while (i < order.size() && scores[order[i] * classes + cls] == threshold) {
        (labels[static_cast<std::size_t>(order[i])] == cls) ? ++tp : ++fp;
        ++i;
      }
      RocPoint next{static_cast<double>(fp) / static_cast<double>(neg),
                    static_cast<double>(tp) / static_cast<double>(pos)};
      const RocPoint& prev = points.back();
      auc += (next.fpr - prev.fpr) * (next.tpr + prev.tpr) / 2.0;
      points.push_back(next);
    }
    out.per_class_auc[static_cast<std::size_t>(cls)] = auc;
    auc_sum += auc;
    ++included;
  }
  if (included == 0) throw InvalidArgument("no class has both positives and negatives");
  out.auc_macro = auc_sum / static_cast<double>(included);
  return out;
}

ApResult mean_average_precision(const Tensor& scores, const std::vector<std::int64_t>& labels) {
  std::int64_t n = scores.dim(0), classes = scores.dim(1);
  ApResult out;
  out.per_class_ap.assign(static_cast<std::size_t>(classes),
                          std::numeric_limits<double>::quiet_NaN());

  double ap_sum = 0.0;
  std::int64_t included = 0;
  for (std::int64_t cls = 0; cls < classes; ++cls) {
    std::int64_t pos = 0;
    for (auto y : labels) pos += (y == cls);
    if (pos == 0) {
      out.excluded_classes.push_back(cls);
      std::cerr << "warning: class " << cls << " has no positives; excluded from mAP\n";
      continue;
    }
    auto order = ranked_indices(scores, cls);
    double precisions = 0.0;
    std::int64_t tp = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (labels[static_cast<std::size_t>(order[r])] == cls) {
        ++tp;
        precisions += static_cast<double>(tp) / static_cast<double>(r + 1);
      }
    }
    double ap = precisions / static_cast<double>(pos);
    out.per_class_ap[static_cast<std::size_t>(cls)] = ap;
    ap_sum += ap;
    ++included;
  }
  if (included == 0) throw InvalidArgument("no class has positives");
  out.map_macro = ap_sum / static_cast<double>(included);
  (void)n;
  return out;
}

MetricsReport evaluate_scores(const Tensor& scores, const std::vector<std::int64_t>& labels) {
  if (scores.ndim() != 2) throw InvalidArgument("scores must be (N, C)");
  std::int64_t n = scores.dim(0), classes = scores.dim(1);
  if (n == 0) throw InvalidArgument("cannot evaluate an empty split");
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw InvalidArgument("labels length does not match score rows");
  for (auto y : labels)
    if (y < 0 || y >= classes) throw InvalidArgument("label out of range");
  // Non-finite scores would poison the ranking comparators below.
  for (std::int64_t i = 0; i < scores.numel(); ++i)
    if (!std::isfinite(scores[i]))
      throw InvalidArgument("scores contain non-finite values; cannot rank them");

  MetricsReport report;
  report.confusion = ConfusionMatrix(classes);
  for (std::int64_t i = 0; i < n; ++i)
    report.confusion.at(labels[static_cast<std::size_t>(i)], argmax_row(scores, i)) += 1;

  std::int64_t correct = 0;
  for (std::int64_t c = 0; c < classes; ++c) correct += report.confusion.at(c, c);
  report.acc = static_cast<double>(correct) / static_cast<double>(n);
  report.bacc = balanced_accuracy(report.confusion);

  report.per_class_recall.assign(static_cast<std::size_t>(classes),
                                 std::numeric_limits<double>::quiet_NaN());
  for (std::int64_t c = 0; c < classes; ++c) {
    std::int64_t row = report.confusion.row_sum(c);
    if (row > 0)
      report.per_class_recall[static_cast<std::size_t>(c)] =
          static_cast<double>(report.confusion.at(c, c)) / static_cast<double>(row);
  }

  RocResult roc = roc_auc_macro(scores, labels);
  report.auc_macro = roc.auc_macro;
  report.per_class_auc = std::move(roc.per_class_auc);
  report.roc_points = std::move(roc.roc_points);
  report.excluded_classes = roc.excluded_classes;

  ApResult ap = mean_average_precision(scores, labels);
  report.map_macro = ap.map_macro;
  report.per_class_ap = std::move(ap.per_class_ap);
  return report;
}

MetricsReport evaluate_model(Model& model, const std::vector<Tensor>& images,
                             const std::vector<std::int64_t>& labels,
                             std::int64_t batch_size) {
  if (images.empty()) throw InvalidArgument("cannot evaluate an empty split");
  if (images.size() != labels.size())
    throw InvalidArgument("images and labels differ in length");
  std::int64_t n = static_cast<std::int64_t>(images.size());
  std::int64_t classes = model.spec().class_count;

  bool was_trainable = model.trainable();
  model.set_trainable(false);  // evaluation builds no tape
  Tensor scores({n, classes});
  for (std::int64_t start = 0; start < n; start += batch_size) {
    std::int64_t end = std::min(start + batch_size, n);
    std::int64_t b = end - start;
    const auto& shape0 = images[static_cast<std::size_t>(start)].shape();
    Tensor batch({b, shape0[0], shape0[1], shape0[2]});
    std::int64_t stride = shape0[0] * shape0[1] * shape0[2];
    for (std::int64_t i = 0; i < b; ++i) {
      const Tensor& img = images[static_cast<std::size_t>(start + i)];
      for (std::int64_t j = 0; j < stride; ++j) batch[i * stride + j] = img[j];
    }
    ModelTaps taps = model.forward_with_taps(Var::leaf(batch, false));
    for (std::int64_t i = 0; i < b; ++i) {
      // softmax at T=1, stabilized by the row max
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t c = 0; c < classes; ++c)
        mx = std::max(mx, taps.logits.value()[i * classes + c]);
      double z = 0.0;
      for (std::int64_t c = 0; c < classes; ++c)
        z += std::exp(taps.logits.value()[i * classes + c] - mx);
      for (std::int64_t c = 0; c < classes; ++c)
        scores[(start + i) * classes + c] =
            std::exp(taps.logits.value()[i * classes + c] - mx) / z;
    }
  }
  model.set_trainable(was_trainable);
  return evaluate_scores(scores, labels);
}

std::string MetricsReport::to_json() const {
  json j;
  j["schema_version"] = kMetricsSchemaVersion;
  j["acc"] = acc;
  j["bacc"] = bacc;
  j["auc_macro"] = auc_macro;
  j["map_macro"] = map_macro;

  auto vec = [](const std::vector<double>& v) {
    json arr = json::array();
    for (double x : v) arr.push_back(number_or_null(x));
    return arr;
  };
  j["per_class_recall"] = vec(per_class_recall);
  j["per_class_ap"] = vec(per_class_ap);
  j["per_class_auc"] = vec(per_class_auc);

  json conf = json::array();
  for (std::int64_t t = 0; t < confusion.classes; ++t) {
    json row = json::array();
    for (std::int64_t p = 0; p < confusion.classes; ++p) row.push_back(confusion.at(t, p));
    conf.push_back(row);
  }
  j["confusion"] = conf;

  json roc = json::array();
  for (const auto& pts : roc_points) {
    json curve = json::array();
    for (const auto& pt : pts) curve.push_back(json::array({pt.fpr, pt.tpr}));
    roc.push_back(curve);
  }
  j["roc_points"] = roc;
  j["excluded_classes"] = excluded_classes;
  return j.dump(2);
}

MetricsReport report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InvalidArgument(std::string("report is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw InvalidArgument("report must be a JSON object");

  auto require = [&](const char* key) -> const json& {
    if (!j.contains(key)) throw InvalidArgument(std::string("report lacks field '") + key + "'");
    return j.at(key);
  };
  const json& version = require("schema_version");
  if (!version.is_number_integer() || version.get<int>() != kMetricsSchemaVersion)
    throw InvalidArgument("unsupported report schema_version " + version.dump() +
                          " (expected " + std::to_string(kMetricsSchemaVersion) + ")");

  auto scalar = [&](const char* key) {
    const json& v = require(key);
    if (!v.is_number()) throw InvalidArgument(std::string("report field '") + key + "' must be a number");
    return v.get<double>();
  };
  auto nullable_vector = [&](const char* key) {
    const json& v = require(key);
    if (!v.is_array()) throw InvalidArgument(std::string("report field '") + key + "' must be an array");
    std::vector<double> out;
    for (const auto& item : v) {
      if (item.is_null()) out.push_back(std::numeric_limits<double>::quiet_NaN());
      else if (item.is_number()) out.push_back(item.get<double>());
      else throw InvalidArgument(std::string("report field '") + key + "' holds a non-number");
    }
    return out;
  };

  MetricsReport report;
  report.acc = scalar("acc");
  report.bacc = scalar("bacc");
  report.auc_macro = scalar("auc_macro");
  report.map_macro = scalar("map_macro");
  report.per_class_recall = nullable_vector("per_class_recall");
  report.per_class_ap = nullable_vector("per_class_ap");
  report.per_class_auc = nullable_vector("per_class_auc");

  const json& conf = require("confusion");
  if (!conf.is_array()) throw InvalidArgument("report field 'confusion' must be an array");
  std::int64_t classes = static_cast<std::int64_t>(conf.size());
  report.confusion = ConfusionMatrix(classes);
  for (std::int64_t t = 0; t < classes; ++t) {
    const json& row = conf.at(static_cast<std::size_t>(t));
    if (!row.is_array() || static_cast<std::int64_t>(row.size()) != classes)
      throw InvalidArgument("report field 'confusion' must be a square integer matrix");
    for (std::int64_t p = 0; p < classes; ++p) {
      const json& cell = row.at(static_cast<std::size_t>(p));
      if (!cell.is_number_integer() || cell.get<std::int64_t>() < 0)
        throw InvalidArgument("report field 'confusion' must hold non-negative integers");
      report.confusion.at(t, p) = cell.get<std::int64_t>();
    }
  }

  const json& roc = require("roc_points");
  if (!roc.is_array()) throw InvalidArgument("report field 'roc_points' must be an array");
  for (const auto& curve : roc) {
    if (!curve.is_array()) throw InvalidArgument("report field 'roc_points' must hold point lists");
    std::vector<RocPoint> pts;
    for (const auto& pt : curve) {
      if (!pt.is_array() || pt.size() != 2 || !pt.at(0).is_number() || !pt.at(1).is_number())
        throw InvalidArgument("report field 'roc_points' must hold [fpr, tpr] pairs");
      pts.push_back({pt.at(0).get<double>(), pt.at(1).get<double>()});
    }
    report.roc_points.push_back(std::move(pts));
  }

  const json& excluded = require("excluded_classes");
  if (!excluded.is_array()) throw InvalidArgument("report field 'excluded_classes' must be an array");
  for (const auto& item : excluded) {
    if (!item.is_number_integer())
      throw InvalidArgument("report field 'excluded_classes' must hold integers");
    report.excluded_classes.push_back(item.get<std::int64_t>());
  }
  return report;
}

}  // namespace kd
