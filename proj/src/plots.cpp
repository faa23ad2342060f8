#include "kd/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <opencv2/imgproc.hpp>

#include "kd/errors.hpp"

namespace kd {
namespace {

// Fixed geometry so figure dimensions are a pure function of class count.
constexpr int kCell = 72;          // confusion-matrix cell edge
constexpr int kTopMargin = 48;     // title strip
constexpr int kLeftMargin = 110;   // true-class labels
constexpr int kBottomMargin = 70;  // predicted-class labels
constexpr int kRightMargin = 24;
constexpr int kRocPlot = 480;      // ROC plot-area edge
constexpr int kRocLeft = 70;
constexpr int kRocBottom = 56;

const cv::Scalar kWhite(255, 255, 255);
const cv::Scalar kBlack(30, 30, 30);
const cv::Scalar kGrid(205, 205, 205);

// Distinct curve colors (BGR), cycled when classes outnumber them.
const std::vector<cv::Scalar>& palette() {
  static const std::vector<cv::Scalar> colors = {
      {180, 119, 31},  {14, 127, 255},  {44, 160, 44},  {40, 39, 214},
      {189, 103, 148}, {75, 86, 140},   {194, 119, 227}, {127, 127, 127},
      {34, 189, 188},  {207, 190, 23},
  };
  return colors;
}

void put_label(cv::Mat& canvas, const std::string& text, cv::Point anchor, double scale,
               const cv::Scalar& color, bool centered) {
  int baseline = 0;
  cv::Size box = cv::getTextSize(text, cv::FONT_HERSHEY_SIMPLEX, scale, 1, &baseline);
  cv::Point origin = centered ? cv::Point(anchor.x - box.width / 2, anchor.y + box.height / 2)
                              : anchor;
  cv::putText(canvas, text, origin, cv::FONT_HERSHEY_SIMPLEX, scale, color, 1, cv::LINE_8);
}

std::vector<std::string> resolve_names(std::int64_t classes,
                                       const std::vector<std::string>& class_names,
                                       const char* what) {
  if (class_names.empty()) {
    std::vector<std::string> names;
    for (std::int64_t c = 0; c < classes; ++c) names.push_back("class " + std::to_string(c));
    return names;
  }
  if (static_cast<std::int64_t>(class_names.size()) != classes)
    throw InvalidArgument(std::string(what) + ": got " + std::to_string(class_names.size()) +
                          " class names for " + std::to_string(classes) + " classes");
  return class_names;
}

Tensor to_rgb_tensor(const cv::Mat& bgr) {
  std::int64_t h = bgr.rows, w = bgr.cols;
  Tensor out({3, h, w});
  for (std::int64_t y = 0; y < h; ++y) {
    const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(static_cast<int>(y));
    for (std::int64_t x = 0; x < w; ++x) {
      out[(0 * h + y) * w + x] = row[x][2] / 255.0;
      out[(1 * h + y) * w + x] = row[x][1] / 255.0;
      out[(2 * h + y) * w + x] = row[x][0] / 255.0;
    }
  }
  return out;
}

}  // namespace

Tensor render_confusion_matrix(const ConfusionMatrix& confusion,
                               const std::vector<std::string>& class_names,
                               const std::string& title) {
  std::int64_t classes = confusion.classes;
  if (classes < 1) throw InvalidArgument("confusion matrix is empty; nothing to render");
  std::vector<std::string> names = resolve_names(classes, class_names, "confusion matrix");

  int grid = static_cast<int>(classes) * kCell;
  cv::Mat canvas(kTopMargin + grid + kBottomMargin, kLeftMargin + grid + kRightMargin, CV_8UC3,
                 kWhite);
  if (!title.empty())
    put_label(canvas, title, {kLeftMargin + grid / 2, kTopMargin / 2}, 0.6, kBlack, true);

  // Shade runs white -> dark blue with the row-normalized rate.
  const cv::Vec3d deep(107, 48, 8);
  for (std::int64_t t = 0; t < classes; ++t) {
    std::int64_t row_total = confusion.row_sum(t);
    for (std::int64_t p = 0; p < classes; ++p) {
      double rate = row_total > 0 ? static_cast<double>(confusion.at(t, p)) / row_total : 0.0;
      cv::Scalar fill(255 + rate * (deep[0] - 255), 255 + rate * (deep[1] - 255),
                      255 + rate * (deep[2] - 255));
      cv::Rect cell(kLeftMargin + static_cast<int>(p) * kCell,
                    kTopMargin + static_cast<int>(t) * kCell, kCell, kCell);
      cv::rectangle(canvas, cell, fill, cv::FILLED);
      cv::rectangle(canvas, cell, kGrid, 1);
      put_label(canvas, std::to_string(confusion.at(t, p)),
                {cell.x + kCell / 2, cell.y + kCell / 2}, 0.45,
                rate > 0.5 ? kWhite : kBlack, true);
    }
  }

  for (std::int64_t c = 0; c < classes; ++c) {
    int center = kTopMargin + static_cast<int>(c) * kCell + kCell / 2;
    put_label(canvas, names[static_cast<std::size_t>(c)], {6, center}, 0.4, kBlack, false);
    put_label(canvas, names[static_cast<std::size_t>(c)],
              {kLeftMargin + static_cast<int>(c) * kCell + kCell / 2, kTopMargin + grid + 18},
              0.4, kBlack, true);
  }
  put_label(canvas, "predicted", {kLeftMargin + grid / 2, kTopMargin + grid + 48}, 0.5, kBlack,
            true);
  put_label(canvas, "true", {6, kTopMargin - 10}, 0.5, kBlack, false);

  return to_rgb_tensor(canvas);
}

Tensor render_roc_curves(const std::vector<std::vector<RocPoint>>& curves,
                         const std::vector<double>& per_class_auc,
                         const std::vector<std::string>& class_names,
                         const std::string& title) {
  std::int64_t classes = static_cast<std::int64_t>(curves.size());
  if (classes < 1) throw InvalidArgument("no ROC curves to render");
  if (static_cast<std::int64_t>(per_class_auc.size()) != classes)
    throw InvalidArgument("ROC curves: got " + std::to_string(per_class_auc.size()) +
                          " AUC values for " + std::to_string(classes) + " curves");
  std::vector<std::string> names = resolve_names(classes, class_names, "ROC curves");
  if (std::all_of(curves.begin(), curves.end(),
                  [](const std::vector<RocPoint>& c) { return c.empty(); }))
    throw InvalidArgument("every ROC curve is empty; nothing to render");

  cv::Mat canvas(kTopMargin + kRocPlot + kRocBottom, kRocLeft + kRocPlot + kRightMargin, CV_8UC3,
                 kWhite);
  if (!title.empty())
    put_label(canvas, title, {kRocLeft + kRocPlot / 2, kTopMargin / 2}, 0.6, kBlack, true);

  auto px = [&](double fpr) { return kRocLeft + static_cast<int>(std::lround(fpr * (kRocPlot - 1))); };
  auto py = [&](double tpr) {
    return kTopMargin + static_cast<int>(std::lround((1.0 - tpr) * (kRocPlot - 1)));
  };

  for (int tick = 0; tick <= 4; ++tick) {
    double v = tick / 4.0;
    char text[8];
    std::snprintf(text, sizeof text, "%.2f", v);
    cv::line(canvas, {px(v), py(0)}, {px(v), py(1)}, kGrid, 1, cv::LINE_8);
    cv::line(canvas, {px(0), py(v)}, {px(1), py(v)}, kGrid, 1, cv::LINE_8);
    put_label(canvas, text, {px(v), kTopMargin + kRocPlot + 16}, 0.4, kBlack, true);
    put_label(canvas, text, {8, py(v)}, 0.4, kBlack, false);
  }
  put_label(canvas, "false positive rate", {kRocLeft + kRocPlot / 2, kTopMargin + kRocPlot + 40},
            0.5, kBlack, true);
  cv::line(canvas, {px(0), py(0)}, {px(1), py(1)}, cv::Scalar(150, 150, 150), 1, cv::LINE_8);
  cv::rectangle(canvas, {px(0), py(1)}, {px(1), py(0)}, kBlack, 1);

  int legend_row = 0;
  for (std::int64_t c = 0; c < classes; ++c) {
    const std::vector<RocPoint>& curve = curves[static_cast<std::size_t>(c)];
    if (curve.empty()) continue;
    const cv::Scalar& color = palette()[static_cast<std::size_t>(c) % palette().size()];
    for (std::size_t i = 1; i < curve.size(); ++i)
      cv::line(canvas, {px(curve[i - 1].fpr), py(curve[i - 1].tpr)},
               {px(curve[i].fpr), py(curve[i].tpr)}, color, 2, cv::LINE_8);

    // Legend grows upward from the bottom-right corner, one row per curve.
    double auc = per_class_auc[static_cast<std::size_t>(c)];
    char entry[96];
    if (std::isnan(auc))
      std::snprintf(entry, sizeof entry, "%s", names[static_cast<std::size_t>(c)].c_str());
    else
      std::snprintf(entry, sizeof entry, "%s (AUC %.3f)",
                    names[static_cast<std::size_t>(c)].c_str(), auc);
    int y = kTopMargin + kRocPlot - 16 - 20 * legend_row++;
    cv::line(canvas, {kRocLeft + kRocPlot - 196, y - 4}, {kRocLeft + kRocPlot - 172, y - 4},
             color, 2, cv::LINE_8);
    put_label(canvas, entry, {kRocLeft + kRocPlot - 164, y}, 0.4, kBlack, false);
  }

  return to_rgb_tensor(canvas);
}

}  // namespace kd
