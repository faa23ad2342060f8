#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "gradcheck.hpp"
#include "kd/errors.hpp"
#include "kd/metrics.hpp"
#include "testutil.hpp"

using namespace kd;

namespace {

// Reference AUC: exhaustive Mann-Whitney pair count with half credit for
// ties — a rank-free formulation of the same quantity.
double ref_auc_binary(const std::vector<double>& score, const std::vector<int>& positive) {
  double wins = 0.0;
  std::int64_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < score.size(); ++i) {
    if (!positive[i]) continue;
    ++pos;
    for (std::size_t j = 0; j < score.size(); ++j) {
      if (positive[j]) continue;
      if (score[i] > score[j]) wins += 1.0;
      else if (score[i] == score[j]) wins += 0.5;
    }
  }
  for (std::size_t j = 0; j < score.size(); ++j) neg += !positive[j];
  return wins / (static_cast<double>(pos) * static_cast<double>(neg));
}

// Reference AP via the precision-recall staircase: at each positive in the
// stably ranked list, add precision * (recall step 1/P).
double ref_ap_binary(const std::vector<double>& score, const std::vector<int>& positive) {
  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  std::int64_t pos = 0;
  for (int p : positive) pos += p;
  double ap = 0.0;
  std::int64_t tp = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (positive[order[r]]) {
      ++tp;
      double precision = static_cast<double>(tp) / static_cast<double>(r + 1);
      ap += precision * (1.0 / static_cast<double>(pos));
    }
  }
  return ap;
}

struct RefMetrics {
  double acc, bacc, auc, map;
};

RefMetrics reference_all(const Tensor& scores, const std::vector<std::int64_t>& labels) {
  std::int64_t n = scores.dim(0), c = scores.dim(1);
  std::int64_t correct = 0;
  std::vector<std::int64_t> hits(static_cast<std::size_t>(c), 0),
      totals(static_cast<std::size_t>(c), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j)
      if (scores[i * c + j] > scores[i * c + best]) best = j;
    totals[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] += 1;
    if (best == labels[static_cast<std::size_t>(i)]) {
      ++correct;
      hits[static_cast<std::size_t>(best)] += 1;
    }
  }
  RefMetrics out{};
  out.acc = static_cast<double>(correct) / static_cast<double>(n);
  double recall_sum = 0.0;
  std::int64_t present = 0;
  for (std::int64_t k = 0; k < c; ++k)
    if (totals[static_cast<std::size_t>(k)] > 0) {
      recall_sum += static_cast<double>(hits[static_cast<std::size_t>(k)]) /
                    static_cast<double>(totals[static_cast<std::size_t>(k)]);
      ++present;
    }
  out.bacc = recall_sum / static_cast<double>(present);

  double auc_sum = 0.0, ap_sum = 0.0;
  std::int64_t auc_n = 0, ap_n = 0;
  for (std::int64_t k = 0; k < c; ++k) {
    std::vector<double> col(static_cast<std::size_t>(n));
    std::vector<int> positive(static_cast<std::size_t>(n));
    std::int64_t pos = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      col[static_cast<std::size_t>(i)] = scores[i * c + k];
      positive[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(i)] == k;
      pos += positive[static_cast<std::size_t>(i)];
    }
    if (pos > 0 && pos < n) {
      auc_sum += ref_auc_binary(col, positive);
      ++auc_n;
    }
    if (pos > 0) {
      ap_sum += ref_ap_binary(col, positive);
      ++ap_n;
    }
  }
  out.auc = auc_sum / static_cast<double>(auc_n);
  out.map = ap_sum / static_cast<double>(ap_n);
  return out;
}

}  // namespace

TEST_CASE("perfect predictions score 1 on every metric") {
  Tensor scores = Tensor::from({4, 2}, {0.9, 0.1, 0.8, 0.2, 0.1, 0.9, 0.3, 0.7});
  std::vector<std::int64_t> labels{0, 0, 1, 1};
  MetricsReport r = evaluate_scores(scores, labels);
  CHECK(r.acc == 1.0);
  CHECK(r.bacc == 1.0);
  CHECK(r.auc_macro == 1.0);
  CHECK(r.map_macro == 1.0);
  CHECK(r.confusion.at(0, 0) == 2);
  CHECK(r.confusion.at(1, 1) == 2);
  CHECK(r.confusion.at(0, 1) == 0);
  CHECK(r.confusion.at(1, 0) == 0);
  CHECK(r.excluded_classes.empty());
}

TEST_CASE("constant predictor on a 9:1 imbalance: acc 0.9, bacc 0.5") {
  Tensor scores({10, 2});
  for (std::int64_t i = 0; i < 10; ++i) {
    scores[i * 2 + 0] = 0.8;
    scores[i * 2 + 1] = 0.2;
  }
  std::vector<std::int64_t> labels(10, 0);
  labels[9] = 1;
  MetricsReport r = evaluate_scores(scores, labels);
  CHECK(r.acc == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(r.bacc == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r.confusion.at(0, 0) == 9);
  CHECK(r.confusion.at(1, 0) == 1);
}

TEST_CASE("balanced accuracy hand cases") {
  ConfusionMatrix identity(3);
  identity.at(0, 0) = 4;
  identity.at(1, 1) = 7;
  identity.at(2, 2) = 2;
  CHECK(balanced_accuracy(identity) == 1.0);

  ConfusionMatrix chance(2);
  chance.at(0, 0) = 5;
  chance.at(0, 1) = 5;
  chance.at(1, 0) = 5;
  chance.at(1, 1) = 5;
  CHECK(balanced_accuracy(chance) == doctest::Approx(0.5).epsilon(1e-12));

  ConfusionMatrix mixed(2);
  mixed.at(0, 0) = 8;
  mixed.at(0, 1) = 2;
  mixed.at(1, 0) = 1;
  mixed.at(1, 1) = 9;
  CHECK(balanced_accuracy(mixed) == doctest::Approx(0.85).epsilon(1e-12));

  // zero-row classes are skipped, empty matrices refused
  ConfusionMatrix partial(3);
  partial.at(0, 0) = 3;
  partial.at(2, 2) = 3;
  CHECK(balanced_accuracy(partial) == 1.0);
  CHECK_THROWS_AS(balanced_accuracy(ConfusionMatrix(2)), InvalidArgument);
}

TEST_CASE("roc auc: separation, chance, and the rank-statistic oracle") {
  // perfectly separated
  Tensor sep({4, 2});
  std::vector<std::int64_t> labels{1, 1, 0, 0};
  for (std::int64_t i = 0; i < 4; ++i) {
    sep[i * 2 + 1] = i < 2 ? 0.9 : 0.1;
    sep[i * 2 + 0] = 1.0 - sep[i * 2 + 1];
  }
  RocResult r = roc_auc_macro(sep, labels);
  CHECK(r.auc_macro == 1.0);
  CHECK(r.per_class_auc[0] == 1.0);
  CHECK(r.per_class_auc[1] == 1.0);

  // label-independent scores hover near one half
  Rng rng(31);
  std::int64_t n = 2000;
  Tensor rnd({n, 2});
  std::vector<std::int64_t> rnd_labels;
  for (std::int64_t i = 0; i < n; ++i) {
    rnd[i * 2] = rng.uniform();
    rnd[i * 2 + 1] = rng.uniform();
    rnd_labels.push_back(rng.uniform_int(2));
  }
  CHECK(std::abs(roc_auc_macro(rnd, rnd_labels).auc_macro - 0.5) < 0.05);

  // 20-sample random cases equal exhaustive Mann-Whitney counting, with
  // quantized scores to force ties through both paths
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> col(20);
    std::vector<int> positive(20);
    std::vector<std::int64_t> ls(20);
    Tensor scores({20, 2});
    int pos = 0;
    for (int i = 0; i < 20; ++i) {
      col[static_cast<std::size_t>(i)] = rng.uniform_int(8) / 8.0;
      positive[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(2));
      pos += positive[static_cast<std::size_t>(i)];
      ls[static_cast<std::size_t>(i)] = positive[static_cast<std::size_t>(i)];
      scores[i * 2 + 1] = col[static_cast<std::size_t>(i)];
      scores[i * 2 + 0] = -col[static_cast<std::size_t>(i)];
    }
    if (pos == 0 || pos == 20) continue;
    double expect = ref_auc_binary(col, positive);
    RocResult got = roc_auc_macro(scores, ls);
    CHECK(got.per_class_auc[1] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("roc curves run from (0,0) to (1,1)") {
  Rng rng(32);
  Tensor scores = random_tensor(rng, {15, 3}, 0.0, 1.0);
  std::vector<std::int64_t> labels;
  for (int i = 0; i < 15; ++i) labels.push_back(rng.uniform_int(3));
  bool all_present = true;
  for (std::int64_t c = 0; c < 3; ++c)
    all_present &= std::count(labels.begin(), labels.end(), c) > 0;
  if (all_present) {
    RocResult r = roc_auc_macro(scores, labels);
    for (const auto& curve : r.roc_points) {
      REQUIRE(curve.size() >= 2);
      CHECK(curve.front().fpr == 0.0);
      CHECK(curve.front().tpr == 0.0);
      CHECK(curve.back().fpr == 1.0);
      CHECK(curve.back().tpr == 1.0);
      for (std::size_t i = 1; i < curve.size(); ++i) {
        CHECK(curve[i].fpr >= curve[i - 1].fpr);
        CHECK(curve[i].tpr >= curve[i - 1].tpr);
      }
    }
  }
}

TEST_CASE("average precision closed forms and ranked-list oracle") {
  // all positives above all negatives
  Tensor top({5, 2});
  std::vector<std::int64_t> labels{1, 1, 0, 0, 0};
  for (std::int64_t i = 0; i < 5; ++i) {
    top[i * 2 + 1] = 1.0 - 0.1 * static_cast<double>(i);
    top[i * 2 + 0] = 0.0;
  }
  CHECK(mean_average_precision(top, labels).per_class_ap[1] == 1.0);

  // a single positive ranked last among n
  std::int64_t n = 8;
  Tensor last({n, 2});
  std::vector<std::int64_t> ls(static_cast<std::size_t>(n), 0);
  ls.back() = 1;
  for (std::int64_t i = 0; i < n; ++i) {
    last[i * 2 + 1] = 1.0 - 0.1 * static_cast<double>(i);
    last[i * 2 + 0] = 0.5;
  }
  CHECK(mean_average_precision(last, ls).per_class_ap[1] ==
        doctest::Approx(1.0 / static_cast<double>(n)).epsilon(1e-12));

  // random 10-sample lists against the staircase reference
  Rng rng(33);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> col(10);
    std::vector<int> positive(10);
    std::vector<std::int64_t> labs(10);
    Tensor scores({10, 2});
    int pos = 0;
    for (int i = 0; i < 10; ++i) {
      col[static_cast<std::size_t>(i)] = rng.uniform_int(5) / 5.0;
      positive[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(2));
      pos += positive[static_cast<std::size_t>(i)];
      labs[static_cast<std::size_t>(i)] = positive[static_cast<std::size_t>(i)];
      scores[i * 2 + 1] = col[static_cast<std::size_t>(i)];
      scores[i * 2 + 0] = 0.0;
    }
    if (pos == 0) continue;
    CHECK(mean_average_precision(scores, labs).per_class_ap[1] ==
          doctest::Approx(ref_ap_binary(col, positive)).epsilon(1e-12));
  }
}

TEST_CASE("full reports match an independent reference on 25 random matrices") {
  Rng rng(34);
  for (int trial = 0; trial < 25; ++trial) {
    std::int64_t n = 12 + rng.uniform_int(24);
    std::int64_t c = 2 + rng.uniform_int(4);
    Tensor scores({n, c});
    std::vector<std::int64_t> labels;
    for (std::int64_t i = 0; i < n; ++i) {
      labels.push_back(i < c ? i : rng.uniform_int(c));  // every class present
      for (std::int64_t j = 0; j < c; ++j)
        scores[i * c + j] = rng.uniform_int(10) / 10.0;  // ties on purpose
    }
    MetricsReport got = evaluate_scores(scores, labels);
    RefMetrics expect = reference_all(scores, labels);
    CHECK(got.acc == doctest::Approx(expect.acc).epsilon(1e-12));
    CHECK(got.bacc == doctest::Approx(expect.bacc).epsilon(1e-12));
    CHECK(got.auc_macro == doctest::Approx(expect.auc).epsilon(1e-10));
    CHECK(got.map_macro == doctest::Approx(expect.map).epsilon(1e-10));
    // ACC is exactly the confusion trace over the total
    std::int64_t trace = 0;
    for (std::int64_t k = 0; k < c; ++k) trace += got.confusion.at(k, k);
    CHECK(got.acc == static_cast<double>(trace) / static_cast<double>(got.confusion.total()));
  }
}

TEST_CASE("bacc equals acc on balanced class counts") {
  Rng rng(35);
  for (int trial = 0; trial < 50; ++trial) {
    std::int64_t c = 2 + rng.uniform_int(4);
    std::int64_t per = 3 + rng.uniform_int(5);
    std::int64_t n = c * per;
    Tensor scores({n, c});
    std::vector<std::int64_t> labels;
    for (std::int64_t i = 0; i < n; ++i) {
      labels.push_back(i % c);
      for (std::int64_t j = 0; j < c; ++j) scores[i * c + j] = rng.uniform();
    }
    MetricsReport r = evaluate_scores(scores, labels);
    CHECK(r.bacc == doctest::Approx(r.acc).epsilon(1e-9));
  }
}

TEST_CASE("auc is invariant under strictly monotone score transforms") {
  Rng rng(36);
  for (int trial = 0; trial < 50; ++trial) {
    std::int64_t n = 10 + rng.uniform_int(20);
    Tensor scores({n, 2});
    std::vector<std::int64_t> labels;
    bool has0 = false, has1 = false;
    for (std::int64_t i = 0; i < n; ++i) {
      std::int64_t y = rng.uniform_int(2);
      labels.push_back(y);
      has0 |= y == 0;
      has1 |= y == 1;
      scores[i * 2] = rng.uniform(-2.0, 2.0);
      scores[i * 2 + 1] = rng.uniform(-2.0, 2.0);
    }
    if (!has0 || !has1) continue;
    Tensor warped(scores.shape());
    int pick = trial % 3;
    for (std::int64_t i = 0; i < scores.numel(); ++i)
      warped[i] = pick == 0   ? std::exp(scores[i])
                  : pick == 1 ? 3.0 * scores[i] + 7.0
                              : std::atan(scores[i]);
    double a = roc_auc_macro(scores, labels).auc_macro;
    double b = roc_auc_macro(warped, labels).auc_macro;
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
  }
}

TEST_CASE("argmax prediction ignores per-row shifts and temperature") {
  Rng rng(37);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor scores = random_tensor(rng, {6, 4}, -3.0, 3.0);
    double shift = rng.uniform(-10.0, 10.0);
    double temp = rng.uniform(0.1, 5.0);
    Tensor shifted(scores.shape());
    for (std::int64_t i = 0; i < 6; ++i)
      for (std::int64_t j = 0; j < 4; ++j)
        shifted[i * 4 + j] = (scores[i * 4 + j] + shift) / temp;
    for (std::int64_t i = 0; i < 6; ++i)
      CHECK(argmax_row(scores, i) == argmax_row(shifted, i));
  }
  // ties break toward the lowest index
  Tensor tie = Tensor::from({1, 3}, {0.4, 0.4, 0.2});
  CHECK(argmax_row(tie, 0) == 0);
}

TEST_CASE("absent classes are excluded and recorded") {
  Tensor scores = Tensor::from({4, 3}, {0.7, 0.2, 0.1, 0.6, 0.3, 0.1,
                                        0.2, 0.7, 0.1, 0.1, 0.8, 0.1});
  std::vector<std::int64_t> labels{0, 0, 1, 1};  // class 2 never appears
  MetricsReport r = evaluate_scores(scores, labels);
  REQUIRE(r.excluded_classes.size() == 1);
  CHECK(r.excluded_classes[0] == 2);
  CHECK(std::isnan(r.per_class_auc[2]));
  CHECK(std::isnan(r.per_class_recall[2]));
  CHECK(r.acc == 1.0);
}

TEST_CASE("evaluate_model scores softmaxed logits batch by batch") {
  Model m = build_backbone(backbone_spec("tiny-student"), 40);
  Var bias = m.parameter("fc.bias");
  for (std::int64_t k = 0; k < 8; ++k)
    bias.mutable_value()[k] = (k == 3) ? 2.0 : 0.0;  // class 3 wins on zero input

  std::vector<Tensor> images(5, Tensor::zeros({3, 32, 32}));
  std::vector<std::int64_t> labels{3, 3, 3, 0, 1};
  bool was = m.trainable();
  MetricsReport r = evaluate_model(m, images, labels, 2);  // uneven final batch
  CHECK(m.trainable() == was);
  CHECK(r.confusion.at(3, 3) == 3);
  CHECK(r.confusion.at(0, 3) == 1);
  CHECK(r.confusion.at(1, 3) == 1);
  CHECK(r.acc == doctest::Approx(0.6).epsilon(1e-12));

  CHECK_THROWS_AS(evaluate_model(m, {}, {}), InvalidArgument);
}

TEST_CASE("report json carries the versioned schema") {
  Tensor scores = Tensor::from({4, 2}, {0.9, 0.1, 0.8, 0.2, 0.1, 0.9, 0.3, 0.7});
  std::vector<std::int64_t> labels{0, 0, 1, 1};
  MetricsReport r = evaluate_scores(scores, labels);
  auto j = nlohmann::json::parse(r.to_json());
  CHECK(j.at("schema_version").get<int>() == kMetricsSchemaVersion);
  CHECK(j.at("acc").get<double>() == 1.0);
  CHECK(j.at("confusion")[0][0].get<int>() == 2);
  CHECK(j.at("roc_points").size() == 2);
  CHECK(j.at("per_class_recall").size() == 2);

  // NaN entries appear as null
  std::vector<std::int64_t> missing{0, 0, 1, 1};
  Tensor s3 = Tensor::from({4, 3}, {0.7, 0.2, 0.1, 0.6, 0.3, 0.1,
                                    0.2, 0.7, 0.1, 0.1, 0.8, 0.1});
  auto j3 = nlohmann::json::parse(evaluate_scores(s3, missing).to_json());
  CHECK(j3.at("per_class_auc")[2].is_null());
}

TEST_CASE("report json round-trips through the parser") {
  Tensor scores = Tensor::from({6, 3}, {0.7, 0.2, 0.1, 0.6, 0.3, 0.1, 0.2, 0.7, 0.1,
                                        0.1, 0.8, 0.1, 0.3, 0.3, 0.4, 0.5, 0.4, 0.1});
  std::vector<std::int64_t> labels{0, 0, 1, 1, 2, 0};  // every class present
  MetricsReport r = evaluate_scores(scores, labels);
  MetricsReport back = report_from_json(r.to_json());

  CHECK(back.acc == r.acc);
  CHECK(back.bacc == r.bacc);
  CHECK(back.auc_macro == r.auc_macro);
  CHECK(back.map_macro == r.map_macro);
  CHECK(back.per_class_recall == r.per_class_recall);
  CHECK(back.per_class_ap == r.per_class_ap);
  CHECK(back.per_class_auc == r.per_class_auc);
  CHECK(back.confusion.classes == r.confusion.classes);
  CHECK(back.confusion.counts == r.confusion.counts);
  CHECK(back.excluded_classes == r.excluded_classes);
  REQUIRE(back.roc_points.size() == r.roc_points.size());
  for (std::size_t c = 0; c < r.roc_points.size(); ++c) {
    REQUIRE(back.roc_points[c].size() == r.roc_points[c].size());
    for (std::size_t i = 0; i < r.roc_points[c].size(); ++i) {
      CHECK(back.roc_points[c][i].fpr == r.roc_points[c][i].fpr);
      CHECK(back.roc_points[c][i].tpr == r.roc_points[c][i].tpr);
    }
  }

  // Excluded classes survive as NaN / index entries.
  std::vector<std::int64_t> missing{0, 0, 1, 1, 0, 1};
  MetricsReport partial = report_from_json(evaluate_scores(scores, missing).to_json());
  CHECK(partial.excluded_classes == std::vector<std::int64_t>{2});
  CHECK(std::isnan(partial.per_class_auc[2]));

  CHECK_THROWS_AS(report_from_json("{nope"), InvalidArgument);
  CHECK_THROWS_AS(report_from_json("[1, 2]"), InvalidArgument);
  CHECK_THROWS_AS(report_from_json(R"({"schema_version": 999})"), InvalidArgument);
  auto j = nlohmann::json::parse(r.to_json());
  j.erase("confusion");
  CHECK_THROWS_AS(report_from_json(j.dump()), InvalidArgument);
  j = nlohmann::json::parse(r.to_json());
  j["confusion"][0].erase(0);  // no longer square
  CHECK_THROWS_AS(report_from_json(j.dump()), InvalidArgument);
}
