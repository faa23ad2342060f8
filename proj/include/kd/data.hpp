#pragma once

#include <string>
#include <vector>

#include "kd/losses.hpp"
#include "kd/rng.hpp"
#include "kd/tensor.hpp"

namespace kd {

// One manifest row: a resolvable image file and its class index.
struct DatasetItem {
  std::string image_path;
  std::int64_t label = 0;
};

struct LabeledImageSet {
  std::vector<DatasetItem> items;
  std::vector<std::string> class_names;
  std::vector<std::int64_t> counts;  // per class, sums to items.size()

  std::int64_t size() const { return static_cast<std::int64_t>(items.size()); }
  std::int64_t classes() const { return static_cast<std::int64_t>(class_names.size()); }
};

// Fractions for the test carve-out and the train:val ratio of the remainder.
struct SplitSpec {
  double test_fraction = 0.10;
  double train_fraction = 0.8;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DatasetSplits {
  LabeledImageSet train, val, test;
};

// Reads `<root>/manifest.csv` (header "image,<class_1>,...,<class_C>",
// one-hot rows; row numbers in errors count the header as line 1) and
// resolves every image under `<root>/images/`. Rows referencing missing
// files raise NotFoundError naming the file; malformed rows raise
// ManifestError with the line number.
LabeledImageSet load_dataset(const std::string& root, const std::string& manifest = "");

// Shuffles once with the spec seed, carves off round(N * test_fraction) for
// test, then splits the remainder train:val. Requires at least 10 items.
DatasetSplits split_dataset(const LabeledImageSet& ds, const SplitSpec& spec);

// Inverse-frequency weights w_c = N / (C * n_c); InvalidArgument naming the
// class when some class has no samples.
ClassWeights dataset_class_weights(const LabeledImageSet& ds);

// ---- augmentation ----------------------------------------------------------
// Atomic ops are exposed so their arithmetic is testable; all clamp to [0,1]
// and preserve shape.

Tensor flip_horizontal(const Tensor& image);
Tensor flip_vertical(const Tensor& image);
Tensor adjust_brightness(const Tensor& image, double factor);
Tensor adjust_contrast(const Tensor& image, double factor);    // about the image mean
Tensor adjust_saturation(const Tensor& image, double factor);  // toward per-pixel gray
Tensor scale_jitter(const Tensor& image, double zoom);         // central crop + resize back
Tensor add_gaussian_noise(const Tensor& image, double sigma, Rng& rng);

struct AugmentPolicy {
  bool flips = true;
  bool brightness = true;
  bool contrast = true;
  bool saturation = true;
  bool scaling = true;
  bool noise = true;
  double noise_sigma = 0.01;  // in [0,1] pixel units

  static AugmentPolicy none() { return {false, false, false, false, false, false, 0.0}; }
};

// Applies each enabled op with probability 1/2 and seed-derived parameters.
// Deterministic in (image, policy, seed); output shape equals input shape.
Tensor augment(const Tensor& image, const AugmentPolicy& policy, std::uint64_t seed);

// ---- batching --------------------------------------------------------------

// Shuffled disjoint index batches covering [0, n); the last batch may be
// short unless drop_last. Requires 2 <= batch <= n.
std::vector<std::vector<std::int64_t>> make_batches(std::int64_t n, std::int64_t batch,
                                                    std::uint64_t seed, bool drop_last);

// ---- synthetic corpora -----------------------------------------------------

struct FixtureSpec {
  std::int64_t classes = 8;
  std::int64_t per_class = 30;
  std::int64_t image_size = 32;
  std::uint64_t seed = 0;
};

// Writes `<dir>/images/*.png` + `<dir>/manifest.csv` in the ingestion layout:
// class-dependent color/stripe patterns with per-image jitter, hard enough
// that tiny models make mistakes but separable enough to learn.
void make_fixture(const std::string& dir, const FixtureSpec& spec);

}  // namespace kd
