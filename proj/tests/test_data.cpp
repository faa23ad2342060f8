#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "gradcheck.hpp"
#include "kd/data.hpp"
#include "kd/errors.hpp"
#include "kd/image_io.hpp"
#include "testutil.hpp"

using namespace kd;
using kdtest::TempDir;
using kdtest::tensors_identical;

namespace {

// Writes a corpus of solid-color 8x8 PNGs plus a manifest with the given
// one-hot rows (as raw CSV lines, so malformed cases are expressible).
void write_corpus(const TempDir& tmp, const std::vector<std::string>& manifest_lines,
                  const std::vector<std::string>& image_names) {
  std::filesystem::create_directories(tmp.path / "images");
  for (std::size_t i = 0; i < image_names.size(); ++i) {
    Tensor img = Tensor::full({3, 8, 8}, 0.25 + 0.1 * static_cast<double>(i % 5));
    save_image(img, (tmp.path / "images" / image_names[i]).string());
  }
  std::ofstream out(tmp.file("manifest.csv"));
  for (const auto& line : manifest_lines) out << line << "\n";
}

LabeledImageSet fake_set(std::int64_t n, std::int64_t classes) {
  LabeledImageSet ds;
  for (std::int64_t c = 0; c < classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
  ds.counts.assign(static_cast<std::size_t>(classes), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t label = i % classes;
    ds.items.push_back({"item" + std::to_string(i), label});
    ds.counts[static_cast<std::size_t>(label)] += 1;
  }
  return ds;
}

}  // namespace

TEST_CASE("load_dataset decodes one-hot manifests") {
  TempDir tmp;
  write_corpus(tmp,
               {"image,melanoma,nevus", "a.png,1,0", "b.png,0,1", "c.png,1,0", "d.png,0,1"},
               {"a.png", "b.png", "c.png", "d.png"});
  LabeledImageSet ds = load_dataset(tmp.path.string());
  CHECK(ds.size() == 4);
  CHECK(ds.classes() == 2);
  CHECK(ds.class_names == std::vector<std::string>{"melanoma", "nevus"});
  CHECK(ds.counts == std::vector<std::int64_t>{2, 2});
  CHECK(ds.items[0].label == 0);
  CHECK(ds.items[1].label == 1);
  CHECK(std::filesystem::exists(ds.items[0].image_path));
}

TEST_CASE("load_dataset resolves extensionless names and float indicators") {
  TempDir tmp;
  write_corpus(tmp, {"image,c0,c1", "a,1.0,0.0", "b.png,0,1"}, {"a.png", "b.png"});
  LabeledImageSet ds = load_dataset(tmp.path.string());
  CHECK(ds.size() == 2);
  CHECK(ds.items[0].image_path.find("a.png") != std::string::npos);
}

TEST_CASE("load_dataset accepts CRLF line endings") {
  TempDir tmp;
  std::filesystem::create_directories(tmp.path / "images");
  save_image(Tensor::full({3, 8, 8}, 0.5), (tmp.path / "images" / "a.png").string());
  std::ofstream out(tmp.file("manifest.csv"), std::ios::binary);
  out << "image,c0,c1\r\na,1,0\r\n";
  out.close();
  CHECK(load_dataset(tmp.path.string()).size() == 1);
}

TEST_CASE("malformed manifests carry the offending row number") {
  TempDir tmp;

  SUBCASE("all-zero row") {
    write_corpus(tmp, {"image,c0,c1", "a,1,0", "b,0,0"}, {"a.png", "b.png"});
    try {
      load_dataset(tmp.path.string());
      FAIL("expected ManifestError");
    } catch (const ManifestError& e) {
      CHECK(e.row == 3);
      CHECK(std::string(e.what()).find("one-hot") != std::string::npos);
    }
  }
  SUBCASE("multiple ones") {
    write_corpus(tmp, {"image,c0,c1", "a,1,1"}, {"a.png"});
    CHECK_THROWS_AS(load_dataset(tmp.path.string()), ManifestError);
  }
  SUBCASE("wrong cell count") {
    write_corpus(tmp, {"image,c0,c1", "a,1"}, {"a.png"});
    try {
      load_dataset(tmp.path.string());
      FAIL("expected ManifestError");
    } catch (const ManifestError& e) {
      CHECK(e.row == 2);
    }
  }
  SUBCASE("non-numeric cell") {
    write_corpus(tmp, {"image,c0,c1", "a,yes,no"}, {"a.png"});
    CHECK_THROWS_AS(load_dataset(tmp.path.string()), ManifestError);
  }
  SUBCASE("fractional indicator") {
    write_corpus(tmp, {"image,c0,c1", "a,0.5,0.5"}, {"a.png"});
    CHECK_THROWS_AS(load_dataset(tmp.path.string()), ManifestError);
  }
  SUBCASE("bad header") {
    write_corpus(tmp, {"file,c0,c1", "a,1,0"}, {"a.png"});
    CHECK_THROWS_AS(load_dataset(tmp.path.string()), ManifestError);
  }
  SUBCASE("single-class header") {
    write_corpus(tmp, {"image,c0", "a,1"}, {"a.png"});
    CHECK_THROWS_AS(load_dataset(tmp.path.string()), ManifestError);
  }
  SUBCASE("missing manifest") {
    CHECK_THROWS_AS(load_dataset(tmp.path.string()), NotFoundError);
  }
}

TEST_CASE("a manifest row naming a missing image fails with the file name") {
  TempDir tmp;
  write_corpus(tmp, {"image,c0,c1", "a,1,0", "ghost,0,1"}, {"a.png"});
  try {
    load_dataset(tmp.path.string());
    FAIL("expected NotFoundError");
  } catch (const NotFoundError& e) {
    CHECK(std::string(e.what()).find("ghost") != std::string::npos);
  }
}

TEST_CASE("split_dataset produces 72/18/10 from 100 items") {
  LabeledImageSet ds = fake_set(100, 4);
  DatasetSplits s = split_dataset(ds, SplitSpec{});
  CHECK(s.train.size() == 72);
  CHECK(s.val.size() == 18);
  CHECK(s.test.size() == 10);
  // counts fields stay consistent inside every split
  std::int64_t total = 0;
  for (auto c : s.train.counts) total += c;
  CHECK(total == 72);
}

TEST_CASE("split_dataset is deterministic and rejects tiny sets") {
  LabeledImageSet ds = fake_set(37, 3);
  SplitSpec spec;
  spec.seed = 9;
  DatasetSplits a = split_dataset(ds, spec);
  DatasetSplits b = split_dataset(ds, spec);
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.items.size(); ++i)
    CHECK(a.train.items[i].image_path == b.train.items[i].image_path);

  spec.seed = 10;
  DatasetSplits c = split_dataset(ds, spec);
  bool same = true;
  for (std::size_t i = 0; i < a.train.items.size() && same; ++i)
    same = a.train.items[i].image_path == c.train.items[i].image_path;
  CHECK_FALSE(same);

  CHECK_THROWS_AS(split_dataset(fake_set(9, 3), SplitSpec{}), InvalidArgument);
}

TEST_CASE("split partitions are disjoint and exhaustive across 50 seeds") {
  LabeledImageSet ds = fake_set(100, 8);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    SplitSpec spec;
    spec.seed = seed;
    DatasetSplits s = split_dataset(ds, spec);
    std::set<std::string> seen;
    for (const auto* split : {&s.train, &s.val, &s.test})
      for (const auto& item : split->items) {
        CHECK(seen.insert(item.image_path).second);  // disjoint
      }
    CHECK(seen.size() == 100);  // exhaustive
  }
}

TEST_CASE("class weights follow inverse frequency with mean 1") {
  LabeledImageSet balanced = fake_set(10, 2);  // counts [5,5]
  ClassWeights w = dataset_class_weights(balanced);
  CHECK(w.weights == std::vector<double>{1.0, 1.0});

  LabeledImageSet skewed;
  skewed.class_names = {"rare", "common"};
  skewed.counts = {2, 8};
  for (int i = 0; i < 2; ++i) skewed.items.push_back({"r", 0});
  for (int i = 0; i < 8; ++i) skewed.items.push_back({"c", 1});
  ClassWeights ws = dataset_class_weights(skewed);
  CHECK(ws.weights[0] == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(ws.weights[1] == doctest::Approx(0.625).epsilon(1e-12));

  CHECK(dataset_class_weights(fake_set(4, 4)).weights ==
        std::vector<double>{1.0, 1.0, 1.0, 1.0});
}

TEST_CASE("class weights: rarer class strictly larger, empty class named") {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    std::int64_t c = 2 + rng.uniform_int(6);
    LabeledImageSet ds;
    for (std::int64_t j = 0; j < c; ++j) {
      ds.class_names.push_back("class" + std::to_string(j));
      ds.counts.push_back(1 + rng.uniform_int(20));
    }
    for (std::int64_t j = 0; j < c; ++j)
      for (std::int64_t k = 0; k < ds.counts[static_cast<std::size_t>(j)]; ++k)
        ds.items.push_back({"x", j});
    ClassWeights w = dataset_class_weights(ds);
    // the dataset-average applied weight is 1: sum_c n_c * w_c = N
    double applied = 0.0;
    for (std::int64_t j = 0; j < c; ++j)
      applied += static_cast<double>(ds.counts[static_cast<std::size_t>(j)]) *
                 w.weights[static_cast<std::size_t>(j)];
    CHECK(applied / static_cast<double>(ds.size()) == doctest::Approx(1.0).epsilon(1e-9));
    for (std::int64_t a = 0; a < c; ++a)
      for (std::int64_t b = 0; b < c; ++b)
        if (ds.counts[static_cast<std::size_t>(a)] < ds.counts[static_cast<std::size_t>(b)])
          CHECK(w.weights[static_cast<std::size_t>(a)] >
                w.weights[static_cast<std::size_t>(b)]);
  }

  LabeledImageSet empty_class;
  empty_class.class_names = {"present", "absent"};
  empty_class.counts = {3, 0};
  for (int i = 0; i < 3; ++i) empty_class.items.push_back({"x", 0});
  try {
    dataset_class_weights(empty_class);
    FAIL("expected InvalidArgument");
  } catch (const InvalidArgument& e) {
    CHECK(std::string(e.what()).find("absent") != std::string::npos);
  }
}

TEST_CASE("flip ops are involutions and exact") {
  Rng rng(3);
  Tensor img = random_tensor(rng, {3, 7, 5}, 0.0, 1.0);
  CHECK(tensors_identical(flip_horizontal(flip_horizontal(img)), img));
  CHECK(tensors_identical(flip_vertical(flip_vertical(img)), img));
  CHECK_FALSE(tensors_identical(flip_horizontal(img), img));
  // horizontal flip moves column 0 to column w-1
  CHECK(flip_horizontal(img)[0] == img[4]);
}

TEST_CASE("brightness scales pointwise and clamps") {
  Tensor img = Tensor::full({3, 4, 4}, 0.4);
  Tensor brighter = adjust_brightness(img, 1.5);
  for (std::int64_t i = 0; i < brighter.numel(); ++i)
    CHECK(brighter[i] == doctest::Approx(0.6).epsilon(1e-12));
  Tensor clamped = adjust_brightness(Tensor::full({3, 2, 2}, 0.8), 1.5);
  for (std::int64_t i = 0; i < clamped.numel(); ++i) CHECK(clamped[i] == 1.0);
}

TEST_CASE("contrast and saturation behave at their fixed points") {
  Rng rng(4);
  Tensor img = random_tensor(rng, {3, 6, 6}, 0.1, 0.9);

  Tensor same_c = adjust_contrast(img, 1.0);
  Tensor same_s = adjust_saturation(img, 1.0);
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    CHECK(same_c[i] == doctest::Approx(img[i]).epsilon(1e-12));
    CHECK(same_s[i] == doctest::Approx(img[i]).epsilon(1e-12));
  }

  // contrast 0 collapses to the mean
  double mean = 0.0;
  for (std::int64_t i = 0; i < img.numel(); ++i) mean += img[i];
  mean /= static_cast<double>(img.numel());
  Tensor flat = adjust_contrast(img, 0.0);
  for (std::int64_t i = 0; i < flat.numel(); ++i)
    CHECK(flat[i] == doctest::Approx(mean).epsilon(1e-12));

  // saturation 0 equalizes the channels per pixel
  Tensor gray = adjust_saturation(img, 0.0);
  std::int64_t area = 36;
  for (std::int64_t p = 0; p < area; ++p) {
    CHECK(gray[p] == doctest::Approx(gray[area + p]).epsilon(1e-12));
    CHECK(gray[p] == doctest::Approx(gray[2 * area + p]).epsilon(1e-12));
  }
}

TEST_CASE("scale jitter at zoom 1 is the identity") {
  Rng rng(5);
  Tensor img = random_tensor(rng, {3, 9, 9}, 0.0, 1.0);
  CHECK(tensors_identical(scale_jitter(img, 1.0), img));
  Tensor zoomed = scale_jitter(img, 1.1);
  CHECK(zoomed.shape() == img.shape());
  CHECK_FALSE(tensors_identical(zoomed, img));
}

TEST_CASE("noise with sigma 0 is the identity") {
  Rng rng(6);
  Tensor img = random_tensor(rng, {3, 4, 4}, 0.2, 0.8);
  Rng noise_rng(1);
  CHECK(tensors_identical(add_gaussian_noise(img, 0.0, noise_rng), img));
}

TEST_CASE("augment: identity policy is a no-op, full policy is deterministic") {
  Rng rng(7);
  Tensor img = random_tensor(rng, {3, 16, 16}, 0.0, 1.0);

  CHECK(tensors_identical(augment(img, AugmentPolicy::none(), 123), img));

  AugmentPolicy policy;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Tensor a = augment(img, policy, seed);
    Tensor b = augment(img, policy, seed);
    CHECK(tensors_identical(a, b));
    CHECK(a.shape() == img.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) {
      CHECK(a[i] >= 0.0);
      CHECK(a[i] <= 1.0);
    }
  }
  // at least some seed must actually transform the image
  bool changed = false;
  for (std::uint64_t seed = 0; seed < 10 && !changed; ++seed)
    changed = !tensors_identical(augment(img, policy, seed), img);
  CHECK(changed);
}

TEST_CASE("make_batches covers the index set in shuffled disjoint blocks") {
  auto batches = make_batches(10, 3, 0, false);
  REQUIRE(batches.size() == 4);
  CHECK(batches[0].size() == 3);
  CHECK(batches[3].size() == 1);

  auto dropped = make_batches(10, 3, 0, true);
  CHECK(dropped.size() == 3);

  auto again = make_batches(10, 3, 0, false);
  CHECK(batches == again);
  CHECK(make_batches(10, 3, 1, false) != batches);

  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto bs = make_batches(23, 4, seed, false);
    std::set<std::int64_t> seen;
    for (const auto& b : bs)
      for (auto i : b) CHECK(seen.insert(i).second);
    CHECK(seen.size() == 23);
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == 22);
  }

  CHECK_THROWS_AS(make_batches(5, 6, 0, false), InvalidArgument);
  CHECK_THROWS_AS(make_batches(5, 1, 0, false), InvalidArgument);
}

TEST_CASE("fixture generator round-trips through load_dataset") {
  TempDir tmp;
  FixtureSpec spec;
  spec.classes = 8;
  spec.per_class = 5;
  spec.image_size = 32;
  spec.seed = 0;
  make_fixture(tmp.path.string(), spec);

  LabeledImageSet ds = load_dataset(tmp.path.string());
  CHECK(ds.size() == 40);
  CHECK(ds.classes() == 8);
  for (auto c : ds.counts) CHECK(c == 5);

  Tensor img = load_image(ds.items[0].image_path, 32, 32);
  CHECK(img.shape() == std::vector<std::int64_t>{3, 32, 32});
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    CHECK(img[i] >= 0.0);
    CHECK(img[i] <= 1.0);
  }

  // same seed regenerates byte-identical manifests
  TempDir tmp2;
  make_fixture(tmp2.path.string(), spec);
  CHECK(kdtest::slurp(tmp.file("manifest.csv")) == kdtest::slurp(tmp2.file("manifest.csv")));

  // different classes get visibly different mean colors
  LabeledImageSet ds2 = load_dataset(tmp2.path.string());
  auto mean_rgb = [&](const DatasetItem& item) {
    Tensor t = load_image(item.image_path, 32, 32);
    std::array<double, 3> m{0, 0, 0};
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t p = 0; p < 32 * 32; ++p) m[static_cast<std::size_t>(c)] += t[c * 32 * 32 + p];
    for (auto& v : m) v /= 32.0 * 32.0;
    return m;
  };
  auto m0 = mean_rgb(ds2.items[0]);
  std::array<double, 3> m4{0, 0, 0};
  for (const auto& item : ds2.items)
    if (item.label == 4) {
      m4 = mean_rgb(item);
      break;
    }
  double dist = 0.0;
  for (int c = 0; c < 3; ++c) dist += std::abs(m0[static_cast<std::size_t>(c)] - m4[static_cast<std::size_t>(c)]);
  CHECK(dist > 0.1);
}

TEST_CASE("image io round-trips 8-bit quantized values") {
  TempDir tmp;
  Rng rng(8);
  Tensor img = random_tensor(rng, {3, 16, 16}, 0.0, 1.0);
  std::string path = tmp.file("x.png");
  save_image(img, path);
  Tensor back = load_image(path, 16, 16);
  for (std::int64_t i = 0; i < img.numel(); ++i)
    CHECK(std::abs(back[i] - img[i]) <= 0.5 / 255.0 + 1e-9);

  CHECK_THROWS_AS(load_image(tmp.file("missing.png"), 8, 8), NotFoundError);
  std::ofstream(tmp.file("junk.png")) << "not an image";
  CHECK_THROWS_AS(load_image(tmp.file("junk.png"), 8, 8), InvalidArgument);
}
