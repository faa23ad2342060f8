#include "kd/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "kd/errors.hpp"
#include "kd/image_io.hpp"

namespace kd {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSplitStream = 0x73706c6974ULL;    // "split"
constexpr std::uint64_t kFixtureStream = 0x66697874ULL;    // "fixt"

std::vector<std::string> split_csv_line(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();  // CRLF manifests
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

// Accepts "0", "1", "0.0", "1.0" (the ground-truth CSV convention); anything
// else is malformed.
int parse_indicator(const std::string& s, long row) {
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw ManifestError("non-numeric label cell '" + s + "'", row);
  if (v == 0.0) return 0;
  if (v == 1.0) return 1;
  throw ManifestError("label cell must be 0 or 1, got '" + s + "'", row);
}

LabeledImageSet subset(const LabeledImageSet& ds, const std::vector<std::int64_t>& idx) {
  LabeledImageSet out;
  out.class_names = ds.class_names;
  out.counts.assign(ds.class_names.size(), 0);
  for (std::int64_t i : idx) {
    out.items.push_back(ds.items[static_cast<std::size_t>(i)]);
    out.counts[static_cast<std::size_t>(out.items.back().label)] += 1;
  }
  return out;
}

void rgb_from_hue(double hue01, double sat, double val, double rgb[3]) {
  double h = hue01 * 6.0;
  int i = static_cast<int>(h) % 6;
  double f = h - std::floor(h);
  double p = val * (1 - sat), q = val * (1 - sat * f), t = val * (1 - sat * (1 - f));
  switch (i) {
    case 0: rgb[0] = val; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = val; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = val; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = val; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = val; break;
    default: rgb[0] = val; rgb[1] = p; rgb[2] = q; break;
  }
}

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

}  // namespace

void SplitSpec::validate() const {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw InvalidArgument("test_fraction must be in (0,1)");
  if (!(train_fraction > 0.0 && val_fraction > 0.0))
    throw InvalidArgument("train/val fractions must be positive");
  if (std::abs(train_fraction + val_fraction - 1.0) > 1e-9)
    throw InvalidArgument("train_fraction + val_fraction must be 1");
}

LabeledImageSet load_dataset(const std::string& root, const std::string& manifest) {
  std::string manifest_path = manifest.empty() ? (fs::path(root) / "manifest.csv").string()
                                               : manifest;
  std::ifstream in(manifest_path);
  if (!in) throw NotFoundError("manifest '" + manifest_path + "' does not exist");

  std::string line;
  if (!std::getline(in, line)) throw ManifestError("manifest is empty", 1);
  std::vector<std::string> header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "image")
    throw ManifestError("header must be 'image,<class_1>,...,<class_C>' with C >= 2", 1);

  LabeledImageSet ds;
  ds.class_names.assign(header.begin() + 1, header.end());
  ds.counts.assign(ds.class_names.size(), 0);
  std::size_t c = ds.class_names.size();

  fs::path images_dir = fs::path(root) / "images";
  long row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    std::vector<std::string> fields = split_csv_line(line);
    if (fields.size() != c + 1)
      throw ManifestError("expected " + std::to_string(c + 1) + " cells, got " +
                              std::to_string(fields.size()),
                          row);
    std::int64_t label = -1;
    int ones = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (parse_indicator(fields[j + 1], row) == 1) {
        ++ones;
        label = static_cast<std::int64_t>(j);
      }
    }
    if (ones != 1)
      throw ManifestError("row must be one-hot, found " + std::to_string(ones) + " ones",
                          row);

    fs::path p = images_dir / fields[0];
    if (!fs::exists(p)) {
      if (fs::exists(p.string() + ".jpg")) p = p.string() + ".jpg";
      else if (fs::exists(p.string() + ".png")) p = p.string() + ".png";
      else
        throw NotFoundError("image file '" + p.string() + "{,.jpg,.png}' not found " +
                            "(manifest row " + std::to_string(row) + ")");
    }
    ds.items.push_back({p.string(), label});
    ds.counts[static_cast<std::size_t>(label)] += 1;
  }
  if (ds.items.empty()) throw ManifestError("manifest has no data rows", 1);
  return ds;
}

DatasetSplits split_dataset(const LabeledImageSet& ds, const SplitSpec& spec) {
  spec.validate();
  std::int64_t n = ds.size();
  if (n < 10) throw InvalidArgument("split needs at least 10 items, got " + std::to_string(n));

  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng(Rng::derive(spec.seed, {kSplitStream}));
  rng.shuffle(idx);

  std::int64_t n_test = std::llround(static_cast<double>(n) * spec.test_fraction);
  std::int64_t rest = n - n_test;
  std::int64_t n_val = std::llround(static_cast<double>(rest) * spec.val_fraction);
  std::int64_t n_train = rest - n_val;
  if (n_test < 1 || n_val < 1 || n_train < 1)
    throw InvalidArgument("split fractions leave an empty partition");

  DatasetSplits out;
  out.test = subset(ds, {idx.begin(), idx.begin() + n_test});
  out.val = subset(ds, {idx.begin() + n_test, idx.begin() + n_test + n_val});
  out.train = subset(ds, {idx.begin() + n_test + n_val, idx.end()});
  return out;
}

ClassWeights dataset_class_weights(const LabeledImageSet& ds) {
  std::int64_t n = ds.size(), c = ds.classes();
  std::vector<double> w(static_cast<std::size_t>(c));
  for (std::int64_t j = 0; j < c; ++j) {
    std::int64_t nc = ds.counts[static_cast<std::size_t>(j)];
    if (nc == 0)
      throw InvalidArgument("class '" + ds.class_names[static_cast<std::size_t>(j)] +
                            "' has no samples; cannot weight by inverse frequency");
    w[static_cast<std::size_t>(j)] =
        static_cast<double>(n) / (static_cast<double>(c) * static_cast<double>(nc));
  }
  ClassWeights cw{std::move(w)};
  cw.validate();
  return cw;
}

Tensor flip_horizontal(const Tensor& image) {
  if (image.ndim() != 3) throw InvalidArgument("augment ops expect (C,H,W)");
  std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::int64_t k = 0; k < c; ++k)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        out[(k * h + y) * w + x] = image[(k * h + y) * w + (w - 1 - x)];
  return out;
}

Tensor flip_vertical(const Tensor& image) {
  if (image.ndim() != 3) throw InvalidArgument("augment ops expect (C,H,W)");
  std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::int64_t k = 0; k < c; ++k)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        out[(k * h + y) * w + x] = image[(k * h + (h - 1 - y)) * w + x];
  return out;
}

Tensor adjust_brightness(const Tensor& image, double factor) {
  Tensor out(image.shape());
  for (std::int64_t i = 0; i < image.numel(); ++i) out[i] = clamp01(image[i] * factor);
  return out;
}

Tensor adjust_contrast(const Tensor& image, double factor) {
  double mean = 0.0;
  for (std::int64_t i = 0; i < image.numel(); ++i) mean += image[i];
  mean /= static_cast<double>(image.numel());
  Tensor out(image.shape());
  for (std::int64_t i = 0; i < image.numel(); ++i)
    out[i] = clamp01(mean + factor * (image[i] - mean));
  return out;
}

Tensor adjust_saturation(const Tensor& image, double factor) {
  if (image.ndim() != 3 || image.dim(0) != 3)
    throw InvalidArgument("adjust_saturation expects (3,H,W)");
  std::int64_t h = image.dim(1), w = image.dim(2), area = h * w;
  Tensor out(image.shape());
  for (std::int64_t p = 0; p < area; ++p) {
    double gray = (image[p] + image[area + p] + image[2 * area + p]) / 3.0;
    for (std::int64_t k = 0; k < 3; ++k)
      out[k * area + p] = clamp01(gray + factor * (image[k * area + p] - gray));
  }
  return out;
}

Tensor scale_jitter(const Tensor& image, double zoom) {
  if (image.ndim() != 3) throw InvalidArgument("augment ops expect (C,H,W)");
  if (zoom < 1.0) zoom = 1.0;  // degenerate parameters clamp
  std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  double cy = (static_cast<double>(h) - 1.0) / 2.0;
  double cx = (static_cast<double>(w) - 1.0) / 2.0;
  for (std::int64_t y = 0; y < h; ++y) {
    double sy = cy + (static_cast<double>(y) - cy) / zoom;
    std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
    std::int64_t y1 = std::min(y0 + 1, h - 1);
    double fy = sy - static_cast<double>(y0);
    for (std::int64_t x = 0; x < w; ++x) {
      double sx = cx + (static_cast<double>(x) - cx) / zoom;
      std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
      std::int64_t x1 = std::min(x0 + 1, w - 1);
      double fx = sx - static_cast<double>(x0);
      for (std::int64_t k = 0; k < c; ++k) {
        const double* plane = &image.data()[k * h * w];
        double v00 = plane[y0 * w + x0], v01 = plane[y0 * w + x1];
        double v10 = plane[y1 * w + x0], v11 = plane[y1 * w + x1];
        out[(k * h + y) * w + x] = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                                   fy * ((1 - fx) * v10 + fx * v11);
      }
    }
  }
  return out;
}

Tensor add_gaussian_noise(const Tensor& image, double sigma, Rng& rng) {
  Tensor out(image.shape());
  for (std::int64_t i = 0; i < image.numel(); ++i)
    out[i] = clamp01(image[i] + sigma * rng.normal());
  return out;
}

Tensor augment(const Tensor& image, const AugmentPolicy& policy, std::uint64_t seed) {
  Rng rng(seed);
  Tensor out = image;
  if (policy.flips) {
    if (rng.uniform() < 0.5) out = flip_horizontal(out);
    if (rng.uniform() < 0.5) out = flip_vertical(out);
  }
  if (policy.brightness && rng.uniform() < 0.5)
    out = adjust_brightness(out, rng.uniform(0.75, 1.25));
  if (policy.contrast && rng.uniform() < 0.5)
    out = adjust_contrast(out, rng.uniform(0.75, 1.25));
  if (policy.saturation && rng.uniform() < 0.5)
    out = adjust_saturation(out, rng.uniform(0.5, 1.5));
  if (policy.scaling && rng.uniform() < 0.5)
    out = scale_jitter(out, rng.uniform(1.0, 1.15));
  if (policy.noise && rng.uniform() < 0.5)
    out = add_gaussian_noise(out, policy.noise_sigma, rng);
  return out;
}

std::vector<std::vector<std::int64_t>> make_batches(std::int64_t n, std::int64_t batch,
                                                    std::uint64_t seed, bool drop_last) {
  if (batch < 2) throw InvalidArgument("batch size must be at least 2 (relational terms need pairs)");
  if (batch > n)
    throw InvalidArgument("batch size " + std::to_string(batch) + " exceeds split size " +
                          std::to_string(n));
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(idx);

  std::vector<std::vector<std::int64_t>> batches;
  for (std::int64_t start = 0; start < n; start += batch) {
    std::int64_t end = std::min(start + batch, n);
    if (drop_last && end - start < batch) break;
    batches.emplace_back(idx.begin() + start, idx.begin() + end);
  }
  return batches;
}

void make_fixture(const std::string& dir, const FixtureSpec& spec) {
  if (spec.classes < 2 || spec.per_class < 1 || spec.image_size < 8)
    throw InvalidArgument("fixture needs >= 2 classes, >= 1 image per class, size >= 8");
  fs::create_directories(fs::path(dir) / "images");
  Rng rng(Rng::derive(spec.seed, {kFixtureStream}));

  std::ofstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest) throw InvalidArgument("cannot write manifest under '" + dir + "'");
  manifest << "image";
  for (std::int64_t c = 0; c < spec.classes; ++c) manifest << ",class" << c;
  manifest << "\n";

  std::int64_t s = spec.image_size;
  for (std::int64_t c = 0; c < spec.classes; ++c) {
    double base[3];
    rgb_from_hue(static_cast<double>(c) / static_cast<double>(spec.classes), 0.55, 0.6, base);
    // stripe frequency and orientation separate classes that share nearby hues
    double freq = 2.0 + static_cast<double>(c % 4);
    bool horizontal = (c % 2) == 0;

    for (std::int64_t k = 0; k < spec.per_class; ++k) {
      double phase = rng.uniform(0.0, 2.0 * M_PI);
      double jitter[3] = {rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08),
                          rng.uniform(-0.08, 0.08)};
      Tensor img({3, s, s});
      for (std::int64_t y = 0; y < s; ++y)
        for (std::int64_t x = 0; x < s; ++x) {
          double t = static_cast<double>(horizontal ? y : x) / static_cast<double>(s);
          double stripe = 0.22 * std::sin(2.0 * M_PI * freq * t + phase);
          for (std::int64_t ch = 0; ch < 3; ++ch) {
            double v = base[ch] + jitter[ch] + stripe + 0.10 * rng.normal();
            img[(ch * s + y) * s + x] = clamp01(v);
          }
        }
      std::string name = "img_c" + std::to_string(c) + "_" + std::to_string(k);
      save_image(img, (fs::path(dir) / "images" / (name + ".png")).string());
      manifest << name;
      for (std::int64_t j = 0; j < spec.classes; ++j) manifest << (j == c ? ",1" : ",0");
      manifest << "\n";
    }
  }
}

}  // namespace kd
