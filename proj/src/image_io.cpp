#include "kd/image_io.hpp"

#include <filesystem>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "kd/errors.hpp"

namespace kd {

Tensor load_image(const std::string& path, std::int64_t h, std::int64_t w) {
  if (!std::filesystem::exists(path))
    throw NotFoundError("image '" + path + "' does not exist");
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw InvalidArgument("cannot decode image '" + path + "'");
  if (bgr.rows != h || bgr.cols != w)
    cv::resize(bgr, bgr, cv::Size(static_cast<int>(w), static_cast<int>(h)), 0, 0,
               cv::INTER_LINEAR);
  Tensor out({3, h, w});
  for (std::int64_t y = 0; y < h; ++y) {
    const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(static_cast<int>(y));
    for (std::int64_t x = 0; x < w; ++x) {
      // OpenCV decodes BGR; tensors are RGB
      out[(0 * h + y) * w + x] = row[x][2] / 255.0;
      out[(1 * h + y) * w + x] = row[x][1] / 255.0;
      out[(2 * h + y) * w + x] = row[x][0] / 255.0;
    }
  }
  return out;
}

void save_image(const Tensor& image, const std::string& path) {
  auto to_byte = [](double v) {
    double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    return static_cast<unsigned char>(std::lround(c * 255.0));
  };
  cv::Mat bgr;
  if (image.ndim() == 3 && image.dim(0) == 3) {
    std::int64_t h = image.dim(1), w = image.dim(2);
    bgr.create(static_cast<int>(h), static_cast<int>(w), CV_8UC3);
    for (std::int64_t y = 0; y < h; ++y) {
      cv::Vec3b* row = bgr.ptr<cv::Vec3b>(static_cast<int>(y));
      for (std::int64_t x = 0; x < w; ++x) {
        row[x][2] = to_byte(image[(0 * h + y) * w + x]);
        row[x][1] = to_byte(image[(1 * h + y) * w + x]);
        row[x][0] = to_byte(image[(2 * h + y) * w + x]);
      }
    }
  } else if (image.ndim() == 2) {
    std::int64_t h = image.dim(0), w = image.dim(1);
    bgr.create(static_cast<int>(h), static_cast<int>(w), CV_8UC1);
    for (std::int64_t y = 0; y < h; ++y) {
      unsigned char* row = bgr.ptr<unsigned char>(static_cast<int>(y));
      for (std::int64_t x = 0; x < w; ++x) row[x] = to_byte(image[y * w + x]);
    }
  } else {
    throw InvalidArgument("save_image expects (3,H,W) or (H,W), got " +
                          shape_str(image.shape()));
  }
  if (!cv::imwrite(path, bgr))
    throw InvalidArgument("cannot write image '" + path + "'");
}

}  // namespace kd
