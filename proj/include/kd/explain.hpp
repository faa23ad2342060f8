#pragma once

#include <string>

#include "kd/models.hpp"

namespace kd {

// Gradient-weighted class activation map at input resolution.
struct ActivationMap {
  Tensor heat;  // (H, W), values in [0, 1]; max is 1 unless all_zero
  std::int64_t class_index = 0;
  std::string source_layer;
  bool all_zero = false;  // the rectified weighted sum vanished everywhere
};

// Channel weights are the spatial means of d logit_c / d feature_k; the map
// is the rectified weighted feature sum, bilinearly upsampled to the input
// size and max-normalized. InvalidArgument for an out-of-range class.
ActivationMap grad_cam(Model& model, const Tensor& image, std::int64_t class_index);

// Writes the heat map as a grayscale image and a red-tinted overlay on the
// input next to it.
void save_cam(const ActivationMap& map, const Tensor& image, const std::string& heat_path,
              const std::string& overlay_path);

}  // namespace kd
