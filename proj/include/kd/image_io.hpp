#pragma once

#include <string>

#include "kd/tensor.hpp"

namespace kd {

// Images in memory are (3, H, W) RGB tensors with values in [0, 1].

// Decodes a file and bilinearly resizes to (h, w). NotFoundError when the
// file is missing, InvalidArgument when it cannot be decoded.
Tensor load_image(const std::string& path, std::int64_t h, std::int64_t w);

// Writes a (3, H, W) tensor (or (H, W) grayscale) as PNG/JPEG by extension.
void save_image(const Tensor& image, const std::string& path);

}  // namespace kd
