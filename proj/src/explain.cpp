#include "kd/explain.hpp"

#include <cmath>

#include "kd/image_io.hpp"
#include "kd/ops.hpp"

namespace kd {

ActivationMap grad_cam(Model& model, const Tensor& image, std::int64_t class_index) {
  const BackboneSpec& spec = model.spec();
  if (class_index < 0 || class_index >= spec.class_count)
    throw InvalidArgument("class index " + std::to_string(class_index) +
                          " out of range for " + std::to_string(spec.class_count) +
                          " classes");
  if (image.ndim() != 3)
    throw InvalidArgument("grad_cam expects a single (C,H,W) image");

  Tensor batch({1, image.dim(0), image.dim(1), image.dim(2)});
  for (std::int64_t i = 0; i < image.numel(); ++i) batch[i] = image[i];

  // gradients must flow: temporarily unfreeze if the caller froze the model
  bool was_trainable = model.trainable();
  model.set_trainable(true);
  ModelTaps taps = model.forward_with_taps(Var::leaf(batch, false));

  Tensor onehot = Tensor::zeros({1, spec.class_count});
  onehot[class_index] = 1.0;
  Var target = sum(mul(taps.logits, Var::leaf(onehot, false)));
  for (auto& p : model.parameters()) p.clear_grad();
  taps.features.clear_grad();
  backward(target);
  Tensor g = taps.features.grad();  // (1, K, Hf, Wf)
  model.set_trainable(was_trainable);

  const Tensor& f = taps.features.value();
  std::int64_t k = f.dim(1), hf = f.dim(2), wf = f.dim(3), area = hf * wf;

  // raw map: relu of the alpha-weighted channel sum
  Tensor raw({hf, wf});
  for (std::int64_t c = 0; c < k; ++c) {
    double alpha = 0.0;
    for (std::int64_t i = 0; i < area; ++i) alpha += g[c * area + i];
    alpha /= static_cast<double>(area);
    for (std::int64_t i = 0; i < area; ++i) raw[i] += alpha * f[c * area + i];
  }
  for (std::int64_t i = 0; i < area; ++i) raw[i] = std::max(raw[i], 0.0);

  // upsample to input resolution through the shared bilinear kernel
  Tensor raw4({1, 1, hf, wf});
  for (std::int64_t i = 0; i < area; ++i) raw4[i] = raw[i];
  Var up = bilinear_resize(Var::leaf(raw4, false), image.dim(1), image.dim(2));

  std::int64_t block_count = 0;
  for (const auto& [name, _] : model.named_parameters())
    block_count += name.find(".conv.weight") != std::string::npos;

  ActivationMap out;
  out.class_index = class_index;
  out.source_layer = "block" + std::to_string(block_count);
  out.heat = Tensor({image.dim(1), image.dim(2)});
  double mx = 0.0;
  for (std::int64_t i = 0; i < out.heat.numel(); ++i) mx = std::max(mx, up.value()[i]);
  if (mx <= 0.0) {
    out.all_zero = true;  // heat stays all zeros
  } else {
    for (std::int64_t i = 0; i < out.heat.numel(); ++i) out.heat[i] = up.value()[i] / mx;
  }
  return out;
}

void save_cam(const ActivationMap& map, const Tensor& image, const std::string& heat_path,
              const std::string& overlay_path) {
  save_image(map.heat, heat_path);

  if (image.ndim() != 3 || image.dim(1) != map.heat.dim(0) || image.dim(2) != map.heat.dim(1))
    throw InvalidArgument("overlay needs the image the map was computed from");
  std::int64_t h = image.dim(1), w = image.dim(2), area = h * w;
  Tensor overlay(image.shape());
  for (std::int64_t p = 0; p < area; ++p) {
    double hot = map.heat[p];
    // push hot regions toward red, keep cold regions as the input
    overlay[p] = (1 - hot) * image[p] + hot * 1.0;
    overlay[area + p] = (1 - hot) * image[area + p];
    overlay[2 * area + p] = (1 - hot) * image[2 * area + p];
  }
  save_image(overlay, overlay_path);
}

}  // namespace kd
