#include "kd/models.hpp"

#include <cmath>

namespace kd {

// Defined in checkpoint.cpp; reads a checkpoint and copies its parameters
// into the model, validating names and shapes.
void load_pretrained_into(Model& model, const std::string& source);

void BackboneSpec::validate() const {
  if (name.empty()) throw InvalidArgument("backbone name is empty");
  if (class_count < 2) throw InvalidArgument("class_count must be at least 2");
  if (input_h < 1 || input_w < 1 || input_channels < 1)
    throw InvalidArgument("input size must be positive");
  if (last_conv_channels < 1) throw InvalidArgument("last_conv_channels must be positive");
  if (embedding_width < 1) throw InvalidArgument("embedding_width must be positive");
  if (projection_dim < 1) throw InvalidArgument("projection_dim must be positive");
}

namespace {

struct Arch {
  std::vector<std::int64_t> block_channels;
  bool runnable = true;  // large entries are registered but not bundled
};

const std::vector<std::pair<std::string, Arch>>& registry() {
  static const std::vector<std::pair<std::string, Arch>> entries = {
      {"tiny-teacher", {{8, 12, 16}, true}},
      {"tiny-student", {{6, 8}, true}},
      // Real-run entries: metadata only. Building them needs externally
      // supplied pretrained weights; this build does not bundle them.
      {"resnet50", {{2048}, false}},
      {"mobilenetv2", {{1280}, false}},
  };
  return entries;
}

const Arch& find_arch(const std::string& name) {
  for (const auto& [n, arch] : registry())
    if (n == name) return arch;
  std::string names;
  for (const auto& [n, _] : registry()) names += (names.empty() ? "" : ", ") + n;
  throw NotFoundError("unknown backbone '" + name + "' (registered: " + names + ")");
}

Tensor normal_init(Rng& rng, std::vector<std::int64_t> shape, double stddev) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * stddev;
  return t;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::vector<std::string> registered_backbones() {
  std::vector<std::string> names;
  for (const auto& [n, _] : registry()) names.push_back(n);
  return names;
}

BackboneSpec backbone_spec(const std::string& name) {
  const Arch& arch = find_arch(name);
  BackboneSpec spec;
  spec.name = name;
  spec.last_conv_channels = arch.block_channels.back();
  spec.embedding_width = arch.block_channels.back();
  if (!arch.runnable) {
    spec.input_h = spec.input_w = 224;
  }
  return spec;
}

Model build_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Arch& arch = find_arch(spec.name);
  if (!arch.runnable) {
    throw UnavailableError(
        "backbone '" + spec.name + "' requires pretrained weights (set "
        "pretrained_source); this build bundles only the tiny backbones");
  }
  if (spec.last_conv_channels != arch.block_channels.back())
    throw InvalidArgument("last_conv_channels of '" + spec.name + "' is " +
                          std::to_string(arch.block_channels.back()));
  if (spec.embedding_width != arch.block_channels.back())
    throw InvalidArgument("embedding_width must equal last_conv_channels for '" +
                          spec.name + "'");

  Model m;
  m.spec_ = spec;
  Rng rng(Rng::derive(seed, {fnv1a(spec.name)}));

  std::int64_t cin = spec.input_channels;
  for (std::size_t bi = 0; bi < arch.block_channels.size(); ++bi) {
    std::int64_t cout = arch.block_channels[bi];
    Model::Block blk;
    double stddev = std::sqrt(2.0 / static_cast<double>(cin * 9));
    blk.conv_w = Var::leaf(normal_init(rng, {cout, cin, 3, 3}, stddev), true);
    blk.conv_b = Var::leaf(Tensor::zeros({cout}), true);
    blk.gamma = Var::leaf(Tensor::full({cout}, 1.0), true);
    blk.beta = Var::leaf(Tensor::zeros({cout}), true);
    std::string prefix = "block" + std::to_string(bi + 1);
    m.params_.emplace_back(prefix + ".conv.weight", blk.conv_w);
    m.params_.emplace_back(prefix + ".conv.bias", blk.conv_b);
    m.params_.emplace_back(prefix + ".norm.gamma", blk.gamma);
    m.params_.emplace_back(prefix + ".norm.beta", blk.beta);
    m.blocks_.push_back(blk);
    cin = cout;
  }

  std::int64_t d = spec.embedding_width;
  m.fc_w_ = Var::leaf(normal_init(rng, {spec.class_count, d}, 1.0 / std::sqrt(double(d))), true);
  m.fc_b_ = Var::leaf(Tensor::zeros({spec.class_count}), true);
  m.params_.emplace_back("fc.weight", m.fc_w_);
  m.params_.emplace_back("fc.bias", m.fc_b_);

  std::int64_t p = spec.projection_dim;
  std::int64_t hidden = 2 * p;
  m.proj_w1_ = Var::leaf(normal_init(rng, {hidden, d}, 1.0 / std::sqrt(double(d))), true);
  m.proj_b1_ = Var::leaf(Tensor::zeros({hidden}), true);
  m.proj_w2_ = Var::leaf(normal_init(rng, {p, hidden}, 1.0 / std::sqrt(double(hidden))), true);
  m.proj_b2_ = Var::leaf(Tensor::zeros({p}), true);
  m.params_.emplace_back("proj.fc1.weight", m.proj_w1_);
  m.params_.emplace_back("proj.fc1.bias", m.proj_b1_);
  m.params_.emplace_back("proj.fc2.weight", m.proj_w2_);
  m.params_.emplace_back("proj.fc2.bias", m.proj_b2_);

  m.quantize_parameters();

  if (!spec.pretrained_source.empty())
    load_pretrained_into(m, spec.pretrained_source);
  return m;
}

ModelTaps Model::forward_with_taps(const Var& images) const {
  if (images.value().ndim() != 4)
    throw InvalidArgument("images must be (B,C,H,W)");
  if (images.value().dim(1) != spec_.input_channels ||
      images.value().dim(2) != spec_.input_h || images.value().dim(3) != spec_.input_w)
    throw InvalidArgument("image batch " + shape_str(images.shape()) +
                          " does not match backbone input (" +
                          std::to_string(spec_.input_channels) + "," +
                          std::to_string(spec_.input_h) + "," +
                          std::to_string(spec_.input_w) + ")");

  Var x = images;
  for (const auto& blk : blocks_) {
    x = conv2d(x, blk.conv_w, blk.conv_b, {.stride = 2, .padding = 1, .groups = 1});
    x = instance_norm(x, blk.gamma, blk.beta);
    x = relu(x);
  }
  ModelTaps taps;
  taps.features = x;
  taps.embedding = global_avg_pool(x);
  taps.logits = linear(taps.embedding, fc_w_, fc_b_);
  return taps;
}

Var Model::project(const Var& embeddings) const {
  if (embeddings.value().ndim() != 2 ||
      embeddings.value().dim(1) != spec_.embedding_width)
    throw InvalidArgument("projection head expects (B," +
                          std::to_string(spec_.embedding_width) + ") embeddings");
  Var h = relu(linear(embeddings, proj_w1_, proj_b1_));
  return linear(h, proj_w2_, proj_b2_);
}

std::vector<Var> Model::parameters() const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& [_, v] : params_) out.push_back(v);
  return out;
}

Var Model::parameter(const std::string& name) const {
  for (const auto& [n, v] : params_)
    if (n == name) return v;
  throw NotFoundError("no parameter named '" + name + "'");
}

void Model::quantize_parameters() {
  for (auto& [_, v] : params_) {
    Tensor& t = v.mutable_value();
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t[i] = static_cast<double>(static_cast<float>(t[i]));
  }
}

void Model::set_trainable(bool trainable) {
  trainable_ = trainable;
  for (auto& [_, v] : params_) v.set_requires_grad(trainable);
}

}  // namespace kd
