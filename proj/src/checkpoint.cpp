#include "kd/checkpoint.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace kd {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'S', 'K', 'K', 'D', 'C', 'K', 'P', 'T'};

// Doubles travel as hexfloat strings: bit-exact round-trip, and infinities
// (the initial best validation loss) survive where JSON numbers cannot.
std::string double_to_hex(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

double hex_to_double(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

json spec_to_json(const BackboneSpec& s) {
  return json{{"name", s.name},
              {"input_h", s.input_h},
              {"input_w", s.input_w},
              {"input_channels", s.input_channels},
              {"class_count", s.class_count},
              {"embedding_width", s.embedding_width},
              {"last_conv_channels", s.last_conv_channels},
              {"projection_dim", s.projection_dim},
              {"pretrained_source", s.pretrained_source}};
}

BackboneSpec spec_from_json(const json& j) {
  BackboneSpec s;
  s.name = j.at("name").get<std::string>();
  s.input_h = j.at("input_h").get<std::int64_t>();
  s.input_w = j.at("input_w").get<std::int64_t>();
  s.input_channels = j.at("input_channels").get<std::int64_t>();
  s.class_count = j.at("class_count").get<std::int64_t>();
  s.embedding_width = j.at("embedding_width").get<std::int64_t>();
  s.last_conv_channels = j.at("last_conv_channels").get<std::int64_t>();
  s.projection_dim = j.at("projection_dim").get<std::int64_t>();
  s.pretrained_source = j.at("pretrained_source").get<std::string>();
  return s;
}

json tensor_list_to_json(const std::vector<std::pair<std::string, Tensor>>& list) {
  json arr = json::array();
  for (const auto& [name, t] : list)
    arr.push_back(json{{"name", name}, {"shape", t.shape()}});
  return arr;
}

struct Reader {
  std::ifstream in;
  std::uint64_t offset = 0;

  void read(void* dst, std::size_t n, const char* what) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw CheckpointError(std::string("truncated checkpoint while reading ") + what, offset);
    offset += n;
  }
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  json header{{"epoch", ckpt.epoch},
              {"best_val_loss", double_to_hex(ckpt.best_val_loss)},
              {"epochs_since_improve", ckpt.epochs_since_improve},
              {"learning_rate", double_to_hex(ckpt.learning_rate)},
              {"rng_state", ckpt.rng_state},
              {"spec", spec_to_json(ckpt.spec)},
              {"params", tensor_list_to_json(ckpt.params)},
              {"momentum", tensor_list_to_json(ckpt.momentum)}};
  std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot open '" + path + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  std::uint32_t version = ckpt.version;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  std::uint64_t hlen = header_str.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(header_str.data(), static_cast<std::streamsize>(hlen));

  auto write_blobs = [&](const std::vector<std::pair<std::string, Tensor>>& list) {
    for (const auto& [_, t] : list) {
      std::vector<float> buf(static_cast<std::size_t>(t.numel()));
      for (std::int64_t i = 0; i < t.numel(); ++i)
        buf[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
      out.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
  };
  write_blobs(ckpt.params);
  write_blobs(ckpt.momentum);
  out.flush();
  if (!out) throw InvalidArgument("write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw NotFoundError("checkpoint '" + path + "' does not exist");
  Reader r;
  r.in.open(path, std::ios::binary);
  if (!r.in) throw NotFoundError("cannot open checkpoint '" + path + "'");

  char magic[8];
  r.read(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("bad magic: not a checkpoint file", 0);

  Checkpoint ckpt;
  std::uint64_t version_offset = r.offset;
  r.read(&ckpt.version, sizeof(ckpt.version), "version");
  if (ckpt.version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint format version " +
                              std::to_string(ckpt.version) + " (this build reads version " +
                              std::to_string(kCheckpointVersion) + ")",
                          version_offset);

  std::uint64_t hlen = 0;
  r.read(&hlen, sizeof(hlen), "header length");
  std::uint64_t header_offset = r.offset;
  std::string header_str(hlen, '\0');
  r.read(header_str.data(), hlen, "header");

  json header;
  try {
    header = json::parse(header_str);
    ckpt.epoch = header.at("epoch").get<std::int64_t>();
    ckpt.best_val_loss = hex_to_double(header.at("best_val_loss").get<std::string>());
    ckpt.epochs_since_improve = header.at("epochs_since_improve").get<std::int64_t>();
    ckpt.learning_rate = hex_to_double(header.at("learning_rate").get<std::string>());
    ckpt.rng_state = header.at("rng_state").get<std::string>();
    ckpt.spec = spec_from_json(header.at("spec"));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what(),
                          header_offset);
  }

  auto read_blobs = [&](const json& listing,
                        std::vector<std::pair<std::string, Tensor>>& out) {
    for (const auto& entry : listing) {
      std::string name = entry.at("name").get<std::string>();
      std::vector<std::int64_t> shape = entry.at("shape").get<std::vector<std::int64_t>>();
      Tensor t(shape);
      std::vector<float> buf(static_cast<std::size_t>(t.numel()));
      r.read(buf.data(), buf.size() * sizeof(float), name.c_str());
      for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<double>(buf[static_cast<std::size_t>(i)]);
      out.emplace_back(std::move(name), std::move(t));
    }
  };
  try {
    read_blobs(header.at("params"), ckpt.params);
    read_blobs(header.at("momentum"), ckpt.momentum);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed tensor listing: ") + e.what(),
                          header_offset);
  }

  // Anything after the declared blobs means the listing and the payload
  // disagree — refuse rather than ignore.
  char extra;
  r.in.read(&extra, 1);
  if (r.in.gcount() == 1)
    throw CheckpointError("trailing bytes after declared payload", r.offset);
  return ckpt;
}

Checkpoint snapshot_model(const Model& model) {
  Checkpoint ckpt;
  ckpt.spec = model.spec();
  for (const auto& [name, v] : model.named_parameters())
    ckpt.params.emplace_back(name, v.value());
  return ckpt;
}

void apply_parameters(Model& model, const Checkpoint& ckpt) {
  const auto& named = model.named_parameters();
  if (named.size() != ckpt.params.size())
    throw InvalidArgument("checkpoint has " + std::to_string(ckpt.params.size()) +
                          " parameters, model expects " + std::to_string(named.size()));
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& [mname, var] = named[i];
    const auto& [cname, tensor] = ckpt.params[i];
    if (mname != cname)
      throw InvalidArgument("parameter name mismatch at index " + std::to_string(i) +
                            ": model '" + mname + "' vs checkpoint '" + cname + "'");
    if (var.shape() != tensor.shape())
      throw InvalidArgument("parameter '" + mname + "' shape mismatch: model " +
                            shape_str(var.shape()) + " vs checkpoint " +
                            shape_str(tensor.shape()));
    Var handle = var;
    handle.mutable_value() = tensor;
  }
}

Model restore_model(const Checkpoint& ckpt) {
  BackboneSpec spec = ckpt.spec;
  spec.pretrained_source.clear();  // parameters come from this checkpoint
  Model m = build_backbone(spec, 0);
  apply_parameters(m, ckpt);
  return m;
}

void load_pretrained_into(Model& model, const std::string& source) {
  if (!std::filesystem::exists(source))
    throw UnavailableError("pretrained weights '" + source +
                           "' are unavailable (no such file); refusing to fall "
                           "back to random initialization");
  Checkpoint ckpt = load_checkpoint(source);
  if (ckpt.spec.name != model.spec().name)
    throw InvalidArgument("pretrained checkpoint is for backbone '" + ckpt.spec.name +
                          "', not '" + model.spec().name + "'");
  apply_parameters(model, ckpt);
}

}  // namespace kd
