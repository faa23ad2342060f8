#include "kd/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <utility>

#include <json.hpp>

#include "kd/errors.hpp"
#include "kd/image_io.hpp"
#include "kd/metrics.hpp"
#include "kd/ops.hpp"
#include "kd/relations.hpp"
#include "kd/rng.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace kd {
namespace {

// Stream tags for functionally derived RNG: every random decision comes from
// Rng::derive(seed, {tag, ...}), so resuming a run never needs serialized
// engine state.
constexpr std::uint64_t kBatchStream = 0x62617463;    // batch shuffling, per epoch
constexpr std::uint64_t kAugmentStream = 0x6175676d;  // training-input augmentation
constexpr std::uint64_t kViewStream = 0x76696577;     // extra views, training batches
constexpr std::uint64_t kValViewStream = 0x7676616c;  // extra views, validation (epoch-free)
constexpr std::uint64_t kAdapterStream = 0x61646170;  // channel-adapter initialization

struct MethodInfo {
  Method method;
  const char* name;
  bool blkd;  // soft-target supervision; false -> plain weighted CE
  bool drkd;
  bool crkd;
  bool sskd;
};

// Registry order is the comparison-grid order.
constexpr MethodInfo kMethodTable[] = {
    {Method::kWceOnly, "WCE-only", false, false, false, false},
    {Method::kBlkd, "BLKD", true, false, false, false},
    {Method::kDrkd, "DRKD", false, true, false, false},
    {Method::kCrkd, "CRKD", false, false, true, false},
    {Method::kSskd, "SSKD", true, false, false, true},
    {Method::kBlkdDrkd, "BLKD+DRKD", true, true, false, false},
    {Method::kBlkdCrkd, "BLKD+CRKD", true, false, true, false},
    {Method::kSskdDrkd, "SSKD+DRKD", true, true, false, true},
    {Method::kSskdCrkd, "SSKD+CRKD", true, false, true, true},
    {Method::kDkd, "D-KD", true, true, true, false},
    {Method::kSsdKd, "SSD-KD", true, true, true, true},
};

const MethodInfo& info(Method method) {
  for (const auto& mi : kMethodTable)
    if (mi.method == method) return mi;
  throw InvalidArgument("unregistered method enum value");
}

// The composite objectives weight the soft-target term; the single-module
// methods use it at weight 1.
double blkd_weight(Method method, const LossWeights& lw) {
  return (method == Method::kDkd || method == Method::kSsdKd) ? lw.lambda_blkd : 1.0;
}

double float32(double v) { return static_cast<double>(static_cast<float>(v)); }

void quantize_tensor(Tensor& t) {
  for (double& v : t.vec()) v = float32(v);
}

// ---- batch assembly --------------------------------------------------------

// Training inputs for one batch: the stacked (B,3,H,W) tensor plus each
// item's image (post-augmentation) for view generation.
struct BatchImages {
  Tensor batch;
  std::vector<Tensor> per_item;
};

void copy_row(Tensor& batch, std::int64_t row, const Tensor& image) {
  std::memcpy(batch.data() + row * image.numel(), image.data(),
              static_cast<std::size_t>(image.numel()) * sizeof(double));
}

BatchImages gather_batch(const TensorDataset& ds, const std::vector<std::int64_t>& items,
                         const DistillConfig& cfg, std::int64_t epoch, bool val_mode) {
  const Tensor& first = ds.images[static_cast<std::size_t>(items.front())];
  std::int64_t b = static_cast<std::int64_t>(items.size());
  BatchImages out;
  out.batch = Tensor({b, first.dim(0), first.dim(1), first.dim(2)});
  out.per_item.reserve(items.size());
  for (std::int64_t pos = 0; pos < b; ++pos) {
    std::int64_t id = items[static_cast<std::size_t>(pos)];
    Tensor img = ds.images[static_cast<std::size_t>(id)];
    if (!val_mode)
      img = augment(img, cfg.augmentation,
                    Rng::derive(cfg.seed, {kAugmentStream, static_cast<std::uint64_t>(epoch),
                                           static_cast<std::uint64_t>(id)}));
    copy_row(out.batch, pos, img);
    out.per_item.push_back(std::move(img));
  }
  return out;
}

// Instance-major view stack (row i*V + v): view 0 is the training input
// itself, views 1..V-1 are further augmentations of it. Validation views use
// an epoch-independent stream so the validation objective is comparable
// across epochs.
Tensor build_views(const BatchImages& bi, const std::vector<std::int64_t>& items,
                   const DistillConfig& cfg, std::int64_t epoch, bool val_mode) {
  std::int64_t b = static_cast<std::int64_t>(items.size());
  std::int64_t v = cfg.ss_views;
  const Tensor& first = bi.per_item.front();
  Tensor out({b * v, first.dim(0), first.dim(1), first.dim(2)});
  for (std::int64_t pos = 0; pos < b; ++pos) {
    std::int64_t id = items[static_cast<std::size_t>(pos)];
    copy_row(out, pos * v, bi.per_item[static_cast<std::size_t>(pos)]);
    for (std::int64_t k = 1; k < v; ++k) {
      std::uint64_t seed =
          val_mode ? Rng::derive(cfg.seed, {kValViewStream, static_cast<std::uint64_t>(id),
                                            static_cast<std::uint64_t>(k)})
                   : Rng::derive(cfg.seed, {kViewStream, static_cast<std::uint64_t>(epoch),
                                            static_cast<std::uint64_t>(id),
                                            static_cast<std::uint64_t>(k)});
      copy_row(out, pos * v + k,
               augment(bi.per_item[static_cast<std::size_t>(pos)], cfg.augmentation, seed));
    }
  }
  return out;
}

std::vector<int> gather_labels(const TensorDataset& ds, const std::vector<std::int64_t>& items) {
  std::vector<int> labels;
  labels.reserve(items.size());
  for (std::int64_t id : items)
    labels.push_back(static_cast<int>(ds.labels[static_cast<std::size_t>(id)]));
  return labels;
}

// A trailing batch of one instance cannot carry relational terms; fold it
// into its predecessor instead of dropping it.
void merge_trailing_singleton(std::vector<std::vector<std::int64_t>>& batches) {
  if (batches.size() >= 2 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
}

std::vector<std::vector<std::int64_t>> sequential_chunks(std::int64_t n, std::int64_t batch) {
  std::vector<std::vector<std::int64_t>> chunks;
  for (std::int64_t start = 0; start < n; start += batch) {
    std::vector<std::int64_t> chunk;
    for (std::int64_t i = start; i < std::min(n, start + batch); ++i) chunk.push_back(i);
    chunks.push_back(std::move(chunk));
  }
  merge_trailing_singleton(chunks);
  return chunks;
}

// ---- loss assembly ---------------------------------------------------------

struct BatchLoss {
  Var total;
  std::vector<std::pair<std::string, Var>> components;  // unweighted
};

// Shared per-run context for the generic epoch loop.
struct LoopContext {
  const DistillConfig* config = nullptr;
  const TensorDataset* train = nullptr;
  const TensorDataset* val = nullptr;
  std::string run_dir;
  bool resume = false;
  Model* model = nullptr;
  ChannelAdapter* adapter = nullptr;
  std::string role;
  const BackboneSpec* teacher_spec = nullptr;
  std::function<BatchLoss(const std::vector<std::int64_t>&, std::int64_t, bool)> batch_loss;
};

// ---- persistence -----------------------------------------------------------

ordered_json spec_json(const BackboneSpec& spec) {
  return ordered_json{{"name", spec.name},
                      {"input_h", spec.input_h},
                      {"input_w", spec.input_w},
                      {"class_count", spec.class_count},
                      {"embedding_width", spec.embedding_width},
                      {"last_conv_channels", spec.last_conv_channels},
                      {"projection_dim", spec.projection_dim},
                      {"pretrained_source", spec.pretrained_source}};
}

ordered_json config_json(const LoopContext& ctx) {
  const DistillConfig& cfg = *ctx.config;
  const LossWeights& lw = cfg.loss_weights;
  ordered_json j;
  j["role"] = ctx.role;
  j["method"] = method_name(cfg.method);
  j["seed"] = cfg.seed;
  j["max_epochs"] = cfg.max_epochs;
  j["batch_size"] = cfg.batch_size;
  j["ss_views"] = cfg.ss_views;
  j["optimizer"] = ordered_json{{"learning_rate", cfg.optimizer.learning_rate},
                                {"momentum", cfg.optimizer.momentum},
                                {"weight_decay", cfg.optimizer.weight_decay}};
  j["schedule"] = ordered_json{{"lr_patience", cfg.lr_patience},
                               {"lr_factor", cfg.lr_factor},
                               {"early_stop_patience", cfg.early_stop_patience}};
  j["loss_weights"] = ordered_json{{"temperature", lw.temperature},
                                   {"lambda_kd", lw.lambda_kd},
                                   {"lambda_d", lw.lambda_d},
                                   {"lambda_a", lw.lambda_a},
                                   {"huber_delta", lw.huber_delta},
                                   {"lambda_blkd", lw.lambda_blkd},
                                   {"lambda_drkd", lw.lambda_drkd},
                                   {"lambda_crkd", lw.lambda_crkd},
                                   {"lambda_sskd", lw.lambda_sskd},
                                   {"ss_temperature", lw.ss_temperature}};
  j["augmentation"] = ordered_json{{"flips", cfg.augmentation.flips},
                                   {"brightness", cfg.augmentation.brightness},
                                   {"contrast", cfg.augmentation.contrast},
                                   {"saturation", cfg.augmentation.saturation},
                                   {"scaling", cfg.augmentation.scaling},
                                   {"noise", cfg.augmentation.noise},
                                   {"noise_sigma", cfg.augmentation.noise_sigma}};
  j["model"] = spec_json(ctx.model->spec());
  if (ctx.teacher_spec) j["teacher"] = spec_json(*ctx.teacher_spec);
  return j;
}

ordered_json record_json(const EpochRecord& rec) {
  ordered_json train = ordered_json::object();
  for (const auto& [name, value] : rec.train_components) train[name] = value;
  return ordered_json{{"epoch", rec.epoch},
                      {"train", train},
                      {"val_loss", rec.val_loss},
                      {"val_accuracy", rec.val_accuracy},
                      {"val_balanced_accuracy", rec.val_balanced_accuracy},
                      {"lr", rec.lr}};
}

EpochRecord record_from_json(const ordered_json& j) {
  EpochRecord rec;
  rec.epoch = j.at("epoch").get<std::int64_t>();
  for (const auto& [name, value] : j.at("train").items())
    rec.train_components.emplace_back(name, value.get<double>());
  rec.val_loss = j.at("val_loss").get<double>();
  rec.val_accuracy = j.at("val_accuracy").get<double>();
  rec.val_balanced_accuracy = j.at("val_balanced_accuracy").get<double>();
  rec.lr = j.at("lr").get<double>();
  return rec;
}

std::vector<EpochRecord> read_history(const std::string& path, std::int64_t max_epoch) {
  std::vector<EpochRecord> records;
  std::ifstream in(path);
  if (!in) return records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochRecord rec = record_from_json(ordered_json::parse(line));
    if (rec.epoch <= max_epoch) records.push_back(std::move(rec));
  }
  return records;
}

void write_history(const std::string& path, const std::vector<EpochRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  for (const auto& rec : records) out << record_json(rec).dump() << "\n";
}

void append_history(const std::string& path, const EpochRecord& rec) {
  std::ofstream out(path, std::ios::app);
  out << record_json(rec).dump() << "\n";
}

// ---- optimizer -------------------------------------------------------------

// SGD with momentum and decoupled-from-nothing classic weight decay:
//   v <- momentum * v + g + weight_decay * p;  p <- p - lr * v.
// Parameters and momentum are re-quantized to float32 after every update so
// checkpoints round-trip the training state exactly.
void sgd_step(std::vector<std::pair<std::string, Var>>& params, std::vector<Tensor>& momentum,
              const OptimizerConfig& opt, double lr) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    Var& p = params[k].second;
    Tensor g = p.grad();
    auto& v = momentum[k].vec();
    auto& pv = p.mutable_value().vec();
    const auto& gv = g.vec();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      v[i] = float32(opt.momentum * v[i] + gv[i] + opt.weight_decay * pv[i]);
      pv[i] = float32(pv[i] - lr * v[i]);
    }
  }
}

// ---- snapshots -------------------------------------------------------------

Checkpoint full_snapshot(const LoopContext& ctx,
                         const std::vector<std::pair<std::string, Var>>& opt_params,
                         const std::vector<Tensor>& momentum) {
  Checkpoint ck = snapshot_model(*ctx.model);
  if (ctx.adapter) {
    ck.params.emplace_back("adapter.weight", ctx.adapter->weight().value());
    ck.params.emplace_back("adapter.bias", ctx.adapter->bias().value());
  }
  for (std::size_t k = 0; k < opt_params.size(); ++k)
    ck.momentum.emplace_back(opt_params[k].first, momentum[k]);
  return ck;
}

void restore_from_last(const LoopContext& ctx, const Checkpoint& last,
                       std::vector<std::pair<std::string, Var>>& opt_params,
                       std::vector<Tensor>& momentum) {
  Checkpoint model_part;
  model_part.spec = ctx.model->spec();
  std::vector<std::pair<std::string, Tensor>> adapter_part;
  for (const auto& [name, tensor] : last.params) {
    if (name.rfind("adapter.", 0) == 0)
      adapter_part.emplace_back(name, tensor);
    else
      model_part.params.emplace_back(name, tensor);
  }
  apply_parameters(*ctx.model, model_part);
  if (ctx.adapter == nullptr) {
    if (!adapter_part.empty())
      throw InvalidArgument("checkpoint carries adapter parameters but this run trains none");
  } else {
    if (adapter_part.size() != 2)
      throw InvalidArgument("checkpoint is missing the channel-adapter parameters");
    for (auto& [name, tensor] : adapter_part) {
      Var target = name == "adapter.weight" ? ctx.adapter->weight() : ctx.adapter->bias();
      if (tensor.shape() != target.value().shape())
        throw InvalidArgument("checkpoint adapter parameter " + name + " has the wrong shape");
      target.mutable_value() = tensor;
    }
  }
  if (last.momentum.size() != opt_params.size())
    throw InvalidArgument("checkpoint momentum entries do not match the optimizer parameters");
  for (std::size_t k = 0; k < opt_params.size(); ++k) {
    const auto& [name, tensor] = last.momentum[k];
    if (name != opt_params[k].first || tensor.shape() != opt_params[k].second.value().shape())
      throw InvalidArgument("checkpoint momentum entry " + name +
                            " does not match optimizer parameter " + opt_params[k].first);
    momentum[k] = tensor;
  }
}

// ---- the epoch loop --------------------------------------------------------

RunResult run_loop(LoopContext& ctx) {
  const DistillConfig& cfg = *ctx.config;
  cfg.validate();
  if (ctx.train->size() == 0) throw InvalidArgument("training split is empty");
  if (ctx.val->size() == 0) throw InvalidArgument("validation split is empty");
  if (ctx.train->classes() != ctx.model->spec().class_count)
    throw InvalidArgument("model expects " + std::to_string(ctx.model->spec().class_count) +
                          " classes, dataset has " + std::to_string(ctx.train->classes()));

  std::vector<std::pair<std::string, Var>> opt_params = ctx.model->named_parameters();
  if (ctx.adapter) {
    opt_params.emplace_back("adapter.weight", ctx.adapter->weight());
    opt_params.emplace_back("adapter.bias", ctx.adapter->bias());
  }
  std::vector<Tensor> momentum;
  momentum.reserve(opt_params.size());
  for (auto& [name, p] : opt_params) momentum.emplace_back(p.value().shape());

  TrainState state;
  state.lr_current = cfg.optimizer.learning_rate;
  std::int64_t start_epoch = 0;

  const std::string best_path = ctx.run_dir.empty() ? "" : ctx.run_dir + "/best.ckpt";
  const std::string last_path = ctx.run_dir.empty() ? "" : ctx.run_dir + "/last.ckpt";
  const std::string history_path = ctx.run_dir.empty() ? "" : ctx.run_dir + "/history.jsonl";
  if (!ctx.run_dir.empty()) fs::create_directories(ctx.run_dir);

  if (ctx.resume) {
    if (ctx.run_dir.empty())
      throw InvalidArgument("resuming requires a run directory with a last.ckpt");
    Checkpoint last = load_checkpoint(last_path);
    restore_from_last(ctx, last, opt_params, momentum);
    state.best_val_loss = last.best_val_loss;
    state.epochs_since_improve = last.epochs_since_improve;
    state.lr_current = last.learning_rate;
    start_epoch = last.epoch + 1;
    state.history = read_history(history_path, last.epoch);
  }

  Checkpoint best;
  bool have_best = false;
  if (ctx.resume && fs::exists(best_path)) {
    best = load_checkpoint(best_path);
    have_best = true;
  } else {
    best = snapshot_model(*ctx.model);
    best.epoch = -1;
    best.best_val_loss = std::numeric_limits<double>::infinity();
    best.learning_rate = state.lr_current;
  }
  Checkpoint last_ck = full_snapshot(ctx, opt_params, momentum);
  last_ck.epoch = start_epoch - 1;
  last_ck.best_val_loss = state.best_val_loss;
  last_ck.epochs_since_improve = state.epochs_since_improve;
  last_ck.learning_rate = state.lr_current;

  if (!ctx.run_dir.empty()) {
    // The launcher may have written a fuller resolved config already.
    std::string snapshot_path = ctx.run_dir + "/config.snapshot";
    if (!fs::exists(snapshot_path)) {
      std::ofstream out(snapshot_path);
      out << config_json(ctx).dump(2) << "\n";
    }
    write_history(history_path, state.history);
  }

  const std::int64_t n_train = ctx.train->size();
  const std::int64_t train_batch = std::min<std::int64_t>(cfg.batch_size, n_train);
  const std::int64_t val_batch = std::min<std::int64_t>(cfg.batch_size, ctx.val->size());
  auto val_chunks = sequential_chunks(ctx.val->size(), val_batch);

  bool stopped = false;
  bool any_epoch_ran = false;
  for (std::int64_t epoch = start_epoch; epoch < cfg.max_epochs && !stopped; ++epoch) {
    any_epoch_ran = true;
    state.epoch = epoch;
    auto batches = make_batches(
        n_train, train_batch,
        Rng::derive(cfg.seed, {kBatchStream, static_cast<std::uint64_t>(epoch)}), false);
    merge_trailing_singleton(batches);

    std::vector<std::pair<std::string, double>> sums;
    for (const auto& batch : batches) {
      BatchLoss bl = ctx.batch_loss(batch, epoch, false);
      bl.components.emplace_back("total", bl.total);
      if (sums.empty())
        for (const auto& [name, var] : bl.components) sums.emplace_back(name, 0.0);
      for (std::size_t k = 0; k < bl.components.size(); ++k) {
        double value = bl.components[k].second.value().item();
        if (!std::isfinite(value))
          throw DivergenceError("training diverged: loss component '" + bl.components[k].first +
                                    "' became non-finite at epoch " + std::to_string(epoch),
                                bl.components[k].first);
        sums[k].second += value;
      }
      for (auto& [name, p] : opt_params) p.clear_grad();
      backward(bl.total);
      sgd_step(opt_params, momentum, cfg.optimizer, state.lr_current);
    }

    double val_loss = 0.0;
    for (const auto& chunk : val_chunks) {
      BatchLoss bl = ctx.batch_loss(chunk, epoch, true);
      val_loss += bl.total.value().item() * static_cast<double>(chunk.size());
    }
    val_loss /= static_cast<double>(ctx.val->size());
    if (!std::isfinite(val_loss))
      throw DivergenceError("training diverged: loss component 'val_loss' became non-finite " +
                                std::string("at epoch ") + std::to_string(epoch),
                            "val_loss");
    MetricsReport report = evaluate_model(*ctx.model, ctx.val->images, ctx.val->labels,
                                          static_cast<std::int64_t>(val_batch));

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = state.lr_current;
    for (auto& [name, total] : sums)
      rec.train_components.emplace_back(name, total / static_cast<double>(batches.size()));
    rec.val_loss = val_loss;
    rec.val_accuracy = report.acc;
    rec.val_balanced_accuracy = report.bacc;
    state.history.push_back(rec);
    if (!history_path.empty()) append_history(history_path, rec);

    double previous_best = state.best_val_loss;
    ScheduleAction action = schedule_step(state, val_loss, cfg);
    if (state.best_val_loss < previous_best || !have_best) {
      best = snapshot_model(*ctx.model);
      best.epoch = epoch;
      best.best_val_loss = state.best_val_loss;
      best.learning_rate = state.lr_current;
      have_best = true;
      if (!best_path.empty()) save_checkpoint(best, best_path);
    }
    last_ck = full_snapshot(ctx, opt_params, momentum);
    last_ck.epoch = epoch;
    last_ck.best_val_loss = state.best_val_loss;
    last_ck.epochs_since_improve = state.epochs_since_improve;
    last_ck.learning_rate = state.lr_current;
    if (!last_path.empty()) save_checkpoint(last_ck, last_path);
    if (action == ScheduleAction::kStop) stopped = true;
  }

  if (!ctx.run_dir.empty() && !any_epoch_ran) {
    // Zero new epochs (e.g. max_epochs 0): still leave complete artifacts.
    save_checkpoint(best, best_path);
    save_checkpoint(last_ck, last_path);
  }

  RunResult result;
  result.best = std::move(best);
  result.last = std::move(last_ck);
  result.state = std::move(state);
  return result;
}

}  // namespace

// ---- method registry -------------------------------------------------------

std::string method_name(Method method) { return info(method).name; }

Method parse_method(const std::string& name) {
  std::string known;
  for (const auto& mi : kMethodTable) {
    if (name == mi.name) return mi.method;
    known += known.empty() ? mi.name : std::string(", ") + mi.name;
  }
  throw NotFoundError("unknown method '" + name + "'; registered methods: " + known);
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = [] {
    std::vector<Method> out;
    for (const auto& mi : kMethodTable) out.push_back(mi.method);
    return out;
  }();
  return methods;
}

bool is_self_supervised(Method method) { return info(method).sskd; }

// ---- config ----------------------------------------------------------------

void DistillConfig::validate() const {
  try {
    loss_weights.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (!(optimizer.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (optimizer.momentum < 0.0 || optimizer.momentum >= 1.0)
    throw ConfigError("momentum must lie in [0, 1)");
  if (optimizer.weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (max_epochs < 0) throw ConfigError("max_epochs must be non-negative");
  if (lr_patience < 1) throw ConfigError("lr_patience must be at least 1");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be at least 1");
  if (!(lr_factor > 0.0) || lr_factor > 1.0) throw ConfigError("lr_factor must lie in (0, 1]");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (ss_views < 2) throw ConfigError("ss_views must be at least 2");

  const MethodInfo& mi = info(method);
  const std::string prefix = "method " + std::string(mi.name);
  if (mi.blkd && !(loss_weights.lambda_kd > 0.0))
    throw ConfigError(prefix + " distills soft targets but lambda_kd is 0");
  if (mi.blkd && !(blkd_weight(method, loss_weights) > 0.0))
    throw ConfigError(prefix + " includes the soft-target term but lambda_blkd is 0");
  if (mi.drkd && !(loss_weights.lambda_drkd > 0.0))
    throw ConfigError(prefix + " includes the relational term but lambda_drkd is 0");
  if (mi.drkd && !(loss_weights.lambda_d > 0.0) && !(loss_weights.lambda_a > 0.0))
    throw ConfigError(prefix + " includes the relational term but lambda_d and lambda_a are 0");
  if (mi.crkd && !(loss_weights.lambda_crkd > 0.0))
    throw ConfigError(prefix + " includes the channel-relation term but lambda_crkd is 0");
  if (mi.sskd && !(loss_weights.lambda_sskd > 0.0))
    throw ConfigError(prefix + " includes the self-supervision term but lambda_sskd is 0");
}

// ---- schedule --------------------------------------------------------------

ScheduleAction schedule_step(TrainState& state, double val_loss, const DistillConfig& config) {
  if (!std::isfinite(val_loss))
    throw DivergenceError("validation loss became non-finite", "val_loss");
  if (val_loss < state.best_val_loss - kImprovementTolerance) {
    state.best_val_loss = val_loss;
    state.epochs_since_improve = 0;
    return ScheduleAction::kContinue;
  }
  state.epochs_since_improve += 1;
  if (state.epochs_since_improve >= config.early_stop_patience) return ScheduleAction::kStop;
  if (state.epochs_since_improve % config.lr_patience == 0) {
    state.lr_current *= config.lr_factor;
    return ScheduleAction::kReduceLr;
  }
  return ScheduleAction::kContinue;
}

// ---- datasets --------------------------------------------------------------

TensorDataset materialize(const LabeledImageSet& split, std::int64_t height, std::int64_t width) {
  TensorDataset out;
  out.class_names = split.class_names;
  out.images.reserve(split.items.size());
  out.labels.reserve(split.items.size());
  for (const auto& item : split.items) {
    out.images.push_back(load_image(item.image_path, height, width));
    out.labels.push_back(item.label);
  }
  return out;
}

ClassWeights class_weights_from_labels(const std::vector<std::int64_t>& labels,
                                       std::int64_t class_count) {
  if (class_count < 2) throw InvalidArgument("class weights need at least 2 classes");
  std::vector<std::int64_t> counts(static_cast<std::size_t>(class_count), 0);
  for (std::int64_t label : labels) {
    if (label < 0 || label >= class_count)
      throw InvalidArgument("label " + std::to_string(label) + " outside [0, " +
                            std::to_string(class_count) + ")");
    counts[static_cast<std::size_t>(label)] += 1;
  }
  ClassWeights weights;
  double n = static_cast<double>(labels.size());
  for (std::int64_t c = 0; c < class_count; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0)
      throw InvalidArgument("class " + std::to_string(c) +
                            " has no samples; cannot derive inverse-frequency weights");
    weights.weights.push_back(n / (static_cast<double>(class_count) *
                                   static_cast<double>(counts[static_cast<std::size_t>(c)])));
  }
  weights.validate();
  return weights;
}

// ---- contrastive objective -------------------------------------------------

Var nt_xent_loss(const Var& projections, std::int64_t views, double temperature) {
  if (projections.value().ndim() != 2) throw InvalidArgument("projections must be (B*V, P)");
  if (views < 2) throw InvalidArgument("contrastive loss needs at least 2 views");
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be positive");
  std::int64_t n = projections.value().dim(0);
  if (n % views != 0)
    throw InvalidArgument("projection rows are not a multiple of the view count");

  Var z = rows_l2_normalize(projections);
  Var sim = matmul(z, transpose(z));
  // A view never contrasts against itself.
  Var log_p = log_softmax_rows(mul_scalar(fill_diagonal(sim, -1e30), 1.0 / temperature));

  Tensor mask({n, n});
  std::int64_t b = n / views;
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t v = 0; v < views; ++v)
      for (std::int64_t u = 0; u < views; ++u)
        if (v != u) mask(i * views + v, i * views + u) = 1.0;

  double pairs = static_cast<double>(n) * static_cast<double>(views - 1);
  return mul_scalar(sum(mul(log_p, Var::leaf(mask, false))), -1.0 / pairs);
}

// ---- entry points ----------------------------------------------------------

RunResult pretrain_teacher(const DistillConfig& config, const BackboneSpec& teacher_spec,
                           const TensorDataset& train, const TensorDataset& val,
                           const std::string& run_dir, bool resume) {
  config.validate();
  Model model = build_backbone(teacher_spec, config.seed);
  ClassWeights class_weights = class_weights_from_labels(train.labels, train.classes());
  bool contrastive = is_self_supervised(config.method);

  LoopContext ctx;
  ctx.config = &config;
  ctx.train = &train;
  ctx.val = &val;
  ctx.run_dir = run_dir;
  ctx.resume = resume;
  ctx.model = &model;
  ctx.role = "teacher-pretrain";
  ctx.batch_loss = [&](const std::vector<std::int64_t>& items, std::int64_t epoch,
                       bool val_mode) -> BatchLoss {
    const TensorDataset& ds = val_mode ? val : train;
    BatchImages bi = gather_batch(ds, items, config, epoch, val_mode);
    ModelTaps taps = model.forward_with_taps(Var::leaf(bi.batch, false));
    Var wce = weighted_cross_entropy(taps.logits, gather_labels(ds, items), class_weights);
    BatchLoss bl;
    bl.components.emplace_back("wce", wce);
    bl.total = wce;
    if (contrastive) {
      Tensor views = build_views(bi, items, config, epoch, val_mode);
      ModelTaps view_taps = model.forward_with_taps(Var::leaf(views, false));
      Var projections = model.project(view_taps.embedding);
      Var con = nt_xent_loss(projections, config.ss_views, config.loss_weights.ss_temperature);
      bl.components.emplace_back("contrastive", con);
      bl.total = add(bl.total, con);
    }
    return bl;
  };
  return run_loop(ctx);
}

RunResult distill_student(const DistillConfig& config, Model& teacher,
                          const BackboneSpec& student_spec, const TensorDataset& train,
                          const TensorDataset& val, const std::string& run_dir, bool resume) {
  config.validate();
  const MethodInfo& mi = info(config.method);
  teacher.set_trainable(false);

  Model student = build_backbone(student_spec, config.seed);
  ClassWeights class_weights = class_weights_from_labels(train.labels, train.classes());

  // The adapter exists to reconcile channel counts; matching counts need
  // none (which also keeps identical-architecture distillation exact).
  std::unique_ptr<ChannelAdapter> adapter;
  if (mi.crkd &&
      student.spec().last_conv_channels != teacher.spec().last_conv_channels) {
    Rng rng(Rng::derive(config.seed, {kAdapterStream}));
    adapter = std::make_unique<ChannelAdapter>(student.spec().last_conv_channels,
                                               teacher.spec().last_conv_channels, rng);
    for (Var p : adapter->parameters()) quantize_tensor(p.mutable_value());
  }

  BackboneSpec teacher_spec = teacher.spec();
  LoopContext ctx;
  ctx.config = &config;
  ctx.train = &train;
  ctx.val = &val;
  ctx.run_dir = run_dir;
  ctx.resume = resume;
  ctx.model = &student;
  ctx.adapter = adapter.get();
  ctx.role = "distill";
  ctx.teacher_spec = &teacher_spec;
  ctx.batch_loss = [&](const std::vector<std::int64_t>& items, std::int64_t epoch,
                       bool val_mode) -> BatchLoss {
    const TensorDataset& ds = val_mode ? val : train;
    BatchImages bi = gather_batch(ds, items, config, epoch, val_mode);
    Var input = Var::leaf(bi.batch, false);
    ModelTaps s = student.forward_with_taps(input);
    std::vector<int> labels = gather_labels(ds, items);

    BatchLoss bl;
    std::vector<double> term_weights;
    ModelTaps t;
    if (mi.blkd || mi.drkd || mi.crkd) t = teacher.forward_with_taps(input);

    if (mi.blkd) {
      bl.components.emplace_back(
          "blkd", blkd_loss(t.logits, s.logits, labels, class_weights, config.loss_weights));
      term_weights.push_back(blkd_weight(config.method, config.loss_weights));
    } else {
      bl.components.emplace_back("wce",
                                 weighted_cross_entropy(s.logits, labels, class_weights));
      term_weights.push_back(1.0);
    }
    if (mi.drkd) {
      bl.components.emplace_back("drkd",
                                 drkd_loss(t.embedding, s.embedding, config.loss_weights));
      term_weights.push_back(config.loss_weights.lambda_drkd);
    }
    if (mi.crkd) {
      std::int64_t th = t.features.value().dim(2), tw = t.features.value().dim(3);
      Var adapted;
      if (adapter)
        adapted = adapt_channels(s.features, *adapter, th, tw);
      else if (s.features.value().dim(2) != th || s.features.value().dim(3) != tw)
        adapted = bilinear_resize(s.features, th, tw);
      else
        adapted = s.features;
      bl.components.emplace_back("crkd", crkd_loss(t.features, adapted));
      term_weights.push_back(config.loss_weights.lambda_crkd);
    }
    if (mi.sskd) {
      Tensor views = build_views(bi, items, config, epoch, val_mode);
      Var view_input = Var::leaf(views, false);
      ModelTaps tv = teacher.forward_with_taps(view_input);
      ModelTaps sv = student.forward_with_taps(view_input);
      SelfSupervisionBatch teacher_ss{teacher.project(tv.embedding), config.ss_views,
                                      config.loss_weights.ss_temperature};
      SelfSupervisionBatch student_ss{student.project(sv.embedding), config.ss_views,
                                      config.loss_weights.ss_temperature};
      bl.components.emplace_back("sskd", sskd_loss(teacher_ss, student_ss));
      term_weights.push_back(config.loss_weights.lambda_sskd);
    }

    bl.total = mul_scalar(bl.components[0].second, term_weights[0]);
    for (std::size_t k = 1; k < bl.components.size(); ++k)
      bl.total = add(bl.total, mul_scalar(bl.components[k].second, term_weights[k]));
    return bl;
  };
  return run_loop(ctx);
}

RunResult distill_student(const DistillConfig& config, const Checkpoint& teacher_ckpt,
                          const BackboneSpec& student_spec, const TensorDataset& train,
                          const TensorDataset& val, const std::string& run_dir, bool resume) {
  config.validate();
  if (config.method == Method::kWceOnly) {
    // Baseline reduction: no teacher is ever built or evaluated.
    Model student = build_backbone(student_spec, config.seed);
    ClassWeights class_weights = class_weights_from_labels(train.labels, train.classes());
    LoopContext ctx;
    ctx.config = &config;
    ctx.train = &train;
    ctx.val = &val;
    ctx.run_dir = run_dir;
    ctx.resume = resume;
    ctx.model = &student;
    ctx.role = "distill";
    ctx.batch_loss = [&](const std::vector<std::int64_t>& items, std::int64_t epoch,
                         bool val_mode) -> BatchLoss {
      const TensorDataset& ds = val_mode ? val : train;
      BatchImages bi = gather_batch(ds, items, config, epoch, val_mode);
      ModelTaps taps = student.forward_with_taps(Var::leaf(bi.batch, false));
      Var wce = weighted_cross_entropy(taps.logits, gather_labels(ds, items), class_weights);
      BatchLoss bl;
      bl.components.emplace_back("wce", wce);
      bl.total = wce;
      return bl;
    };
    return run_loop(ctx);
  }
  Model teacher = restore_model(teacher_ckpt);
  return distill_student(config, teacher, student_spec, train, val, run_dir, resume);
}

}  // namespace kd
