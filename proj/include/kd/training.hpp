#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "kd/checkpoint.hpp"
#include "kd/data.hpp"
#include "kd/losses.hpp"
#include "kd/models.hpp"

namespace kd {

// The distillation variants the trainer knows how to assemble. Every method
// keeps ground-truth supervision; the relational/contrastive terms are added
// on top with their configured weights.
enum class Method {
  kWceOnly,
  kBlkd,
  kDrkd,
  kCrkd,
  kSskd,
  kBlkdDrkd,
  kBlkdCrkd,
  kSskdDrkd,
  kSskdCrkd,
  kDkd,
  kSsdKd,
};

// Canonical names ("WCE-only", "BLKD", ..., "SSD-KD").
std::string method_name(Method method);
// NotFoundError on an unknown name; the message lists all registered methods.
Method parse_method(const std::string& name);
// All methods, registry order (the comparison grid).
const std::vector<Method>& all_methods();
// True for methods whose teacher is pretrained with the contrastive
// objective and whose student matches self-supervised similarity structure.
bool is_self_supervised(Method method);

struct OptimizerConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.001;
};

// One training run's knobs: method, objective weights, SGD hyperparameters,
// and the plateau schedule (reduce LR after lr_patience non-improving
// epochs, stop after early_stop_patience).
struct DistillConfig {
  Method method = Method::kSsdKd;
  LossWeights loss_weights;
  OptimizerConfig optimizer;
  std::int64_t max_epochs = 150;
  std::int64_t lr_patience = 10;
  double lr_factor = 0.1;
  std::int64_t early_stop_patience = 15;
  std::int64_t batch_size = 128;
  std::uint64_t seed = 0;
  std::int64_t ss_views = 4;  // contrastive/self-supervision view count
  AugmentPolicy augmentation;  // applied to training batches (and views)

  // ConfigError on out-of-range values and on method/weight mismatches
  // (a selected method whose loss term carries weight zero cannot train).
  void validate() const;
};

struct EpochRecord {
  std::int64_t epoch = 0;
  // Unweighted component means over the epoch's batches, ending with the
  // weighted "total".
  std::vector<std::pair<std::string, double>> train_components;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double val_balanced_accuracy = 0.0;
  double lr = 0.0;
};

struct TrainState {
  std::int64_t epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::int64_t epochs_since_improve = 0;
  double lr_current = 0.0;
  std::vector<EpochRecord> history;
};

enum class ScheduleAction { kContinue, kReduceLr, kStop };

// Plateau bookkeeping for one epoch's validation loss. Improvement means
// val_loss < best - 1e-6; improvement resets the counter, otherwise it
// increments. Stop once the counter reaches early_stop_patience (takes
// precedence); reduce the LR (in place, by lr_factor) whenever the counter
// hits a positive multiple of lr_patience. Pure in (state, val_loss, config);
// does not touch state.epoch or state.history. Non-finite val_loss throws.
ScheduleAction schedule_step(TrainState& state, double val_loss, const DistillConfig& config);

// Improvement tolerance used by schedule_step.
inline constexpr double kImprovementTolerance = 1e-6;

// A split decoded into memory: images resized to a common (3, H, W), labels
// indexed into class_names.
struct TensorDataset {
  std::vector<Tensor> images;
  std::vector<std::int64_t> labels;
  std::vector<std::string> class_names;

  std::int64_t size() const { return static_cast<std::int64_t>(images.size()); }
  std::int64_t classes() const { return static_cast<std::int64_t>(class_names.size()); }
};

TensorDataset materialize(const LabeledImageSet& split, std::int64_t height, std::int64_t width);

// Inverse-frequency weights from a label vector (w_c = N / (C * n_c));
// InvalidArgument when a class has no samples.
ClassWeights class_weights_from_labels(const std::vector<std::int64_t>& labels,
                                       std::int64_t class_count);

// Contrastive agreement over V augmented views: each projection row attracts
// its sibling views against everything else in the batch (softmax over
// masked cosine similarities at `temperature`). Rows are instance-major:
// row i*views + v is view v of instance i. Mean over all anchor-positive
// pairs.
Var nt_xent_loss(const Var& projections, std::int64_t views, double temperature);

// Everything a finished run hands back: the best-validation-loss snapshot,
// the end-of-run snapshot (including adapter entries when one was trained,
// prefixed "adapter."), and the counters plus per-epoch history.
struct RunResult {
  Checkpoint best;
  Checkpoint last;
  TrainState state;
};

// Supervised (plus contrastive, for self-supervised methods) teacher
// training. Writes run artifacts (config.snapshot, history.jsonl, best.ckpt,
// last.ckpt) under run_dir unless it is empty; resume=true continues from
// run_dir/last.ckpt. max_epochs == 0 returns the initialization snapshot.
// Divergence (a non-finite loss component) aborts with a diagnostic naming
// the component.
RunResult pretrain_teacher(const DistillConfig& config, const BackboneSpec& teacher_spec,
                           const TensorDataset& train, const TensorDataset& val,
                           const std::string& run_dir = "", bool resume = false);

// Student distillation against a frozen teacher. The teacher is restored
// from the checkpoint, set to constant-evaluation mode for the entire run,
// and never updated; gradients flow into the student, its projection head,
// and the channel adapter only. WCE-only never evaluates the teacher.
RunResult distill_student(const DistillConfig& config, const Checkpoint& teacher_ckpt,
                          const BackboneSpec& student_spec, const TensorDataset& train,
                          const TensorDataset& val, const std::string& run_dir = "",
                          bool resume = false);

// Same run against an already-restored teacher; the model is frozen in
// place and stays frozen after the call.
RunResult distill_student(const DistillConfig& config, Model& teacher,
                          const BackboneSpec& student_spec, const TensorDataset& train,
                          const TensorDataset& val, const std::string& run_dir = "",
                          bool resume = false);

}  // namespace kd
