#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kd/checkpoint.hpp"
#include "kd/config.hpp"
#include "kd/data.hpp"
#include "kd/errors.hpp"
#include "kd/explain.hpp"
#include "kd/image_io.hpp"
#include "kd/metrics.hpp"
#include "kd/models.hpp"
#include "kd/plots.hpp"
#include "kd/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kd;

namespace {

// Flags shared by the training-style commands; they land in the highest
// config layer (file < environment < flags).
struct CommonFlags {
  std::string config, method, teacher, run_dir, seed, seeds;
  bool force = false;
  bool toy = false;
};

void add_common(CLI::App* cmd, CommonFlags& c, bool training) {
  cmd->add_option("--config", c.config, "JSON config file (lowest-priority layer)");
  cmd->add_flag("--toy", c.toy, "tiny backbones + toy loss-weight profile");
  if (training) {
    cmd->add_option("--seed", c.seed, "training seed");
    cmd->add_option("--seeds", c.seeds, "comma-separated sweep seeds");
    cmd->add_option("--method", c.method, "distillation method name");
    cmd->add_option("--teacher", c.teacher, "teacher checkpoint path");
    cmd->add_option("--run-dir", c.run_dir, "artifact directory");
    cmd->add_flag("--force", c.force, "allow overwriting a non-empty run directory");
  }
}

RunConfig resolve_cli(const CommonFlags& c) {
  json file = c.config.empty() ? json() : load_config_file(c.config);
  std::map<std::string, std::string> flags;
  if (!c.seed.empty()) flags["seed"] = c.seed;
  if (!c.seeds.empty()) flags["seeds"] = c.seeds;
  if (!c.method.empty()) flags["method"] = c.method;
  if (!c.teacher.empty()) flags["teacher_ckpt"] = c.teacher;
  if (!c.run_dir.empty()) flags["run_dir"] = c.run_dir;
  if (c.toy) flags["toy"] = "true";
  return resolve_config(file, environment_overrides(), flags);
}

// Overwrite refusal shared by every artifact-producing command.
void claim_dir(const std::string& dir, bool force, const char* what) {
  if (dir.empty())
    throw ConfigError(std::string(what) + " must be set (flag or config key)");
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir))
      throw ConfigError("'" + dir + "' exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force)
        throw ConfigError("'" + dir + "' is not empty; pass --force to overwrite");
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
}

void write_snapshot(const RunConfig& cfg, const std::string& run_dir) {
  std::ofstream out(fs::path(run_dir) / "config.snapshot");
  out << cfg.to_json().dump(2) << "\n";
}

struct PreparedData {
  TensorDataset train, val, test;
  std::vector<std::string> class_names;
};

PreparedData prepare_data(const RunConfig& cfg, std::int64_t h, std::int64_t w) {
  if (cfg.data_root.empty()) throw ConfigError("data_root must be set");
  LabeledImageSet ds = load_dataset(cfg.data_root);
  SplitSpec split;
  split.test_fraction = cfg.test_fraction;
  split.val_fraction = cfg.val_fraction;
  split.train_fraction = 1.0 - cfg.val_fraction;
  split.seed = cfg.split_seed;
  DatasetSplits parts = split_dataset(ds, split);
  return {materialize(parts.train, h, w), materialize(parts.val, h, w),
          materialize(parts.test, h, w), ds.class_names};
}

BackboneSpec spec_for(const std::string& name, std::int64_t classes, std::int64_t input_size) {
  BackboneSpec spec = backbone_spec(name);
  spec.class_count = classes;
  if (input_size > 0) spec.input_h = spec.input_w = input_size;
  return spec;
}

std::string metric_line(const MetricsReport& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "acc %.4f  bacc %.4f  auc %.4f  map %.4f", r.acc, r.bacc,
                r.auc_macro, r.map_macro);
  return buf;
}

MetricsReport evaluate_and_write(Model& model, const TensorDataset& split,
                                 std::int64_t batch_size, const std::string& path) {
  MetricsReport report = evaluate_model(model, split.images, split.labels, batch_size);
  std::ofstream(path) << report.to_json() << "\n";
  return report;
}

int cmd_train_teacher(const CommonFlags& flags) {
  RunConfig cfg = resolve_cli(flags);
  claim_dir(cfg.run_dir, flags.force, "run_dir");

  BackboneSpec spec = spec_for(cfg.teacher, 2, cfg.input_size);
  PreparedData data = prepare_data(cfg, spec.input_h, spec.input_w);
  spec.class_count = data.train.classes();

  write_snapshot(cfg, cfg.run_dir);
  RunResult result = pretrain_teacher(cfg.distill, spec, data.train, data.val, cfg.run_dir);
  std::cout << "teacher '" << cfg.teacher << "' trained for "
            << result.state.history.size() << " epochs; best val loss "
            << result.state.best_val_loss << " at epoch " << result.best.epoch << "\n"
            << "artifacts in " << cfg.run_dir << "\n";
  return 0;
}

int cmd_distill(const CommonFlags& flags) {
  RunConfig cfg = resolve_cli(flags);
  claim_dir(cfg.run_dir, flags.force, "run_dir");

  Checkpoint teacher;
  bool needs_teacher = cfg.distill.method != Method::kWceOnly;
  if (needs_teacher) {
    if (cfg.teacher_ckpt.empty())
      throw ConfigError("method " + method_name(cfg.distill.method) +
                        " distills from a teacher; set teacher_ckpt (--teacher)");
    teacher = load_checkpoint(cfg.teacher_ckpt);
  }

  BackboneSpec spec = spec_for(cfg.student, 2, cfg.input_size);
  if (needs_teacher) {
    if (cfg.input_size == 0) spec.input_h = spec.input_w = teacher.spec.input_h;
    if (teacher.spec.input_h != spec.input_h || teacher.spec.input_w != spec.input_w)
      throw ConfigError("teacher checkpoint expects " + std::to_string(teacher.spec.input_h) +
                        "x" + std::to_string(teacher.spec.input_w) + " inputs but input_size is " +
                        std::to_string(spec.input_h) + "; set input_size to match");
  }
  PreparedData data = prepare_data(cfg, spec.input_h, spec.input_w);
  spec.class_count = data.train.classes();

  write_snapshot(cfg, cfg.run_dir);
  RunResult result =
      distill_student(cfg.distill, teacher, spec, data.train, data.val, cfg.run_dir);

  // The run's deliverable: test-split metrics of the best checkpoint.
  Model best = restore_model(result.best);
  MetricsReport report = evaluate_and_write(best, data.test, cfg.distill.batch_size,
                                            (fs::path(cfg.run_dir) / "report.json").string());
  std::cout << method_name(cfg.distill.method) << " student trained for "
            << result.state.history.size() << " epochs; best val loss "
            << result.state.best_val_loss << " at epoch " << result.best.epoch << "\n"
            << "test split: " << metric_line(report) << "\n"
            << "artifacts in " << cfg.run_dir << "\n";
  return 0;
}

int cmd_evaluate(const CommonFlags& flags, const std::string& ckpt_path,
                 const std::string& split, const std::string& out) {
  RunConfig cfg = resolve_cli(flags);
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  Model model = restore_model(ckpt);

  TensorDataset data;
  if (split == "all") {
    if (cfg.data_root.empty()) throw ConfigError("data_root must be set");
    data = materialize(load_dataset(cfg.data_root), ckpt.spec.input_h, ckpt.spec.input_w);
  } else {
    PreparedData parts = prepare_data(cfg, ckpt.spec.input_h, ckpt.spec.input_w);
    if (split == "train") data = std::move(parts.train);
    else if (split == "val") data = std::move(parts.val);
    else if (split == "test") data = std::move(parts.test);
    else throw ConfigError("unknown split '" + split + "' (train, val, test, all)");
  }

  MetricsReport report = evaluate_model(model, data.images, data.labels, cfg.distill.batch_size);
  if (out.empty()) {
    std::cout << report.to_json() << "\n";
  } else {
    std::ofstream(out) << report.to_json() << "\n";
    std::cout << split << " split of " << ckpt_path << ": " << metric_line(report) << "\n"
              << "report written to " << out << "\n";
  }
  return 0;
}

int cmd_plot(const std::vector<std::string>& reports, const std::string& out_dir,
             const std::string& class_names_csv) {
  std::vector<std::string> names;
  if (!class_names_csv.empty()) {
    std::size_t start = 0;
    while (start <= class_names_csv.size()) {
      std::size_t comma = class_names_csv.find(',', start);
      names.push_back(class_names_csv.substr(
          start, comma == std::string::npos ? comma : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }
  fs::create_directories(out_dir);

  for (const std::string& path : reports) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("report '" + path + "' does not exist");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    MetricsReport report = report_from_json(text);

    std::string stem = fs::path(path).stem().string();
    std::string confusion_path = (fs::path(out_dir) / (stem + "-confusion.png")).string();
    std::string roc_path = (fs::path(out_dir) / (stem + "-roc.png")).string();
    save_image(render_confusion_matrix(report.confusion, names, stem), confusion_path);
    save_image(render_roc_curves(report.roc_points, report.per_class_auc, names, stem), roc_path);
    std::cout << "wrote " << confusion_path << " and " << roc_path << "\n";
  }
  return 0;
}

int cmd_cam(const std::string& ckpt_path, const std::string& image_path,
            std::int64_t class_index, const std::string& out_dir) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  Model model = restore_model(ckpt);
  Tensor image = load_image(image_path, ckpt.spec.input_h, ckpt.spec.input_w);

  ActivationMap map = grad_cam(model, image, class_index);
  if (map.all_zero)
    std::cerr << "note: the activation map is all zero for class " << class_index << "\n";

  fs::create_directories(out_dir);
  std::string stem = fs::path(image_path).stem().string();
  std::string heat_path = (fs::path(out_dir) / (stem + "-cam.png")).string();
  std::string overlay_path = (fs::path(out_dir) / (stem + "-overlay.png")).string();
  save_cam(map, image, heat_path, overlay_path);
  std::cout << "wrote " << heat_path << " and " << overlay_path << "\n";
  return 0;
}

int cmd_make_fixture(const std::string& dir, const FixtureSpec& spec, bool force) {
  claim_dir(dir, force, "fixture directory");
  make_fixture(dir, spec);
  std::cout << "fixture with " << spec.classes << " classes x " << spec.per_class
            << " images (" << spec.image_size << "px) in " << dir << "\n";
  return 0;
}

// The comparison grid: every method row of the ablation protocol. Standalone
// CRKD is trainable through `distill` but is not part of the sweep grid.
std::vector<Method> sweep_grid() {
  std::vector<Method> grid;
  for (Method m : all_methods())
    if (m != Method::kCrkd) grid.push_back(m);
  return grid;
}

struct Aggregate {
  std::vector<double> values;
  double mean() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
  }
  double stddev() const {  // population: the spread of the reported repeats
    double m = mean(), s = 0.0;
    for (double v : values) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(values.size()));
  }
};

int cmd_sweep(const CommonFlags& flags) {
  RunConfig cfg = resolve_cli(flags);
  claim_dir(cfg.run_dir, flags.force, "run_dir");

  std::vector<std::uint64_t> seeds = cfg.seeds.empty()
                                         ? std::vector<std::uint64_t>{cfg.distill.seed}
                                         : cfg.seeds;
  std::vector<Method> grid = sweep_grid();

  BackboneSpec student_proto = spec_for(cfg.student, 2, cfg.input_size);
  PreparedData data = prepare_data(cfg, student_proto.input_h, student_proto.input_w);
  std::int64_t classes = data.train.classes();

  // One externally supplied teacher serves every run; otherwise each seed
  // pretrains its own pair (plain, and contrastive for the SSKD family).
  Checkpoint shared_teacher;
  if (!cfg.teacher_ckpt.empty()) shared_teacher = load_checkpoint(cfg.teacher_ckpt);

  std::map<std::string, std::map<std::string, Aggregate>> metrics;
  for (std::uint64_t seed : seeds) {
    std::map<bool, Checkpoint> teachers;  // keyed by "self-supervised"
    auto teacher_for = [&](Method method) -> const Checkpoint& {
      if (!cfg.teacher_ckpt.empty()) return shared_teacher;
      bool ss = is_self_supervised(method);
      auto it = teachers.find(ss);
      if (it != teachers.end()) return it->second;

      DistillConfig tc = cfg.distill;
      tc.seed = seed;
      tc.method = ss ? Method::kSsdKd : Method::kDkd;  // selects the pretrain objective
      BackboneSpec tspec = spec_for(cfg.teacher, classes, cfg.input_size);
      tspec.input_h = student_proto.input_h;
      tspec.input_w = student_proto.input_w;
      std::string dir = (fs::path(cfg.run_dir) / "teacher" /
                         ("seed-" + std::to_string(seed)) / (ss ? "selfsup" : "plain"))
                            .string();
      fs::create_directories(dir);
      std::cout << "pretraining " << (ss ? "self-supervised" : "plain") << " teacher, seed "
                << seed << "\n";
      RunResult r = pretrain_teacher(tc, tspec, data.train, data.val, dir);
      return teachers.emplace(ss, std::move(r.best)).first->second;
    };

    for (Method method : grid) {
      DistillConfig dc = cfg.distill;
      dc.method = method;
      dc.seed = seed;
      std::string dir = (fs::path(cfg.run_dir) / method_name(method) /
                         ("seed-" + std::to_string(seed)))
                            .string();
      fs::create_directories(dir);

      RunConfig run_cfg = cfg;
      run_cfg.distill = dc;
      run_cfg.run_dir = dir;
      run_cfg.seeds.clear();
      write_snapshot(run_cfg, dir);

      BackboneSpec sspec = student_proto;
      sspec.class_count = classes;
      Checkpoint none;
      const Checkpoint& teacher =
          method == Method::kWceOnly ? none : teacher_for(method);
      std::cout << "running " << method_name(method) << ", seed " << seed << "\n";
      RunResult result = distill_student(dc, teacher, sspec, data.train, data.val, dir);

      Model best = restore_model(result.best);
      MetricsReport report = evaluate_and_write(best, data.test, dc.batch_size,
                                                (fs::path(dir) / "report.json").string());
      auto& slot = metrics[method_name(method)];
      slot["acc"].values.push_back(report.acc);
      slot["bacc"].values.push_back(report.bacc);
      slot["auc_macro"].values.push_back(report.auc_macro);
      slot["map_macro"].values.push_back(report.map_macro);
    }
  }

  json summary;
  summary["seeds"] = seeds;
  for (const auto& [method, slots] : metrics)
    for (const auto& [metric, agg] : slots) {
      summary["methods"][method][metric] = {
          {"mean", agg.mean()}, {"std", agg.stddev()}, {"values", agg.values}};
    }
  std::ofstream((fs::path(cfg.run_dir) / "summary.json").string()) << summary.dump(2) << "\n";

  std::printf("\n%-12s %-17s %-17s %-17s %-17s\n", "method", "acc", "bacc", "auc", "map");
  for (Method method : grid) {
    const auto& slot = metrics.at(method_name(method));
    auto cell = [&](const char* key) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4f +/- %.4f", slot.at(key).mean(), slot.at(key).stddev());
      return std::string(buf);
    };
    std::printf("%-12s %-17s %-17s %-17s %-17s\n", method_name(method).c_str(),
                cell("acc").c_str(), cell("bacc").c_str(), cell("auc_macro").c_str(),
                cell("map_macro").c_str());
  }
  std::cout << "summary in " << (fs::path(cfg.run_dir) / "summary.json").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knowledge-distillation workbench: teacher pretraining, student "
               "distillation, evaluation, and figure export"};
  app.require_subcommand(1);

  CommonFlags train_flags;
  CLI::App* train = app.add_subcommand("train-teacher", "pretrain a teacher backbone");
  add_common(train, train_flags, true);

  CommonFlags distill_flags;
  CLI::App* distill = app.add_subcommand("distill", "train a student against a teacher");
  add_common(distill, distill_flags, true);

  CommonFlags eval_flags;
  std::string eval_ckpt, eval_split = "test", eval_out;
  CLI::App* evaluate = app.add_subcommand("evaluate", "score a checkpoint on a dataset split");
  evaluate->add_option("ckpt", eval_ckpt, "checkpoint to evaluate")->required();
  evaluate->add_option("--split", eval_split, "train, val, test, or all (default test)");
  evaluate->add_option("--out", eval_out, "report path (default: print to stdout)");
  add_common(evaluate, eval_flags, false);

  std::vector<std::string> plot_reports;
  std::string plot_out = ".", plot_names;
  CLI::App* plot = app.add_subcommand("plot", "render confusion/ROC figures from reports");
  plot->add_option("reports", plot_reports, "report JSON files")->required();
  plot->add_option("--out-dir", plot_out, "output directory (default .)");
  plot->add_option("--class-names", plot_names, "comma-separated class names");

  std::string cam_ckpt, cam_image, cam_out = ".";
  std::int64_t cam_class = 0;
  CLI::App* cam = app.add_subcommand("cam", "export a class activation map");
  cam->add_option("ckpt", cam_ckpt, "checkpoint to explain")->required();
  cam->add_option("image", cam_image, "input image")->required();
  cam->add_option("--class-index", cam_class, "class to attribute (default 0)");
  cam->add_option("--out-dir", cam_out, "output directory (default .)");

  CommonFlags fixture_flags;
  std::string fixture_dir;
  FixtureSpec fixture_spec;
  CLI::App* fixture = app.add_subcommand("make-fixture", "write a synthetic labeled dataset");
  fixture->add_option("dir", fixture_dir, "output directory")->required();
  fixture->add_option("--classes", fixture_spec.classes, "class count (default 8)");
  fixture->add_option("--per-class", fixture_spec.per_class, "images per class (default 30)");
  fixture->add_option("--image-size", fixture_spec.image_size, "square edge (default 32)");
  fixture->add_option("--fixture-seed", fixture_spec.seed, "generator seed (default 0)");
  fixture->add_flag("--force", fixture_flags.force, "allow overwriting a non-empty directory");

  CommonFlags sweep_flags;
  CLI::App* sweep = app.add_subcommand("sweep", "run the full method grid across seeds");
  add_common(sweep, sweep_flags, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train_teacher(train_flags);
    if (distill->parsed()) return cmd_distill(distill_flags);
    if (evaluate->parsed()) return cmd_evaluate(eval_flags, eval_ckpt, eval_split, eval_out);
    if (plot->parsed()) return cmd_plot(plot_reports, plot_out, plot_names);
    if (cam->parsed()) return cmd_cam(cam_ckpt, cam_image, cam_class, cam_out);
    if (fixture->parsed()) return cmd_make_fixture(fixture_dir, fixture_spec, fixture_flags.force);
    if (sweep->parsed()) return cmd_sweep(sweep_flags);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
