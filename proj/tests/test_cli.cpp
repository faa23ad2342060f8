#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "kd/data.hpp"
#include "testutil.hpp"

// Every case drives the installed binary like a user would: through argv and
// the filesystem.
#ifndef SKINKD_BIN
#error "SKINKD_BIN must point at the CLI binary"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunOutput {
  int exit_code = -1;
  std::string text;  // stdout + stderr interleaved
};

RunOutput run_pipe(const std::string& cmd) {
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunOutput out;
  std::array<char, 512> buf;
  while (std::fgets(buf.data(), buf.size(), pipe) != nullptr) out.text += buf.data();
  int status = ::pclose(pipe);
  out.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return out;
}

RunOutput run_cli(const std::string& args) {
  return run_pipe(std::string(SKINKD_BIN) + " " + args + " 2>&1");
}

// stdout only — for commands whose standard output must parse on its own.
RunOutput run_cli_stdout(const std::string& args) {
  return run_pipe(std::string(SKINKD_BIN) + " " + args + " 2>/dev/null");
}

// A small but learnable corpus plus a toy config pointing at it.
std::string write_config(const kdtest::TempDir& dir, const std::string& data_root) {
  std::string path = dir.file("config.json");
  std::ofstream(path) << R"({
    "toy": true,
    "data_root": ")" << data_root << R"(",
    "input_size": 16,
    "max_epochs": 2,
    "batch_size": 8,
    "augment": false,
    "ss_views": 2,
    "test_fraction": 0.167,
    "val_fraction": 0.2
  })";
  return path;
}

std::string make_data(const kdtest::TempDir& dir) {
  std::string root = dir.file("data");
  RunOutput out = run_cli("make-fixture " + root + " --classes 3 --per-class 8 --image-size 16");
  REQUIRE(out.exit_code == 0);
  return root;
}

}  // namespace

TEST_CASE("make-fixture writes an ingestible dataset and refuses to overwrite") {
  kdtest::TempDir dir;
  std::string root = dir.file("fixture");
  RunOutput out = run_cli("make-fixture " + root + " --classes 3 --per-class 4 --image-size 16");
  CHECK(out.exit_code == 0);

  kd::LabeledImageSet ds = kd::load_dataset(root);
  CHECK(ds.classes() == 3);
  CHECK(ds.counts == std::vector<std::int64_t>{4, 4, 4});

  RunOutput again = run_cli("make-fixture " + root + " --classes 3 --per-class 4");
  CHECK(again.exit_code != 0);
  CHECK(again.text.find("--force") != std::string::npos);

  RunOutput forced =
      run_cli("make-fixture " + root + " --classes 2 --per-class 4 --image-size 16 --force");
  CHECK(forced.exit_code == 0);
  CHECK(kd::load_dataset(root).classes() == 2);
}

TEST_CASE("train-teacher produces run artifacts deterministically") {
  kdtest::TempDir dir;
  std::string cfg = write_config(dir, make_data(dir));

  RunOutput first =
      run_cli("train-teacher --config " + cfg + " --run-dir " + dir.file("t1"));
  CHECK(first.exit_code == 0);
  for (const char* name : {"config.snapshot", "history.jsonl", "best.ckpt", "last.ckpt"})
    CHECK(fs::exists(dir.file("t1") + "/" + name));

  RunOutput second =
      run_cli("train-teacher --config " + cfg + " --run-dir " + dir.file("t2"));
  CHECK(second.exit_code == 0);
  CHECK(kdtest::slurp(dir.file("t1") + "/history.jsonl") ==
        kdtest::slurp(dir.file("t2") + "/history.jsonl"));

  // Collisions refuse politely, --force reclaims the directory.
  RunOutput collide =
      run_cli("train-teacher --config " + cfg + " --run-dir " + dir.file("t1"));
  CHECK(collide.exit_code != 0);
  CHECK(collide.text.find("--force") != std::string::npos);
  RunOutput forced =
      run_cli("train-teacher --config " + cfg + " --run-dir " + dir.file("t1") + " --force");
  CHECK(forced.exit_code == 0);
}

TEST_CASE("unknown config keys abort with the offending name") {
  kdtest::TempDir dir;
  std::string bad = dir.file("bad.json");
  std::ofstream(bad) << R"({"toy": true, "learnig_rate": 0.1})";
  RunOutput out = run_cli("train-teacher --config " + bad + " --run-dir " + dir.file("run"));
  CHECK(out.exit_code != 0);
  CHECK(out.text.find("learnig_rate") != std::string::npos);
}

TEST_CASE("distill trains, reports on the test split, and validates its inputs") {
  kdtest::TempDir dir;
  std::string cfg = write_config(dir, make_data(dir));

  // A supervision-only baseline needs no teacher.
  RunOutput wce = run_cli("distill --config " + cfg + " --method WCE-only --run-dir " +
                          dir.file("wce"));
  CHECK(wce.exit_code == 0);
  json report = json::parse(kdtest::slurp(dir.file("wce") + "/report.json"));
  CHECK(report.at("acc").is_number());
  CHECK(report.at("schema_version").get<int>() == 1);

  // Distilling methods demand a teacher checkpoint...
  RunOutput missing =
      run_cli("distill --config " + cfg + " --method BLKD --run-dir " + dir.file("no-teacher"));
  CHECK(missing.exit_code != 0);
  CHECK(missing.text.find("teacher") != std::string::npos);

  // ...and unknown methods list the grid.
  RunOutput fitnet =
      run_cli("distill --config " + cfg + " --method FitNet --run-dir " + dir.file("fitnet"));
  CHECK(fitnet.exit_code != 0);
  CHECK(fitnet.text.find("FitNet") != std::string::npos);
  CHECK(fitnet.text.find("SSD-KD") != std::string::npos);

  RunOutput teacher =
      run_cli("train-teacher --config " + cfg + " --run-dir " + dir.file("teacher"));
  REQUIRE(teacher.exit_code == 0);
  RunOutput blkd = run_cli("distill --config " + cfg + " --method BLKD --teacher " +
                           dir.file("teacher") + "/best.ckpt --run-dir " + dir.file("blkd"));
  CHECK(blkd.exit_code == 0);
  CHECK(fs::exists(dir.file("blkd") + "/report.json"));
  CHECK(blkd.text.find("test split") != std::string::npos);
}

TEST_CASE("evaluate, plot, and cam consume a finished run") {
  kdtest::TempDir dir;
  std::string data = make_data(dir);
  std::string cfg = write_config(dir, data);
  REQUIRE(run_cli("distill --config " + cfg + " --method WCE-only --run-dir " +
                  dir.file("run")).exit_code == 0);
  std::string ckpt = dir.file("run") + "/best.ckpt";

  RunOutput to_stdout = run_cli_stdout("evaluate " + ckpt + " --config " + cfg + " --split val");
  CHECK(to_stdout.exit_code == 0);
  json report = json::parse(to_stdout.text);
  CHECK(report.at("schema_version").get<int>() == 1);

  RunOutput to_file = run_cli("evaluate " + ckpt + " --config " + cfg + " --split test --out " +
                              dir.file("eval.json"));
  CHECK(to_file.exit_code == 0);
  CHECK(fs::exists(dir.file("eval.json")));

  RunOutput bad_split = run_cli("evaluate " + ckpt + " --config " + cfg + " --split niether");
  CHECK(bad_split.exit_code != 0);
  CHECK(bad_split.text.find("niether") != std::string::npos);

  RunOutput plotted = run_cli("plot " + dir.file("eval.json") + " --out-dir " +
                              dir.file("figs") + " --class-names a,b,c");
  CHECK(plotted.exit_code == 0);
  CHECK(fs::exists(dir.file("figs") + "/eval-confusion.png"));
  CHECK(fs::exists(dir.file("figs") + "/eval-roc.png"));
  CHECK(run_cli("plot " + dir.file("absent.json")).exit_code != 0);

  std::string image = data + "/images/img_c0_0.png";
  RunOutput cam = run_cli("cam " + ckpt + " " + image + " --class-index 0 --out-dir " +
                          dir.file("figs"));
  CHECK(cam.exit_code == 0);
  CHECK(fs::exists(dir.file("figs") + "/img_c0_0-cam.png"));
  CHECK(fs::exists(dir.file("figs") + "/img_c0_0-overlay.png"));

  RunOutput bad_class = run_cli("cam " + ckpt + " " + image + " --class-index 9");
  CHECK(bad_class.exit_code != 0);
  CHECK(bad_class.text.find("out of range") != std::string::npos);
}

TEST_CASE("sweep runs the grid across seeds and aggregates the reports") {
  kdtest::TempDir dir;
  std::string cfg = write_config(dir, make_data(dir));
  std::string grid_dir = dir.file("grid");

  RunOutput sweep = run_cli("sweep --config " + cfg + " --seeds 0,1 --run-dir " + grid_dir);
  CHECK(sweep.exit_code == 0);
  CHECK(sweep.text.find("SSD-KD") != std::string::npos);

  json summary = json::parse(kdtest::slurp(grid_dir + "/summary.json"));
  CHECK(summary.at("seeds") == json::array({0, 1}));
  const json& methods = summary.at("methods");
  CHECK(methods.size() == 10);
  CHECK(!methods.contains("CRKD"));  // the standalone channel term is off-grid

  for (const char* name : {"WCE-only", "BLKD", "DRKD", "SSKD", "BLKD+DRKD", "BLKD+CRKD",
                           "SSKD+DRKD", "SSKD+CRKD", "D-KD", "SSD-KD"}) {
    CAPTURE(name);
    REQUIRE(methods.contains(name));
    const json& acc = methods.at(name).at("acc");
    CHECK(acc.at("values").size() == 2);
    CHECK(acc.at("mean").is_number());
    CHECK(acc.at("std").is_number());
    for (int seed : {0, 1}) {
      std::string report = grid_dir + "/" + name + "/seed-" + std::to_string(seed) +
                           "/report.json";
      CHECK(fs::exists(report));
    }
  }

  // Aggregation oracle: the summary means equal the per-run report means.
  for (const auto& [name, slots] : methods.items()) {
    double sum = 0.0;
    for (int seed : {0, 1}) {
      json report = json::parse(kdtest::slurp(grid_dir + "/" + name + "/seed-" +
                                              std::to_string(seed) + "/report.json"));
      sum += report.at("acc").get<double>();
    }
    CHECK(slots.at("acc").at("mean").get<double>() == doctest::Approx(sum / 2).epsilon(1e-12));
  }

  // Both teacher flavors were pretrained once per seed.
  for (int seed : {0, 1}) {
    CHECK(fs::exists(grid_dir + "/teacher/seed-" + std::to_string(seed) + "/plain/best.ckpt"));
    CHECK(fs::exists(grid_dir + "/teacher/seed-" + std::to_string(seed) + "/selfsup/best.ckpt"));
  }
}
