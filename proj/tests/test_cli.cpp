// SPDX-License-Identifier: Apache-2.0
//
// Drives the installed binary end to end: gen -> inspect -> extract -> fit ->
// predict -> eval, plus the exit-code contract.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "helpers.hpp"
#include "lora_forensics/features.hpp"
#include "lora_forensics/manifest.hpp"
#include "lora_forensics/snapshot.hpp"
#include "lora_forensics/spectral.hpp"

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunResult run_cli(const std::string& args) {
  static int counter = 0;
  const auto dir = std::filesystem::temp_directory_path();
  const auto out = dir / ("lf_cli_out_" + std::to_string(getpid()) + "_" +
                          std::to_string(counter));
  const auto err = dir / ("lf_cli_err_" + std::to_string(getpid()) + "_" +
                          std::to_string(counter));
  ++counter;
  const std::string cmd = std::string(LF_CLI_BIN) + " " + args + " > " + out.string() +
                          " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  RunResult result;
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  result.out = slurp_text(out);
  result.err = slurp_text(err);
  std::filesystem::remove(out);
  std::filesystem::remove(err);
  return result;
}

// gen a small separable corpus once; everything else reuses it
const std::filesystem::path& corpus_dir() {
  static const std::filesystem::path dir = [] {
    const auto base = lftest::scratch_dir("cli");
    const auto config = base / "gen.json";
    std::ofstream(config) << R"({
      "class_set": [1, 2, 3],
      "n_micro_datasets": 6,
      "layers": 2,
      "d": 16,
      "k": 16,
      "rank": 4,
      "alpha": 1.0,
      "noise": 0.02,
      "preset": "separable",
      "seed": 77
    })";
    const auto out = base / "corpus";
    const RunResult r =
        run_cli("gen --config " + config.string() + " --out " + out.string());
    REQUIRE(r.exit_code == 0);
    return out;
  }();
  return dir;
}

// manifest restricted to the first four micro-datasets, written next to the
// original so relative paths keep resolving
std::filesystem::path train_manifest() {
  const auto path = corpus_dir() / "train_manifest.csv";
  std::ifstream in(corpus_dir() / "manifest.csv");
  std::ofstream out(path);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first || line.find("md000") != std::string::npos ||
        line.find("md001") != std::string::npos || line.find("md002") != std::string::npos ||
        line.find("md003") != std::string::npos) {
      out << line << "\n";
    }
    first = false;
  }
  return path;
}

}  // namespace

TEST_CASE("gen writes a loadable corpus") {
  CHECK(std::filesystem::exists(corpus_dir() / "manifest.csv"));
  CHECK(std::filesystem::exists(corpus_dir() / "provenance.json"));
  const lf::SnapshotIndex index = lf::build_index(corpus_dir() / "manifest.csv");
  CHECK(index.entries.size() == 18);
  CHECK(index.groups.size() == 6);
}

TEST_CASE("inspect prints a summary and a recomputable CSV") {
  const std::string snapshot = (corpus_dir() / "snapshots" / "md000_n1.safetensors").string();
  const RunResult human = run_cli("inspect " + snapshot);
  CHECK(human.exit_code == 0);
  CHECK(human.out.find("layers: 2") != std::string::npos);
  CHECK(human.out.find("layer_000") != std::string::npos);
  CHECK(human.out.find("s_frob=") != std::string::npos);

  const RunResult csv = run_cli("inspect " + snapshot + " --csv");
  CHECK(csv.exit_code == 0);
  std::istringstream lines(csv.out);
  std::string line;
  std::getline(lines, line);
  CHECK(line == "layer_index,layer_path,kind,d,k,rank,sigma_top,s_frob");
  const lf::ModelSnapshot loaded = lf::read_snapshot(snapshot);
  std::size_t rows = 0;
  while (std::getline(lines, line)) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream fs(line);
    while (std::getline(fs, field, ',')) fields.push_back(field);
    REQUIRE(fields.size() == 8);
    const std::size_t li = std::stoul(fields[0]);
    const double s_frob = std::stod(fields[7]);
    const double recomputed = lf::frobenius_stat(loaded.layers[li].b, loaded.layers[li].a);
    CHECK(std::fabs(s_frob - recomputed) <= 1e-9 * std::max(1.0, recomputed));
    ++rows;
  }
  CHECK(rows == 2 * 3);  // one row per (layer, kind)

  const RunResult missing = run_cli("inspect /no/such/file.safetensors");
  CHECK(missing.exit_code == 1);
}

TEST_CASE("extract writes feature caches") {
  const auto out = corpus_dir() / "features";
  const RunResult r = run_cli("extract --manifest " + (corpus_dir() / "manifest.csv").string() +
                              " --kinds A,B,BA --out " + out.string());
  CHECK(r.exit_code == 0);
  const auto cache = lf::read_feature_cache(out / "md000_n1.features.safetensors");
  CHECK(cache.size() == 2 * 3);
}

TEST_CASE("gen -> fit -> predict recovers the held-out label") {
  const auto model_path = corpus_dir() / "model.json";
  const RunResult fit = run_cli("fit --manifest " + train_manifest().string() +
                                " --predictor layer_nn --agg majority --kinds A,B,BA --out " +
                                model_path.string());
  CHECK(fit.exit_code == 0);
  REQUIRE(std::filesystem::exists(model_path));

  for (int label : {1, 2, 3}) {
    const std::string held_out =
        (corpus_dir() / "snapshots" / ("md004_n" + std::to_string(label) + ".safetensors"))
            .string();
    const RunResult predict = run_cli("predict --model " + model_path.string() + " --snapshot " +
                                      held_out + " --votes");
    CHECK(predict.exit_code == 0);
    std::istringstream lines(predict.out);
    std::string first;
    std::getline(lines, first);
    CHECK(first == std::to_string(label));
    CHECK(predict.out.find("vote ") != std::string::npos);
  }
}

TEST_CASE("predict with a mismatched topology fails with exit 1") {
  const auto base = lftest::scratch_dir("cli_mismatch");
  // a one-layer snapshot against the two-layer model
  lf::ModelSnapshot snapshot;
  lf::LoraLayerSnapshot layer;
  layer.layer_path = "layer_000";
  layer.b = lf::Matrix(16, 4, 0.25);
  layer.a = lf::Matrix(4, 16, 0.25);
  snapshot.layers.push_back(layer);
  lf::write_snapshot(snapshot, base / "one_layer.safetensors");

  const RunResult r = run_cli("predict --model " + (corpus_dir() / "model.json").string() +
                              " --snapshot " + (base / "one_layer.safetensors").string());
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("TopologyMismatch") != std::string::npos);
}

TEST_CASE("eval writes a report with one row per repeat plus an aggregate") {
  const auto report_path = corpus_dir() / "report.json";
  const auto csv_path = corpus_dir() / "report.csv";
  const RunResult r = run_cli(
      "eval --manifest " + (corpus_dir() / "manifest.csv").string() +
      " --out " + report_path.string() + " --csv " + csv_path.string() +
      " --n-train-sets 3 --train-pool-sets 3 --repeats 4 --split-seed 42");
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("accuracy") != std::string::npos);

  std::istringstream lines(slurp_text(csv_path));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(lines, line)) ++rows;
  CHECK(rows == 1 + 4 + 1);

  const std::string report = slurp_text(report_path);
  CHECK(report.find("\"deterministic_digest\"") != std::string::npos);
  CHECK(report.find("\"repeats\"") != std::string::npos);
}

TEST_CASE("eval reads a config file and flags win over it") {
  const auto config = corpus_dir() / "eval.json";
  std::ofstream(config) << R"({
    "predictor": "layer_nn",
    "aggregation": "majority",
    "kinds": ["A", "B", "BA"],
    "n_train_sets": 3,
    "train_pool_sets": 3,
    "repeats": 2,
    "split_seed": 42,
    "repeat_seed_base": 5
  })";
  const auto report_a = corpus_dir() / "cfg_report_a.json";
  const RunResult a = run_cli("eval --manifest " + (corpus_dir() / "manifest.csv").string() +
                              " --config " + config.string() + " --out " + report_a.string());
  CHECK(a.exit_code == 0);
  CHECK(slurp_text(report_a).find("\"repeats\"") != std::string::npos);

  // --repeats on the command line overrides the config file
  const auto report_b = corpus_dir() / "cfg_report_b.json";
  const auto csv_b = corpus_dir() / "cfg_report_b.csv";
  const RunResult b = run_cli("eval --manifest " + (corpus_dir() / "manifest.csv").string() +
                              " --config " + config.string() + " --repeats 3 --out " +
                              report_b.string() + " --csv " + csv_b.string());
  CHECK(b.exit_code == 0);
  std::istringstream lines(slurp_text(csv_b));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(lines, line)) ++rows;
  CHECK(rows == 1 + 3 + 1);
}

TEST_CASE("usage errors exit 2") {
  CHECK(run_cli("--no-such-flag").exit_code == 2);
  CHECK(run_cli("predict --model only").exit_code == 2);  // missing --snapshot
  CHECK(run_cli("frobnicate").exit_code == 2);
  CHECK(run_cli("--help").exit_code == 0);
  CHECK(run_cli("--version").exit_code == 0);
}
