// SPDX-License-Identifier: Apache-2.0
//
// lora-forensics: recover the fine-tuning dataset size of a LoRA-adapted
// model from its weight snapshot. Subcommands cover the whole pipeline:
// generate a synthetic benchmark corpus, inspect snapshots, extract feature
// caches, fit an ensemble, predict single snapshots, and run full seeded
// evaluation experiments.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lora_forensics/error.hpp"
#include "lora_forensics/features.hpp"
#include "lora_forensics/harness.hpp"
#include "lora_forensics/manifest.hpp"
#include "lora_forensics/parallel.hpp"
#include "lora_forensics/predictors.hpp"
#include "lora_forensics/snapshot.hpp"
#include "lora_forensics/synthgen.hpp"
#include "lora_forensics/version.hpp"

namespace {

std::vector<lf::MatrixKind> parse_kinds(const std::string& text) {
  std::vector<lf::MatrixKind> kinds;
  std::string token;
  for (char c : text + ",") {
    if (c == ',') {
      if (!token.empty()) kinds.push_back(lf::matrix_kind_from_string(token));
      token.clear();
    } else {
      token.push_back(c);
    }
  }
  return lf::canonical_kinds(kinds);
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json load_json_file(const std::string& path) {
  const std::vector<unsigned char> bytes = lf::detail::read_file_bytes(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    lf::raise(lf::ErrorCode::ConfigError, "config '" + path + "' is not valid JSON: " + e.what());
  }
}

int cmd_gen(const std::string& config_path, const std::string& out_dir, unsigned threads) {
  lf::GenConfig cfg = load_json_file(config_path).get<lf::GenConfig>();
  const lf::GeneratedCorpus corpus = lf::generate_corpus(cfg, out_dir, threads);
  std::cout << "wrote " << corpus.snapshot_count << " snapshots under " << corpus.root.string()
            << "\nmanifest: " << corpus.manifest.string() << "\n";
  return 0;
}

int cmd_inspect(const std::string& snapshot_path, bool csv) {
  const lf::ModelSnapshot snapshot = lf::read_snapshot(snapshot_path);
  const std::vector<lf::MatrixKind> kinds = {lf::MatrixKind::A, lf::MatrixKind::B,
                                             lf::MatrixKind::BA};
  if (csv) {
    std::cout << "layer_index,layer_path,kind,d,k,rank,sigma_top,s_frob\n";
  } else {
    std::cout << "snapshot: " << snapshot_path << "\nlayers: " << snapshot.layers.size() << "\n";
  }
  for (std::size_t li = 0; li < snapshot.layers.size(); ++li) {
    const lf::LoraLayerSnapshot& layer = snapshot.layers[li];
    const double s_frob = lf::frobenius_stat(layer.b, layer.a);
    std::vector<double> tops;
    for (lf::MatrixKind kind : kinds) {
      lf::Spectrum sigma;
      switch (kind) {
        case lf::MatrixKind::A: sigma = lf::factor_spectrum(layer.a); break;
        case lf::MatrixKind::B: sigma = lf::factor_spectrum(layer.b); break;
        default: sigma = lf::product_spectrum(layer.b, layer.a); break;
      }
      tops.push_back(sigma.empty() ? 0.0 : sigma.front());
    }
    char buf[256];
    if (csv) {
      for (std::size_t ki = 0; ki < kinds.size(); ++ki) {
        std::snprintf(buf, sizeof(buf), "%zu,%s,%s,%zu,%zu,%zu,%.12g,%.12g\n", li,
                      layer.layer_path.c_str(), lf::to_string(kinds[ki]), layer.d(), layer.k(),
                      layer.rank(), tops[ki], s_frob);
        std::cout << buf;
      }
    } else {
      std::snprintf(buf, sizeof(buf),
                    "%-24s d=%-5zu k=%-5zu r=%-3zu s_frob=%-12.6g "
                    "sigma_top[A]=%.6g [B]=%.6g [BA]=%.6g\n",
                    layer.layer_path.c_str(), layer.d(), layer.k(), layer.rank(), s_frob,
                    tops[0], tops[1], tops[2]);
      std::cout << buf;
    }
  }
  return 0;
}

int cmd_extract(const std::string& manifest, const std::string& kinds_text,
                const std::string& out_dir, unsigned threads) {
  const std::vector<lf::MatrixKind> kinds = parse_kinds(kinds_text);
  const lf::SnapshotIndex index = lf::build_index(manifest);
  std::filesystem::create_directories(out_dir);
  lf::parallel_for(index.entries.size(), threads, [&](std::size_t i) {
    const lf::IndexEntry& entry = index.entries[i];
    const lf::ModelSnapshot snapshot = lf::load_entry(entry);
    const lf::SlotFeatures features = lf::extract_features(snapshot, kinds);
    const std::filesystem::path out =
        std::filesystem::path(out_dir) / (entry.path.stem().string() + ".features.safetensors");
    lf::write_feature_cache(features, out);
  });
  std::cout << "wrote " << index.entries.size() << " feature caches under " << out_dir << "\n";
  return 0;
}

int cmd_fit(const std::string& manifest, const std::string& predictor, const std::string& agg,
            const std::string& kinds_text, const std::string& out_path, double ridge_lambda,
            double gda_eps, unsigned threads) {
  const lf::PredictorKind kind = lf::predictor_kind_from_string(predictor);
  std::vector<lf::MatrixKind> kinds = parse_kinds(kinds_text);
  if (kind == lf::PredictorKind::FrobeniusNN) kinds = {lf::MatrixKind::FROB};
  const lf::SnapshotIndex index = lf::build_index(manifest);
  const lf::FeatureTableSet tables = lf::build_tables(index, kinds, threads);
  lf::Hyper hyper;
  hyper.ridge_lambda = ridge_lambda;
  hyper.gda_eps = gda_eps;
  const lf::EnsembleModel model =
      lf::fit(kind, lf::aggregation_from_string(agg), tables, hyper);
  lf::save_model(model, out_path);
  std::cout << "fitted " << lf::to_string(kind) << " on " << index.entries.size()
            << " snapshots (" << model.slots.size() << " slot classifiers) -> " << out_path
            << "\n";
  return 0;
}

int cmd_predict(const std::string& model_path, const std::string& snapshot_path, bool votes) {
  const lf::EnsembleModel model = lf::load_model(model_path);
  const lf::ModelSnapshot snapshot = lf::read_snapshot(snapshot_path);
  const lf::Prediction prediction = lf::predict(model, snapshot);
  std::cout << prediction.label << "\n";
  if (votes) {
    std::map<int, std::size_t> histogram;
    for (const lf::Vote& vote : prediction.votes) ++histogram[vote.label];
    for (const auto& [label, count] : histogram) {
      std::cout << "vote " << label << " " << count << "\n";
    }
  }
  return 0;
}

int cmd_eval(const CLI::App* sub, const std::string& manifest, const std::string& config_path,
             const std::string& out_path, const std::string& csv_path,
             const std::string& predictor, const std::string& agg, const std::string& kinds_text,
             int n_train_sets, int train_pool_sets, int repeats, std::uint64_t split_seed,
             std::uint64_t repeat_seed_base, unsigned threads) {
  lf::ExperimentConfig cfg;
  if (!config_path.empty()) cfg = load_json_file(config_path).get<lf::ExperimentConfig>();
  // flags win over the config file
  if (sub->count("--predictor")) cfg.predictor = lf::predictor_kind_from_string(predictor);
  if (sub->count("--agg")) cfg.aggregation = lf::aggregation_from_string(agg);
  if (sub->count("--kinds")) cfg.kinds = parse_kinds(kinds_text);
  if (sub->count("--n-train-sets")) cfg.n_train_sets = n_train_sets;
  if (sub->count("--train-pool-sets")) cfg.train_pool_sets = train_pool_sets;
  if (sub->count("--repeats")) cfg.repeats = repeats;
  if (sub->count("--split-seed")) cfg.split_seed = split_seed;
  if (sub->count("--repeat-seed-base")) cfg.repeat_seed_base = repeat_seed_base;

  const lf::SnapshotIndex index = lf::build_index(manifest);
  lf::Report report = lf::run_experiment(cfg, index, threads);
  report.timestamp = utc_timestamp();
  lf::export_report(report, out_path, lf::ReportFormat::StructuredText);
  if (!csv_path.empty()) lf::export_report(report, csv_path, lf::ReportFormat::CsvSummary);

  char buf[160];
  if (report.aggregate) {
    const lf::AggregateResult& a = *report.aggregate;
    std::snprintf(buf, sizeof(buf),
                  "mae %.4f +- %.4f  mape %.2f%% +- %.2f  accuracy %.2f%% +- %.2f  (%d repeats)\n",
                  a.mae.mean, a.mae.std_dev, a.mape.mean, a.mape.std_dev, a.accuracy.mean,
                  a.accuracy.std_dev, cfg.repeats);
  } else {
    const lf::EvalResult& r = report.repeats.front();
    std::snprintf(buf, sizeof(buf), "mae %.4f  mape %.2f%%  accuracy %.2f%%  (1 repeat)\n",
                  r.mae, r.mape, r.accuracy);
  }
  std::cout << buf << "report: " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LoRA weight forensics: dataset size recovery from weight snapshots"};
  app.set_version_flag("--version", lf::kToolVersion);
  app.require_subcommand(1);

  int threads_flag = 0;
  app.add_option("--threads", threads_flag, "worker threads (default: all cores)")
      ->envname("LORA_FORENSICS_THREADS");

  auto* gen = app.add_subcommand("gen", "generate a synthetic labeled snapshot corpus");
  std::string gen_config, gen_out;
  gen->add_option("--config", gen_config, "generator config (JSON)")->required();
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* inspect = app.add_subcommand("inspect", "summarize one snapshot's spectra");
  std::string inspect_path;
  bool inspect_csv = false;
  inspect->add_option("snapshot", inspect_path, "snapshot file")->required();
  inspect->add_flag("--csv", inspect_csv, "machine-readable output, one row per (layer, kind)");

  auto* extract = app.add_subcommand("extract", "write per-snapshot feature caches");
  std::string extract_manifest, extract_kinds = "A,B,BA", extract_out;
  extract->add_option("--manifest", extract_manifest, "manifest CSV")->required();
  extract->add_option("--kinds", extract_kinds, "comma list of A,B,BA,FROB");
  extract->add_option("--out", extract_out, "output directory")->required();

  auto* fit = app.add_subcommand("fit", "fit an ensemble on labeled snapshots");
  std::string fit_manifest, fit_predictor = "layer_nn", fit_agg = "majority";
  std::string fit_kinds = "A,B,BA", fit_out;
  double fit_ridge_lambda = 1.0, fit_gda_eps = 1e-6;
  fit->add_option("--manifest", fit_manifest, "manifest CSV")->required();
  fit->add_option("--predictor", fit_predictor,
                  "layer_nn|frobenius_nn|gda|ridge|full_model_nn");
  fit->add_option("--agg", fit_agg, "majority|average");
  fit->add_option("--kinds", fit_kinds, "comma list of A,B,BA,FROB");
  fit->add_option("--ridge-lambda", fit_ridge_lambda, "ridge L2 penalty");
  fit->add_option("--gda-eps", fit_gda_eps, "GDA variance floor");
  fit->add_option("--out", fit_out, "model output file")->required();

  auto* predict = app.add_subcommand("predict", "predict the dataset size of one snapshot");
  std::string predict_model, predict_snapshot;
  bool predict_votes = false;
  predict->add_option("--model", predict_model, "fitted model file")->required();
  predict->add_option("--snapshot", predict_snapshot, "snapshot file")->required();
  predict->add_flag("--votes", predict_votes, "also print the vote histogram");

  auto* eval = app.add_subcommand("eval", "run a full seeded evaluation experiment");
  std::string eval_manifest, eval_config, eval_out, eval_csv;
  std::string eval_predictor, eval_agg, eval_kinds;
  int eval_n_train_sets = 15, eval_train_pool_sets = 15, eval_repeats = 10;
  std::uint64_t eval_split_seed = 42, eval_repeat_seed_base = 1000;
  eval->add_option("--manifest", eval_manifest, "manifest CSV")->required();
  eval->add_option("--config", eval_config, "experiment config (JSON)");
  eval->add_option("--out", eval_out, "report output file (JSON)")->required();
  eval->add_option("--csv", eval_csv, "also write a CSV summary here");
  eval->add_option("--predictor", eval_predictor, "override: predictor kind");
  eval->add_option("--agg", eval_agg, "override: vote aggregation");
  eval->add_option("--kinds", eval_kinds, "override: matrix kinds");
  eval->add_option("--n-train-sets", eval_n_train_sets, "override: training groups per repeat");
  eval->add_option("--train-pool-sets", eval_train_pool_sets, "override: train pool size");
  eval->add_option("--repeats", eval_repeats, "override: repeat count");
  eval->add_option("--split-seed", eval_split_seed, "override: split seed");
  eval->add_option("--repeat-seed-base", eval_repeat_seed_base, "override: repeat seed base");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage errors exit 2, --help/--version exit 0
  }

  const unsigned threads = lf::resolve_thread_count(threads_flag);
  try {
    if (gen->parsed()) return cmd_gen(gen_config, gen_out, threads);
    if (inspect->parsed()) return cmd_inspect(inspect_path, inspect_csv);
    if (extract->parsed()) return cmd_extract(extract_manifest, extract_kinds, extract_out, threads);
    if (fit->parsed()) {
      return cmd_fit(fit_manifest, fit_predictor, fit_agg, fit_kinds, fit_out, fit_ridge_lambda,
                     fit_gda_eps, threads);
    }
    if (predict->parsed()) return cmd_predict(predict_model, predict_snapshot, predict_votes);
    if (eval->parsed()) {
      return cmd_eval(eval, eval_manifest, eval_config, eval_out, eval_csv, eval_predictor,
                      eval_agg, eval_kinds, eval_n_train_sets, eval_train_pool_sets, eval_repeats,
                      eval_split_seed, eval_repeat_seed_base, threads);
    }
  } catch (const lf::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
