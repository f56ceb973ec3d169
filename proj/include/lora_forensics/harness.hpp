// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lora_forensics/error.hpp"
#include "lora_forensics/features.hpp"
#include "lora_forensics/manifest.hpp"
#include "lora_forensics/metrics.hpp"
#include "lora_forensics/parallel.hpp"
#include "lora_forensics/predictors.hpp"
#include "lora_forensics/rng.hpp"
#include "lora_forensics/version.hpp"

namespace lf {

// One experiment: split the corpus by micro-dataset with split_seed, keep
// the test side fixed, then per repeat re-draw which n_train_sets groups of
// the train pool feed the fit. train_pool_sets bounds the pool so sweeping
// n_train_sets never touches the held-out side.
struct ExperimentConfig {
  PredictorKind predictor = PredictorKind::LayerNN;
  Aggregation aggregation = Aggregation::Majority;
  std::vector<MatrixKind> kinds = {MatrixKind::A, MatrixKind::B, MatrixKind::BA};
  int n_train_sets = 15;
  int train_pool_sets = 15;
  int repeats = 10;
  std::uint64_t split_seed = 42;
  std::uint64_t repeat_seed_base = 1000;
  Hyper hyper;
  // data selection; empty/zero means "no filter"
  std::vector<int> class_filter;
  std::string filter_backbone_tag;
  int filter_lora_rank = 0;
  std::int64_t filter_step = -1;
};

// The scalar-statistic baseline is defined on FROB features regardless of
// the configured kinds.
inline std::vector<MatrixKind> effective_kinds(const ExperimentConfig& cfg) {
  if (cfg.predictor == PredictorKind::FrobeniusNN) return {MatrixKind::FROB};
  return canonical_kinds(cfg.kinds);
}

struct SlotVoteAccuracy {
  SlotKey slot;
  std::size_t correct = 0;
  std::size_t total = 0;
};

struct Report {
  ExperimentConfig config;
  std::vector<EvalResult> repeats;
  std::optional<AggregateResult> aggregate;
  std::vector<SlotVoteAccuracy> slot_votes;
  std::string tool_version;
  std::string timestamp;        // excluded from the deterministic digest
  std::string manifest_digest;  // fnv1a64 of the manifest bytes
  std::string deterministic_digest;
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& cfg) {
  nlohmann::json kinds = nlohmann::json::array();
  for (MatrixKind kind : cfg.kinds) kinds.push_back(to_string(kind));
  j = {{"predictor", to_string(cfg.predictor)},
       {"aggregation", to_string(cfg.aggregation)},
       {"kinds", kinds},
       {"n_train_sets", cfg.n_train_sets},
       {"train_pool_sets", cfg.train_pool_sets},
       {"repeats", cfg.repeats},
       {"split_seed", cfg.split_seed},
       {"repeat_seed_base", cfg.repeat_seed_base},
       {"ridge_lambda", cfg.hyper.ridge_lambda},
       {"gda_eps", cfg.hyper.gda_eps},
       {"class_filter", cfg.class_filter},
       {"filter_backbone_tag", cfg.filter_backbone_tag},
       {"filter_lora_rank", cfg.filter_lora_rank},
       {"filter_step", cfg.filter_step}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& cfg) {
  if (j.contains("predictor")) {
    cfg.predictor = predictor_kind_from_string(j.at("predictor").get<std::string>());
  }
  if (j.contains("aggregation")) {
    cfg.aggregation = aggregation_from_string(j.at("aggregation").get<std::string>());
  }
  if (j.contains("kinds")) {
    cfg.kinds.clear();
    for (const auto& kind : j.at("kinds")) {
      cfg.kinds.push_back(matrix_kind_from_string(kind.get<std::string>()));
    }
  }
  cfg.n_train_sets = j.value("n_train_sets", cfg.n_train_sets);
  cfg.train_pool_sets = j.value("train_pool_sets", cfg.train_pool_sets);
  cfg.repeats = j.value("repeats", cfg.repeats);
  cfg.split_seed = j.value("split_seed", cfg.split_seed);
  cfg.repeat_seed_base = j.value("repeat_seed_base", cfg.repeat_seed_base);
  cfg.hyper.ridge_lambda = j.value("ridge_lambda", cfg.hyper.ridge_lambda);
  cfg.hyper.gda_eps = j.value("gda_eps", cfg.hyper.gda_eps);
  cfg.class_filter = j.value("class_filter", cfg.class_filter);
  cfg.filter_backbone_tag = j.value("filter_backbone_tag", cfg.filter_backbone_tag);
  cfg.filter_lora_rank = j.value("filter_lora_rank", cfg.filter_lora_rank);
  cfg.filter_step = j.value("filter_step", cfg.filter_step);
}

// Seeded group-level split. Group keys are sorted, shuffled by the fixed
// MCG-fed Fisher-Yates pass, and the first n_train_sets keys become the
// train side; no group ever straddles the boundary.
inline std::pair<SnapshotIndex, SnapshotIndex> split_by_micro_dataset(
    const SnapshotIndex& index, std::uint64_t seed, int n_train_sets) {
  std::vector<std::string> keys;
  for (const auto& [key, members] : index.groups) keys.push_back(key);
  if (static_cast<int>(keys.size()) <= n_train_sets || n_train_sets < 1) {
    raise(ErrorCode::TooFewGroups,
          "need more than " + std::to_string(n_train_sets) + " micro-dataset groups, have " +
              std::to_string(keys.size()));
  }
  Mcg64 rng(seed);
  fisher_yates(keys, rng);
  const std::vector<std::string> train_keys(keys.begin(), keys.begin() + n_train_sets);
  const std::vector<std::string> test_keys(keys.begin() + n_train_sets, keys.end());
  return {select_groups(index, train_keys), select_groups(index, test_keys)};
}

namespace detail {

inline SnapshotIndex apply_filters(const SnapshotIndex& index, const ExperimentConfig& cfg) {
  SnapshotIndex out;
  out.source_digest = index.source_digest;
  for (const IndexEntry& entry : index.entries) {
    if (!cfg.filter_backbone_tag.empty() && entry.meta.backbone_tag != cfg.filter_backbone_tag) {
      continue;
    }
    if (cfg.filter_lora_rank > 0 && entry.meta.lora_rank != cfg.filter_lora_rank) continue;
    if (cfg.filter_step >= 0 && entry.meta.step != cfg.filter_step) continue;
    if (!cfg.class_filter.empty()) {
      if (!entry.label) continue;
      if (std::find(cfg.class_filter.begin(), cfg.class_filter.end(), *entry.label) ==
          cfg.class_filter.end()) {
        continue;
      }
    }
    out.groups[entry.meta.micro_dataset_id].push_back(out.entries.size());
    out.entries.push_back(entry);
  }
  if (out.entries.empty()) {
    raise(ErrorCode::ConfigError, "filters select no snapshots");
  }
  return out;
}

struct CachedCorpus {
  std::vector<SlotFeatures> features;  // entry order
  std::vector<int> labels;
  std::vector<std::string> model_ids;
  ModelTopology topology;
};

inline CachedCorpus load_and_extract(const SnapshotIndex& index,
                                     const std::vector<MatrixKind>& kinds,
                                     unsigned n_threads) {
  CachedCorpus cache;
  cache.features.resize(index.entries.size());
  cache.labels.resize(index.entries.size());
  cache.model_ids.resize(index.entries.size());
  std::vector<ModelTopology> topologies(index.entries.size());
  parallel_for(index.entries.size(), n_threads, [&](std::size_t i) {
    const IndexEntry& entry = index.entries[i];
    if (!entry.label) {
      raise(ErrorCode::UnlabeledSnapshot, "snapshot '" + entry.path.string() + "' has no label");
    }
    const ModelSnapshot snapshot = load_entry(entry);
    topologies[i] = topology_of(snapshot);
    cache.features[i] = extract_features(snapshot, kinds);
    cache.labels[i] = *entry.label;
    cache.model_ids[i] = entry.path.string();
  });
  for (std::size_t i = 1; i < topologies.size(); ++i) {
    if (topologies[i].layer_count != topologies[0].layer_count ||
        topologies[i].rank != topologies[0].rank ||
        topologies[i].layer_paths != topologies[0].layer_paths) {
      raise(ErrorCode::InconsistentTopology,
            "snapshot '" + cache.model_ids[i] + "' does not match the collection topology");
    }
  }
  if (!topologies.empty()) cache.topology = topologies[0];
  return cache;
}

}  // namespace detail

// Full experiment: fixed split, repeated subset sampling, fit, evaluate.
inline Report run_experiment(const ExperimentConfig& cfg, const SnapshotIndex& index,
                             unsigned n_threads = 1) {
  if (cfg.n_train_sets < 1 || cfg.repeats < 1) {
    raise(ErrorCode::ConfigError, "n_train_sets and repeats must be >= 1");
  }
  if (cfg.n_train_sets > cfg.train_pool_sets) {
    raise(ErrorCode::ConfigError, "n_train_sets cannot exceed train_pool_sets");
  }
  const SnapshotIndex filtered = detail::apply_filters(index, cfg);
  const auto [train_pool, test_side] =
      split_by_micro_dataset(filtered, cfg.split_seed, cfg.train_pool_sets);

  const std::vector<MatrixKind> kinds = effective_kinds(cfg);
  const detail::CachedCorpus train_cache =
      detail::load_and_extract(train_pool, kinds, n_threads);
  const detail::CachedCorpus test_cache = detail::load_and_extract(test_side, kinds, n_threads);
  if (train_cache.topology.layer_paths != test_cache.topology.layer_paths) {
    raise(ErrorCode::InconsistentTopology, "train and test topologies disagree");
  }

  std::vector<std::string> pool_keys;
  for (const auto& [key, members] : train_pool.groups) pool_keys.push_back(key);

  Report report;
  report.config = cfg;
  report.tool_version = kToolVersion;
  report.manifest_digest = index.source_digest;

  std::map<SlotKey, SlotVoteAccuracy> slot_votes;
  for (int rep = 0; rep < cfg.repeats; ++rep) {
    std::vector<std::string> keys = pool_keys;
    Mcg64 rng(cfg.repeat_seed_base + static_cast<std::uint64_t>(rep));
    fisher_yates(keys, rng);
    keys.resize(static_cast<std::size_t>(cfg.n_train_sets));
    std::sort(keys.begin(), keys.end());

    // assemble training tables for the drawn groups, manifest order
    std::vector<SlotFeatures> rows;
    std::vector<int> labels;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < train_pool.entries.size(); ++i) {
      const std::string& group = train_pool.entries[i].meta.micro_dataset_id;
      if (!std::binary_search(keys.begin(), keys.end(), group)) continue;
      rows.push_back(train_cache.features[i]);
      labels.push_back(train_cache.labels[i]);
      ids.push_back(train_cache.model_ids[i]);
    }
    const FeatureTableSet tables =
        detail::assemble_tables(rows, labels, ids, train_cache.topology);
    const EnsembleModel model = fit(cfg.predictor, cfg.aggregation, tables, cfg.hyper);

    std::vector<int> preds(test_cache.features.size());
    std::vector<std::vector<Vote>> votes(test_cache.features.size());
    parallel_for(test_cache.features.size(), n_threads, [&](std::size_t i) {
      Prediction p = predict_from_features(model, test_cache.features[i]);
      preds[i] = p.label;
      votes[i] = std::move(p.votes);
    });

    std::vector<int> class_set = test_cache.labels;
    class_set.insert(class_set.end(), train_cache.labels.begin(), train_cache.labels.end());
    report.repeats.push_back(evaluate(preds, test_cache.labels, class_set));

    for (std::size_t i = 0; i < votes.size(); ++i) {
      for (const Vote& vote : votes[i]) {
        SlotVoteAccuracy& acc = slot_votes[vote.slot];
        acc.slot = vote.slot;
        ++acc.total;
        if (vote.label == test_cache.labels[i]) ++acc.correct;
      }
    }
  }

  if (cfg.repeats >= 2) report.aggregate = aggregate(report.repeats);
  for (const auto& [slot, acc] : slot_votes) report.slot_votes.push_back(acc);

  // digest over everything reproducible (timestamp stays out)
  nlohmann::json body;
  to_json(body["config"], report.config);
  body["manifest_digest"] = report.manifest_digest;
  nlohmann::json reps = nlohmann::json::array();
  for (const EvalResult& r : report.repeats) {
    reps.push_back({{"mae", r.mae},
                    {"mape", r.mape},
                    {"accuracy", r.accuracy},
                    {"n_samples", r.n_samples},
                    {"class_set", r.class_set},
                    {"confusion", r.confusion}});
  }
  body["repeats"] = std::move(reps);
  report.deterministic_digest = detail::hex64(fnv1a64(body.dump()));
  return report;
}

enum class ReportFormat { StructuredText, CsvSummary };

namespace detail {

inline std::string format_fixed(double v, int places) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", places, v);
  return buf;
}

}  // namespace detail

inline nlohmann::json report_to_json(const Report& report) {
  nlohmann::json j;
  j["format"] = "lora-forensics-report";
  j["version"] = 1;
  to_json(j["config"], report.config);
  nlohmann::json reps = nlohmann::json::array();
  for (const EvalResult& r : report.repeats) {
    reps.push_back({{"mae", r.mae},
                    {"mape", r.mape},
                    {"accuracy", r.accuracy},
                    {"n_samples", r.n_samples},
                    {"class_set", r.class_set},
                    {"confusion", r.confusion}});
  }
  j["repeats"] = std::move(reps);
  if (report.aggregate) {
    const AggregateResult& a = *report.aggregate;
    j["aggregate"] = {{"repeat_count", a.repeat_count},
                      {"mae", {{"mean", a.mae.mean}, {"std", a.mae.std_dev}}},
                      {"mape", {{"mean", a.mape.mean}, {"std", a.mape.std_dev}}},
                      {"accuracy", {{"mean", a.accuracy.mean}, {"std", a.accuracy.std_dev}}}};
  } else {
    j["aggregate"] = nullptr;
  }
  nlohmann::json slots = nlohmann::json::array();
  for (const SlotVoteAccuracy& acc : report.slot_votes) {
    slots.push_back({{"layer", acc.slot.layer_index},
                     {"kind", to_string(acc.slot.kind)},
                     {"correct", acc.correct},
                     {"total", acc.total}});
  }
  j["slot_votes"] = std::move(slots);
  j["provenance"] = {{"tool_version", report.tool_version},
                     {"timestamp", report.timestamp},
                     {"manifest_digest", report.manifest_digest},
                     {"deterministic_digest", report.deterministic_digest}};
  return j;
}

inline void export_report(const Report& report, const std::filesystem::path& path,
                          ReportFormat format) {
  if (format == ReportFormat::StructuredText) {
    detail::write_file_atomic(path, report_to_json(report).dump(2) + "\n");
    return;
  }
  std::string csv = "repeat,mae,mape,accuracy\n";
  for (std::size_t i = 0; i < report.repeats.size(); ++i) {
    const EvalResult& r = report.repeats[i];
    csv += std::to_string(i + 1) + "," + detail::format_fixed(r.mae, 6) + "," +
           detail::format_fixed(r.mape, 6) + "," + detail::format_fixed(r.accuracy, 6) + "\n";
  }
  double mae = 0.0, mape = 0.0, accuracy = 0.0;
  if (report.aggregate) {
    mae = report.aggregate->mae.mean;
    mape = report.aggregate->mape.mean;
    accuracy = report.aggregate->accuracy.mean;
  } else if (!report.repeats.empty()) {
    mae = report.repeats.front().mae;
    mape = report.repeats.front().mape;
    accuracy = report.repeats.front().accuracy;
  }
  csv += "aggregate," + detail::format_fixed(mae, 6) + "," + detail::format_fixed(mape, 6) +
         "," + detail::format_fixed(accuracy, 6) + "\n";
  detail::write_file_atomic(path, csv);
}

}  // namespace lf
