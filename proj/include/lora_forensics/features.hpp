// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <compare>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "lora_forensics/error.hpp"
#include "lora_forensics/manifest.hpp"
#include "lora_forensics/parallel.hpp"
#include "lora_forensics/snapshot.hpp"
#include "lora_forensics/spectral.hpp"

namespace lf {

// Which view of a layer feeds the classifier: the factor spectra, the
// product spectrum, or the scalar sum-of-squares statistic.
enum class MatrixKind { A, B, BA, FROB };

inline const char* to_string(MatrixKind kind) {
  switch (kind) {
    case MatrixKind::A: return "A";
    case MatrixKind::B: return "B";
    case MatrixKind::BA: return "BA";
    case MatrixKind::FROB: return "FROB";
  }
  return "?";
}

inline MatrixKind matrix_kind_from_string(const std::string& text) {
  if (text == "A") return MatrixKind::A;
  if (text == "B") return MatrixKind::B;
  if (text == "BA") return MatrixKind::BA;
  if (text == "FROB") return MatrixKind::FROB;
  raise(ErrorCode::ConfigError, "unknown matrix kind '" + text + "'");
}

// One (layer, kind) position; each slot hosts an independent classifier.
struct SlotKey {
  std::size_t layer_index = 0;
  MatrixKind kind = MatrixKind::A;

  auto operator<=>(const SlotKey&) const = default;
};

inline std::string to_string(const SlotKey& slot) {
  return "layer " + std::to_string(slot.layer_index) + "/" + to_string(slot.kind);
}

// Canonical kind list: sorted by enum order, deduplicated, non-empty.
inline std::vector<MatrixKind> canonical_kinds(std::vector<MatrixKind> kinds) {
  std::sort(kinds.begin(), kinds.end());
  kinds.erase(std::unique(kinds.begin(), kinds.end()), kinds.end());
  if (kinds.empty()) {
    raise(ErrorCode::ConfigError, "at least one matrix kind is required");
  }
  return kinds;
}

using SlotFeatures = std::vector<std::pair<SlotKey, std::vector<double>>>;

// Per-layer, per-kind feature vectors, ordered by (layer_index, kind).
// Spectra keep their raw magnitudes; the magnitude is the signal.
inline SlotFeatures extract_features(const ModelSnapshot& snapshot,
                                     const std::vector<MatrixKind>& kinds) {
  const std::vector<MatrixKind> wanted = canonical_kinds(kinds);
  SlotFeatures features;
  features.reserve(snapshot.layers.size() * wanted.size());
  for (std::size_t li = 0; li < snapshot.layers.size(); ++li) {
    const LoraLayerSnapshot& layer = snapshot.layers[li];
    for (MatrixKind kind : wanted) {
      const SlotKey slot{li, kind};
      try {
        std::vector<double> vec;
        switch (kind) {
          case MatrixKind::A: vec = factor_spectrum(layer.a); break;
          case MatrixKind::B: vec = factor_spectrum(layer.b); break;
          case MatrixKind::BA: vec = product_spectrum(layer.b, layer.a); break;
          case MatrixKind::FROB: vec = {frobenius_stat(layer.b, layer.a)}; break;
        }
        features.emplace_back(slot, std::move(vec));
      } catch (const Error& e) {
        raise(e.code(), std::string(e.what()) + " [" + to_string(slot) + ", '" +
                            layer.layer_path + "']");
      }
    }
  }
  return features;
}

struct FeatureRow {
  std::vector<double> features;
  int label = 0;
  std::string model_id;
};

struct FeatureTable {
  SlotKey slot;
  std::size_t dim = 0;
  std::vector<FeatureRow> rows;
};

struct ModelTopology {
  std::size_t layer_count = 0;
  std::size_t rank = 0;
  std::vector<std::string> layer_paths;
};

inline ModelTopology topology_of(const ModelSnapshot& snapshot) {
  ModelTopology topo;
  topo.layer_count = snapshot.layers.size();
  topo.rank = snapshot.layers.empty() ? 0 : snapshot.layers.front().rank();
  for (const LoraLayerSnapshot& layer : snapshot.layers) {
    topo.layer_paths.push_back(layer.layer_path);
  }
  return topo;
}

struct FeatureTableSet {
  std::vector<FeatureTable> tables;  // ordered by slot
  ModelTopology topology;
};

namespace detail {

// Stacks per-model slot features into per-slot tables, preserving row order.
inline FeatureTableSet assemble_tables(const std::vector<SlotFeatures>& per_model,
                                       const std::vector<int>& labels,
                                       const std::vector<std::string>& model_ids,
                                       const ModelTopology& topology) {
  FeatureTableSet set;
  set.topology = topology;
  if (per_model.empty()) {
    raise(ErrorCode::EmptyTable, "no snapshots to assemble");
  }
  const SlotFeatures& first = per_model.front();
  set.tables.resize(first.size());
  for (std::size_t s = 0; s < first.size(); ++s) {
    set.tables[s].slot = first[s].first;
    set.tables[s].dim = first[s].second.size();
    set.tables[s].rows.reserve(per_model.size());
  }
  for (std::size_t mi = 0; mi < per_model.size(); ++mi) {
    const SlotFeatures& feats = per_model[mi];
    if (feats.size() != first.size()) {
      raise(ErrorCode::InconsistentTopology,
            "snapshot '" + model_ids[mi] + "' has a different slot count");
    }
    for (std::size_t s = 0; s < feats.size(); ++s) {
      if (feats[s].first != set.tables[s].slot ||
          feats[s].second.size() != set.tables[s].dim) {
        raise(ErrorCode::InconsistentTopology,
              "snapshot '" + model_ids[mi] + "' disagrees at " + to_string(set.tables[s].slot));
      }
      set.tables[s].rows.push_back({feats[s].second, labels[mi], model_ids[mi]});
    }
  }
  return set;
}

}  // namespace detail

// Labeled feature tables for every (layer, kind) slot across an indexed
// snapshot collection. Row order follows the manifest regardless of how the
// extraction work is scheduled.
inline FeatureTableSet build_tables(const SnapshotIndex& index,
                                    const std::vector<MatrixKind>& kinds,
                                    unsigned n_threads = 1,
                                    const SnapshotNaming& naming = {}) {
  const std::vector<MatrixKind> wanted = canonical_kinds(kinds);
  if (index.entries.empty()) {
    raise(ErrorCode::EmptyTable, "index holds no snapshots");
  }
  std::vector<SlotFeatures> per_model(index.entries.size());
  std::vector<int> labels(index.entries.size());
  std::vector<std::string> model_ids(index.entries.size());
  std::vector<ModelTopology> topologies(index.entries.size());
  parallel_for(index.entries.size(), n_threads, [&](std::size_t i) {
    const IndexEntry& entry = index.entries[i];
    if (!entry.label) {
      raise(ErrorCode::UnlabeledSnapshot,
            "snapshot '" + entry.path.string() + "' has no label");
    }
    const ModelSnapshot snapshot = load_entry(entry, naming);
    topologies[i] = topology_of(snapshot);
    per_model[i] = extract_features(snapshot, wanted);
    labels[i] = *entry.label;
    model_ids[i] = entry.path.string();
  });
  for (std::size_t i = 1; i < topologies.size(); ++i) {
    if (topologies[i].layer_count != topologies[0].layer_count ||
        topologies[i].rank != topologies[0].rank ||
        topologies[i].layer_paths != topologies[0].layer_paths) {
      raise(ErrorCode::InconsistentTopology,
            "snapshot '" + model_ids[i] + "' does not match the collection topology");
    }
  }
  return detail::assemble_tables(per_model, labels, model_ids, topologies[0]);
}

// Optional on-disk cache: one container per snapshot, vectors keyed
// "slot.<layer>.<kind>". F32 storage.
inline void write_feature_cache(const SlotFeatures& features,
                                const std::filesystem::path& path) {
  std::map<std::string, TensorRecord> records;
  for (const auto& [slot, vec] : features) {
    TensorRecord rec;
    rec.name = "slot." + std::to_string(slot.layer_index) + "." + to_string(slot.kind);
    rec.dtype = Dtype::f32;
    rec.shape = {1, static_cast<std::int64_t>(vec.size())};
    rec.data = vec;
    records.emplace(rec.name, std::move(rec));
  }
  write_container(records, path);
}

inline SlotFeatures read_feature_cache(const std::filesystem::path& path) {
  SlotFeatures features;
  for (const auto& [name, rec] : read_container(path)) {
    std::string rest = name;
    if (rest.rfind("slot.", 0) != 0) {
      raise(ErrorCode::MalformedHeader, "unexpected cache key '" + name + "'");
    }
    rest = rest.substr(5);
    const std::size_t dot = rest.find('.');
    if (dot == std::string::npos) {
      raise(ErrorCode::MalformedHeader, "unexpected cache key '" + name + "'");
    }
    SlotKey slot;
    slot.layer_index = static_cast<std::size_t>(std::stoull(rest.substr(0, dot)));
    slot.kind = matrix_kind_from_string(rest.substr(dot + 1));
    features.emplace_back(slot, rec.data);
  }
  std::sort(features.begin(), features.end(),
            [](const auto& lhs, const auto& rhs) { return lhs.first < rhs.first; });
  return features;
}

}  // namespace lf
