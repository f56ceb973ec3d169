// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lora_forensics/error.hpp"
#include "lora_forensics/features.hpp"
#include "lora_forensics/matrix.hpp"

namespace lf {

enum class PredictorKind { LayerNN, FrobeniusNN, GDA, Ridge, FullModelNN };
enum class Aggregation { Majority, Average };

inline const char* to_string(PredictorKind kind) {
  switch (kind) {
    case PredictorKind::LayerNN: return "layer_nn";
    case PredictorKind::FrobeniusNN: return "frobenius_nn";
    case PredictorKind::GDA: return "gda";
    case PredictorKind::Ridge: return "ridge";
    case PredictorKind::FullModelNN: return "full_model_nn";
  }
  return "?";
}

inline PredictorKind predictor_kind_from_string(const std::string& text) {
  if (text == "layer_nn") return PredictorKind::LayerNN;
  if (text == "frobenius_nn") return PredictorKind::FrobeniusNN;
  if (text == "gda") return PredictorKind::GDA;
  if (text == "ridge") return PredictorKind::Ridge;
  if (text == "full_model_nn") return PredictorKind::FullModelNN;
  raise(ErrorCode::ConfigError, "unknown predictor '" + text + "'");
}

inline const char* to_string(Aggregation agg) {
  return agg == Aggregation::Majority ? "majority" : "average";
}

inline Aggregation aggregation_from_string(const std::string& text) {
  if (text == "majority") return Aggregation::Majority;
  if (text == "average") return Aggregation::Average;
  raise(ErrorCode::ConfigError, "unknown aggregation '" + text + "'");
}

struct Hyper {
  double ridge_lambda = 1.0;
  double gda_eps = 1e-6;
};

struct Vote {
  SlotKey slot;
  int label = 0;
};

// Fitted state for one slot. Which fields are live depends on the predictor
// kind; all variants keep the full training row set small enough that
// storing it verbatim is the simplest faithful representation.
struct SlotClassifier {
  SlotKey slot;
  std::size_t dim = 0;
  // nearest neighbor
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  // GDA: per-class means (class_set order) and a shared diagonal variance
  std::vector<std::vector<double>> class_means;
  std::vector<double> variance;
  // ridge
  std::vector<double> coef;
  double intercept = 0.0;
};

struct EnsembleModel {
  PredictorKind kind = PredictorKind::LayerNN;
  Aggregation aggregation = Aggregation::Majority;
  std::vector<MatrixKind> kinds;
  std::vector<int> class_set;  // sorted ascending
  ModelTopology topology;
  Hyper hyper;
  std::vector<SlotClassifier> slots;  // slot order; single entry for FullModelNN
};

struct Prediction {
  int label = 0;
  std::vector<Vote> votes;
};

// Index of the training row nearest in Euclidean distance; distance ties go
// to the lowest row index.
inline std::pair<int, std::size_t> nearest_neighbor(
    const std::vector<double>& query, const std::vector<std::vector<double>>& rows,
    const std::vector<int>& labels) {
  if (rows.empty()) {
    raise(ErrorCode::EmptyTable, "nearest neighbor over an empty table");
  }
  std::size_t best = 0;
  double best_dist = -1.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != query.size()) {
      raise(ErrorCode::DimensionMismatch, "query/row dimensions disagree");
    }
    double dist = 0.0;
    for (std::size_t j = 0; j < query.size(); ++j) {
      const double diff = query[j] - rows[i][j];
      dist += diff * diff;
    }
    if (best_dist < 0.0 || dist < best_dist) {
      best_dist = dist;
      best = i;
    }
  }
  return {labels[best], best};
}

inline std::pair<int, std::size_t> nearest_neighbor(const std::vector<double>& query,
                                                    const std::vector<FeatureRow>& rows) {
  std::vector<std::vector<double>> vecs;
  std::vector<int> labels;
  vecs.reserve(rows.size());
  labels.reserve(rows.size());
  for (const FeatureRow& row : rows) {
    vecs.push_back(row.features);
    labels.push_back(row.label);
  }
  return nearest_neighbor(query, vecs, labels);
}

// Negative scaled squared distance to each class mean under the shared
// diagonal covariance; equal priors, so the argmax is the vote.
inline std::vector<double> gda_posterior(const SlotClassifier& classifier,
                                         const std::vector<double>& query) {
  if (query.size() != classifier.dim) {
    raise(ErrorCode::DimensionMismatch, "query dimension disagrees with classifier");
  }
  std::vector<double> scores(classifier.class_means.size());
  for (std::size_t c = 0; c < classifier.class_means.size(); ++c) {
    double s = 0.0;
    for (std::size_t j = 0; j < classifier.dim; ++j) {
      const double diff = query[j] - classifier.class_means[c][j];
      s += diff * diff / classifier.variance[j];
    }
    scores[c] = -s;
  }
  return scores;
}

// Closest class to a continuous value; exact midpoints go to the smaller
// class (class_set is ascending, first win keeps it).
inline int snap_to_class(double value, const std::vector<int>& class_set) {
  int best = class_set.front();
  double best_dist = std::fabs(value - best);
  for (std::size_t i = 1; i < class_set.size(); ++i) {
    const double dist = std::fabs(value - class_set[i]);
    if (dist < best_dist) {
      best_dist = dist;
      best = class_set[i];
    }
  }
  return best;
}

namespace detail {

inline std::vector<int> collect_class_set(const FeatureTable& table) {
  std::vector<int> classes;
  for (const FeatureRow& row : table.rows) classes.push_back(row.label);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  return classes;
}

inline SlotClassifier fit_nn_slot(const FeatureTable& table) {
  SlotClassifier c;
  c.slot = table.slot;
  c.dim = table.dim;
  for (const FeatureRow& row : table.rows) {
    c.rows.push_back(row.features);
    c.labels.push_back(row.label);
  }
  return c;
}

inline SlotClassifier fit_gda_slot(const FeatureTable& table,
                                   const std::vector<int>& class_set, double gda_eps) {
  SlotClassifier c;
  c.slot = table.slot;
  c.dim = table.dim;
  c.class_means.assign(class_set.size(), std::vector<double>(table.dim, 0.0));
  std::vector<std::size_t> counts(class_set.size(), 0);
  for (const FeatureRow& row : table.rows) {
    const auto it = std::lower_bound(class_set.begin(), class_set.end(), row.label);
    const std::size_t ci = static_cast<std::size_t>(it - class_set.begin());
    for (std::size_t j = 0; j < table.dim; ++j) c.class_means[ci][j] += row.features[j];
    ++counts[ci];
  }
  for (std::size_t ci = 0; ci < class_set.size(); ++ci) {
    if (counts[ci] == 0) {
      raise(ErrorCode::EmptyClass, "class " + std::to_string(class_set[ci]) +
                                       " has no rows at " + to_string(table.slot));
    }
    for (double& v : c.class_means[ci]) v /= static_cast<double>(counts[ci]);
  }
  // pooled within-class variance per coordinate, floored
  c.variance.assign(table.dim, 0.0);
  for (const FeatureRow& row : table.rows) {
    const auto it = std::lower_bound(class_set.begin(), class_set.end(), row.label);
    const std::size_t ci = static_cast<std::size_t>(it - class_set.begin());
    for (std::size_t j = 0; j < table.dim; ++j) {
      const double diff = row.features[j] - c.class_means[ci][j];
      c.variance[j] += diff * diff;
    }
  }
  for (double& v : c.variance) {
    v = std::max(v / static_cast<double>(table.rows.size()), gda_eps);
  }
  return c;
}

// Least squares of label on features with an L2 penalty on the slopes only;
// centering keeps the intercept unpenalized.
inline SlotClassifier fit_ridge_slot(const FeatureTable& table, double lambda) {
  SlotClassifier c;
  c.slot = table.slot;
  c.dim = table.dim;
  const std::size_t n = table.rows.size();
  const std::size_t p = table.dim;
  std::vector<double> xmean(p, 0.0);
  double ymean = 0.0;
  for (const FeatureRow& row : table.rows) {
    for (std::size_t j = 0; j < p; ++j) xmean[j] += row.features[j];
    ymean += row.label;
  }
  for (double& v : xmean) v /= static_cast<double>(n);
  ymean /= static_cast<double>(n);

  Matrix normal(p, p);
  std::vector<double> rhs(p, 0.0);
  for (const FeatureRow& row : table.rows) {
    std::vector<double> xc(p);
    for (std::size_t j = 0; j < p; ++j) xc[j] = row.features[j] - xmean[j];
    const double yc = row.label - ymean;
    for (std::size_t j = 0; j < p; ++j) {
      rhs[j] += xc[j] * yc;
      for (std::size_t j2 = j; j2 < p; ++j2) normal(j, j2) += xc[j] * xc[j2];
    }
  }
  for (std::size_t j = 0; j < p; ++j) {
    normal(j, j) += lambda;
    for (std::size_t j2 = j + 1; j2 < p; ++j2) normal(j2, j) = normal(j, j2);
  }
  c.coef = solve_linear(std::move(normal), std::move(rhs));
  double dot = 0.0;
  for (std::size_t j = 0; j < p; ++j) dot += xmean[j] * c.coef[j];
  c.intercept = ymean - dot;
  return c;
}

}  // namespace detail

// Fits one classifier per slot (or one global row table for FullModelNN).
inline EnsembleModel fit(PredictorKind kind, Aggregation aggregation,
                         const FeatureTableSet& set, const Hyper& hyper = {}) {
  if (set.tables.empty()) {
    raise(ErrorCode::EmptyTable, "no feature tables to fit");
  }
  const std::size_t n_rows = set.tables.front().rows.size();
  if (n_rows == 0) {
    raise(ErrorCode::EmptyTable, "feature tables hold no rows");
  }
  std::vector<MatrixKind> kinds;
  for (const FeatureTable& table : set.tables) {
    if (table.rows.size() != n_rows) {
      raise(ErrorCode::InconsistentTables, "tables disagree on row count");
    }
    for (std::size_t i = 0; i < n_rows; ++i) {
      if (table.rows[i].model_id != set.tables.front().rows[i].model_id ||
          table.rows[i].label != set.tables.front().rows[i].label) {
        raise(ErrorCode::InconsistentTables, "tables disagree on row order");
      }
    }
    if (kind == PredictorKind::FrobeniusNN && table.slot.kind != MatrixKind::FROB) {
      raise(ErrorCode::InconsistentTables,
            "the scalar-statistic baseline expects FROB tables only");
    }
    kinds.push_back(table.slot.kind);
  }

  EnsembleModel model;
  model.kind = kind;
  model.aggregation = aggregation;
  model.kinds = canonical_kinds(kinds);
  model.class_set = detail::collect_class_set(set.tables.front());
  model.topology = set.topology;
  model.hyper = hyper;

  if (kind == PredictorKind::FullModelNN) {
    SlotClassifier global;
    global.slot = set.tables.front().slot;
    global.rows.assign(n_rows, {});
    global.labels.resize(n_rows);
    for (const FeatureTable& table : set.tables) {
      for (std::size_t i = 0; i < n_rows; ++i) {
        global.rows[i].insert(global.rows[i].end(), table.rows[i].features.begin(),
                              table.rows[i].features.end());
      }
    }
    for (std::size_t i = 0; i < n_rows; ++i) {
      global.labels[i] = set.tables.front().rows[i].label;
    }
    global.dim = global.rows.front().size();
    model.slots.push_back(std::move(global));
    return model;
  }

  model.slots.reserve(set.tables.size());
  for (const FeatureTable& table : set.tables) {
    switch (kind) {
      case PredictorKind::LayerNN:
      case PredictorKind::FrobeniusNN:
        model.slots.push_back(detail::fit_nn_slot(table));
        break;
      case PredictorKind::GDA:
        model.slots.push_back(detail::fit_gda_slot(table, model.class_set, hyper.gda_eps));
        break;
      case PredictorKind::Ridge:
        model.slots.push_back(detail::fit_ridge_slot(table, hyper.ridge_lambda));
        break;
      case PredictorKind::FullModelNN:
        break;  // handled above
    }
  }
  return model;
}

namespace detail {

inline int aggregate_votes(const std::vector<Vote>& votes, Aggregation aggregation,
                           const std::vector<int>& class_set) {
  if (aggregation == Aggregation::Majority) {
    // modal label, ties to the smallest (map iteration is ascending)
    std::map<int, std::size_t> counts;
    for (const Vote& vote : votes) ++counts[vote.label];
    int best = votes.front().label;
    std::size_t best_count = 0;
    for (const auto& [label, count] : counts) {
      if (count > best_count) {
        best_count = count;
        best = label;
      }
    }
    return best;
  }
  double mean = 0.0;
  for (const Vote& vote : votes) mean += vote.label;
  mean /= static_cast<double>(votes.size());
  return snap_to_class(mean, class_set);
}

}  // namespace detail

// Prediction from pre-extracted features (slot order must match the model).
inline Prediction predict_from_features(const EnsembleModel& model,
                                        const SlotFeatures& features) {
  if (model.kind == PredictorKind::FullModelNN) {
    const SlotClassifier& global = model.slots.front();
    std::vector<double> query;
    query.reserve(global.dim);
    for (const auto& [slot, vec] : features) {
      query.insert(query.end(), vec.begin(), vec.end());
    }
    if (query.size() != global.dim) {
      raise(ErrorCode::TopologyMismatch, "concatenated feature width disagrees with model");
    }
    const auto [label, index] = nearest_neighbor(query, global.rows, global.labels);
    (void)index;
    return {label, {Vote{global.slot, label}}};
  }

  if (features.size() != model.slots.size()) {
    raise(ErrorCode::TopologyMismatch, "slot count disagrees with model");
  }
  Prediction out;
  out.votes.reserve(model.slots.size());
  for (std::size_t s = 0; s < model.slots.size(); ++s) {
    const SlotClassifier& classifier = model.slots[s];
    const auto& [slot, vec] = features[s];
    if (slot != classifier.slot || vec.size() != classifier.dim) {
      raise(ErrorCode::TopologyMismatch, "feature at " + to_string(slot) +
                                             " disagrees with model slot " +
                                             to_string(classifier.slot));
    }
    int label = 0;
    switch (model.kind) {
      case PredictorKind::LayerNN:
      case PredictorKind::FrobeniusNN:
        label = nearest_neighbor(vec, classifier.rows, classifier.labels).first;
        break;
      case PredictorKind::GDA: {
        const std::vector<double> scores = gda_posterior(classifier, vec);
        std::size_t best = 0;
        for (std::size_t c = 1; c < scores.size(); ++c) {
          if (scores[c] > scores[best]) best = c;  // ties keep the smaller class
        }
        label = model.class_set[best];
        break;
      }
      case PredictorKind::Ridge: {
        double y = classifier.intercept;
        for (std::size_t j = 0; j < classifier.dim; ++j) y += classifier.coef[j] * vec[j];
        label = snap_to_class(y, model.class_set);
        break;
      }
      case PredictorKind::FullModelNN:
        break;  // handled above
    }
    out.votes.push_back({slot, label});
  }
  out.label = detail::aggregate_votes(out.votes, model.aggregation, model.class_set);
  return out;
}

inline void check_topology(const EnsembleModel& model, const ModelSnapshot& snapshot) {
  if (snapshot.layers.size() != model.topology.layer_count) {
    raise(ErrorCode::TopologyMismatch,
          "snapshot has " + std::to_string(snapshot.layers.size()) + " layers, model expects " +
              std::to_string(model.topology.layer_count));
  }
  if (!model.topology.layer_paths.empty()) {
    for (std::size_t i = 0; i < snapshot.layers.size(); ++i) {
      if (snapshot.layers[i].layer_path != model.topology.layer_paths[i]) {
        raise(ErrorCode::TopologyMismatch,
              "layer path '" + snapshot.layers[i].layer_path + "' disagrees with model");
      }
    }
  }
}

inline Prediction predict(const EnsembleModel& model, const ModelSnapshot& snapshot) {
  check_topology(model, snapshot);
  return predict_from_features(model, extract_features(snapshot, model.kinds));
}

// ---- persistence ----------------------------------------------------------

inline constexpr const char* kModelFormatTag = "lora-forensics-model";
inline constexpr int kModelFormatVersion = 1;

inline void save_model(const EnsembleModel& model, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format"] = kModelFormatTag;
  j["version"] = kModelFormatVersion;
  j["predictor"] = to_string(model.kind);
  j["aggregation"] = to_string(model.aggregation);
  nlohmann::json kinds = nlohmann::json::array();
  for (MatrixKind kind : model.kinds) kinds.push_back(to_string(kind));
  j["kinds"] = kinds;
  j["class_set"] = model.class_set;
  j["topology"] = {{"layer_count", model.topology.layer_count},
                   {"rank", model.topology.rank},
                   {"layer_paths", model.topology.layer_paths}};
  j["hyper"] = {{"ridge_lambda", model.hyper.ridge_lambda}, {"gda_eps", model.hyper.gda_eps}};
  nlohmann::json slots = nlohmann::json::array();
  for (const SlotClassifier& c : model.slots) {
    nlohmann::json s;
    s["layer"] = c.slot.layer_index;
    s["kind"] = to_string(c.slot.kind);
    s["dim"] = c.dim;
    if (!c.rows.empty()) {
      s["rows"] = c.rows;
      s["labels"] = c.labels;
    }
    if (!c.class_means.empty()) {
      s["class_means"] = c.class_means;
      s["variance"] = c.variance;
    }
    if (!c.coef.empty() || model.kind == PredictorKind::Ridge) {
      s["coef"] = c.coef;
      s["intercept"] = c.intercept;
    }
    slots.push_back(std::move(s));
  }
  j["slots"] = std::move(slots);
  detail::write_file_atomic(path, j.dump());
}

inline EnsembleModel load_model(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = detail::read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::ModelFormatError, std::string("model file is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || j.value("format", "") != kModelFormatTag) {
    raise(ErrorCode::ModelFormatError, "not a model file");
  }
  if (j.value("version", -1) != kModelFormatVersion) {
    raise(ErrorCode::ModelFormatError,
          "unsupported model format version " + std::to_string(j.value("version", -1)));
  }
  EnsembleModel model;
  try {
    model.kind = predictor_kind_from_string(j.at("predictor").get<std::string>());
    model.aggregation = aggregation_from_string(j.at("aggregation").get<std::string>());
    for (const auto& kind : j.at("kinds")) {
      model.kinds.push_back(matrix_kind_from_string(kind.get<std::string>()));
    }
    model.class_set = j.at("class_set").get<std::vector<int>>();
    model.topology.layer_count = j.at("topology").at("layer_count").get<std::size_t>();
    model.topology.rank = j.at("topology").at("rank").get<std::size_t>();
    model.topology.layer_paths =
        j.at("topology").at("layer_paths").get<std::vector<std::string>>();
    model.hyper.ridge_lambda = j.at("hyper").at("ridge_lambda").get<double>();
    model.hyper.gda_eps = j.at("hyper").at("gda_eps").get<double>();
    for (const auto& s : j.at("slots")) {
      SlotClassifier c;
      c.slot.layer_index = s.at("layer").get<std::size_t>();
      c.slot.kind = matrix_kind_from_string(s.at("kind").get<std::string>());
      c.dim = s.at("dim").get<std::size_t>();
      if (s.contains("rows")) {
        c.rows = s.at("rows").get<std::vector<std::vector<double>>>();
        c.labels = s.at("labels").get<std::vector<int>>();
      }
      if (s.contains("class_means")) {
        c.class_means = s.at("class_means").get<std::vector<std::vector<double>>>();
        c.variance = s.at("variance").get<std::vector<double>>();
      }
      if (s.contains("coef")) {
        c.coef = s.at("coef").get<std::vector<double>>();
        c.intercept = s.at("intercept").get<double>();
      }
      model.slots.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::ModelFormatError, std::string("model file is incomplete: ") + e.what());
  }
  return model;
}

}  // namespace lf
