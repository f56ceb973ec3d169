// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "helpers.hpp"
#include "lora_forensics/predictors.hpp"

using lf::Aggregation;
using lf::FeatureTable;
using lf::FeatureTableSet;
using lf::MatrixKind;
using lf::PredictorKind;
using lf::SlotKey;

namespace {

FeatureTable make_table(SlotKey slot, const std::vector<std::vector<double>>& rows,
                        const std::vector<int>& labels) {
  FeatureTable table;
  table.slot = slot;
  table.dim = rows.front().size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    table.rows.push_back({rows[i], labels[i], "model" + std::to_string(i)});
  }
  return table;
}

FeatureTableSet single_table_set(const FeatureTable& table) {
  FeatureTableSet set;
  set.tables = {table};
  set.topology.layer_count = table.slot.layer_index + 1;
  set.topology.rank = table.dim;
  return set;
}

// Independent argmin over a materialized distance array, lowest index wins.
std::pair<int, std::size_t> scan_oracle(const std::vector<double>& query,
                                        const std::vector<std::vector<double>>& rows,
                                        const std::vector<int>& labels) {
  std::vector<double> dists(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < query.size(); ++j) {
      s += (query[j] - rows[i][j]) * (query[j] - rows[i][j]);
    }
    dists[i] = s;
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < dists.size(); ++i) {
    if (dists[i] < dists[best]) best = i;
  }
  return {labels[best], best};
}

}  // namespace

TEST_CASE("nearest_neighbor basics and tie rule") {
  const std::vector<std::vector<double>> rows = {{5, 1}, {2, 0.5}};
  const std::vector<int> labels = {1, 10};
  CHECK(lf::nearest_neighbor({4.8, 1.1}, rows, labels).first == 1);

  // equidistant: lowest row index wins
  const std::vector<std::vector<double>> mirrored = {{1, 0}, {-1, 0}};
  const auto [label, index] = lf::nearest_neighbor({0, 0}, mirrored, {3, 5});
  CHECK(label == 3);
  CHECK(index == 0);

  try {
    lf::nearest_neighbor({1.0}, {}, {});
    FAIL("expected a throw");
  } catch (const lf::Error& e) {
    CHECK(e.code() == lf::ErrorCode::EmptyTable);
  }
  try {
    lf::nearest_neighbor({1.0, 2.0, 3.0}, rows, labels);
    FAIL("expected a throw");
  } catch (const lf::Error& e) {
    CHECK(e.code() == lf::ErrorCode::DimensionMismatch);
  }
}

TEST_CASE("nearest_neighbor matches the exhaustive scan, ties included") {
  std::mt19937_64 gen(17);
  std::uniform_real_distribution<double> dist(-2, 2);
  std::uniform_int_distribution<int> label_dist(1, 6);
  std::uniform_int_distribution<std::size_t> pick(0, 99);

  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (int i = 0; i < 100; ++i) {
    rows.push_back({dist(gen), dist(gen), dist(gen), dist(gen)});
    labels.push_back(label_dist(gen));
  }
  // 50 exact duplicates (guaranteed distance ties) and 50 mirror rows
  for (int i = 0; i < 50; ++i) {
    rows.push_back(rows[pick(gen)]);
    labels.push_back(label_dist(gen));
  }
  for (int i = 0; i < 50; ++i) {
    std::vector<double> row = rows[pick(gen)];
    for (double& v : row) v = -v;
    rows.push_back(row);
    labels.push_back(label_dist(gen));
  }
  REQUIRE(rows.size() == 200);

  for (int q = 0; q < 500; ++q) {
    std::vector<double> query;
    if (q % 5 == 3) {
      query = rows[pick(gen)];  // lands exactly on a duplicated row
    } else if (q % 5 == 4) {
      query = {0, 0, 0, 0};  // equidistant to every mirror pair
    } else {
      query = {dist(gen), dist(gen), dist(gen), dist(gen)};
    }
    const auto fast = lf::nearest_neighbor(query, rows, labels);
    const auto slow = scan_oracle(query, rows, labels);
    CHECK(fast.first == slow.first);
    CHECK(fast.second == slow.second);
  }
}

TEST_CASE("majority and average aggregations follow the documented tie rules") {
  FeatureTableSet set = single_table_set(
      make_table({0, MatrixKind::FROB}, {{1.0}, {2.0}, {3.0}}, {1, 2, 3}));
  lf::EnsembleModel model = lf::fit(PredictorKind::LayerNN, Aggregation::Majority, set);

  const auto agg = [&](std::vector<int> vote_labels, Aggregation aggregation,
                       std::vector<int> class_set) {
    std::vector<lf::Vote> votes;
    for (int v : vote_labels) votes.push_back({SlotKey{0, MatrixKind::FROB}, v});
    return lf::detail::aggregate_votes(votes, aggregation, class_set);
  };

  CHECK(agg({2, 2, 3}, Aggregation::Majority, {1, 2, 3}) == 2);
  CHECK(agg({1, 2}, Aggregation::Majority, {1, 2, 3}) == 1);  // tie -> smallest
  // mean 25 snaps to 20 (tie between 20 and 30 -> smaller)
  CHECK(agg({10, 20, 20, 50}, Aggregation::Average, {1, 10, 20, 30, 40, 50}) == 20);
}

TEST_CASE("majority output is invariant under vote permutations") {
  std::mt19937_64 gen(43);
  std::uniform_int_distribution<int> label(1, 5);
  const std::vector<int> classes = {1, 2, 3, 4, 5};
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<lf::Vote> votes;
    for (int i = 0; i < 17; ++i) votes.push_back({SlotKey{0, MatrixKind::A}, label(gen)});
    const int base = lf::detail::aggregate_votes(votes, Aggregation::Majority, classes);
    std::shuffle(votes.begin(), votes.end(), gen);
    CHECK(lf::detail::aggregate_votes(votes, Aggregation::Majority, classes) == base);
  }
}

TEST_CASE("snap_to_class picks the nearest class, midpoints go down") {
  const std::vector<int> classes = {1, 10, 20, 30, 40, 50};
  CHECK(lf::snap_to_class(24.0, classes) == 20);
  CHECK(lf::snap_to_class(25.0, classes) == 20);
  CHECK(lf::snap_to_class(26.0, classes) == 30);
  CHECK(lf::snap_to_class(-7.0, classes) == 1);
  CHECK(lf::snap_to_class(99.0, classes) == 50);
}

TEST_CASE("GDA matches a direct log-density evaluation and honors tie rules") {
  std::mt19937_64 gen(19);
  std::uniform_real_distribution<double> dist(-1, 1);
  const std::size_t dim = 5;
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    std::vector<double> row(dim);
    const int label = i % 2 ? 2 : 7;
    for (double& v : row) v = dist(gen) + (label == 2 ? 0.0 : 3.0);
    rows.push_back(row);
    labels.push_back(label);
  }
  FeatureTableSet set = single_table_set(make_table({0, MatrixKind::A}, rows, labels));
  const lf::EnsembleModel model = lf::fit(PredictorKind::GDA, Aggregation::Majority, set);
  const lf::SlotClassifier& classifier = model.slots.front();

  for (int q = 0; q < 100; ++q) {
    std::vector<double> query(dim);
    for (double& v : query) v = 4.0 * dist(gen);
    const std::vector<double> scores = lf::gda_posterior(classifier, query);

    // direct Gaussian log density with the fitted parameters
    double shared = 0.0;
    for (double v : classifier.variance) shared += std::log(2.0 * 3.14159265358979323846 * v);
    for (std::size_t c = 0; c < scores.size(); ++c) {
      double logdens = -0.5 * shared;
      for (std::size_t j = 0; j < dim; ++j) {
        const double diff = query[j] - classifier.class_means[c][j];
        logdens -= 0.5 * diff * diff / classifier.variance[j];
      }
      CHECK(std::fabs(scores[c] - (2.0 * logdens + shared)) < 1e-10);
    }
  }

  // two classes with means 0 and 10, unit-ish variance: query 1 goes to the low class
  FeatureTableSet simple = single_table_set(make_table(
      {0, MatrixKind::A}, {{-1.0}, {1.0}, {9.0}, {11.0}}, {2, 2, 7, 7}));
  const lf::EnsembleModel sm = lf::fit(PredictorKind::GDA, Aggregation::Majority, simple);
  lf::SlotFeatures query_features = {{SlotKey{0, MatrixKind::A}, {1.0}}};
  CHECK(lf::predict_from_features(sm, query_features).label == 2);
  // exact midpoint: smaller class wins
  query_features[0].second = {5.0};
  CHECK(lf::predict_from_features(sm, query_features).label == 2);
}

TEST_CASE("GDA rejects a class with no rows") {
  const FeatureTable table = make_table({0, MatrixKind::A}, {{1.0}, {2.0}}, {1, 2});
  try {
    lf::detail::fit_gda_slot(table, {1, 2, 3}, 1e-6);
    FAIL("expected a throw");
  } catch (const lf::Error& e) {
    CHECK(e.code() == lf::ErrorCode::EmptyClass);
  }
}

TEST_CASE("fit rejects tables whose rows disagree") {
  FeatureTableSet set;
  set.tables.push_back(make_table({0, MatrixKind::A}, {{1.0}, {2.0}}, {1, 2}));
  set.tables.push_back(make_table({1, MatrixKind::A}, {{1.0}, {2.0}}, {1, 3}));
  set.topology.layer_count = 2;
  try {
    lf::fit(PredictorKind::GDA, Aggregation::Majority, set);
    FAIL("expected a throw");
  } catch (const lf::Error& e) {
    CHECK(e.code() == lf::ErrorCode::InconsistentTables);
  }
}

TEST_CASE("ridge recovers an exact line as lambda vanishes") {
  FeatureTableSet set = single_table_set(
      make_table({0, MatrixKind::FROB}, {{1.0}, {2.0}, {3.0}}, {1, 2, 3}));
  lf::Hyper hyper;
  hyper.ridge_lambda = 1e-12;
  const lf::EnsembleModel model = lf::fit(PredictorKind::Ridge, Aggregation::Majority, set, hyper);
  CHECK(model.slots.front().coef[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(model.slots.front().intercept == doctest::Approx(0.0).epsilon(1e-9));

  // prediction snaps the continuous output to the class set
  lf::SlotFeatures query = {{SlotKey{0, MatrixKind::FROB}, {2.4}}};
  CHECK(lf::predict_from_features(model, query).label == 2);
}

TEST_CASE("the scalar baseline is exactly layer-NN on FROB tables") {
  std::mt19937_64 gen(23);
  std::uniform_real_distribution<double> dist(0, 4);
  FeatureTableSet set;
  for (std::size_t li = 0; li < 3; ++li) {
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    for (int i = 0; i < 12; ++i) {
      rows.push_back({dist(gen)});
      labels.push_back(1 + i % 4);
    }
    set.tables.push_back(make_table({li, MatrixKind::FROB}, rows, labels));
  }
  set.topology.layer_count = 3;

  const lf::EnsembleModel baseline =
      lf::fit(PredictorKind::FrobeniusNN, Aggregation::Majority, set);
  const lf::EnsembleModel layer_nn = lf::fit(PredictorKind::LayerNN, Aggregation::Majority, set);
  for (int q = 0; q < 50; ++q) {
    lf::SlotFeatures features;
    for (std::size_t li = 0; li < 3; ++li) {
      features.push_back({SlotKey{li, MatrixKind::FROB}, {dist(gen)}});
    }
    const lf::Prediction a = lf::predict_from_features(baseline, features);
    const lf::Prediction b = lf::predict_from_features(layer_nn, features);
    CHECK(a.label == b.label);
    REQUIRE(a.votes.size() == b.votes.size());
    for (std::size_t i = 0; i < a.votes.size(); ++i) {
      CHECK(a.votes[i].label == b.votes[i].label);
    }
  }

  // the baseline refuses non-FROB tables
  FeatureTableSet wrong = single_table_set(
      make_table({0, MatrixKind::A}, {{1.0, 2.0}}, {1}));
  try {
    lf::fit(PredictorKind::FrobeniusNN, Aggregation::Majority, wrong);
    FAIL("expected a throw");
  } catch (const lf::Error& e) {
    CHECK(e.code() == lf::ErrorCode::InconsistentTables);
  }
}

TEST_CASE("full-model NN concatenates slot features and emits one vote") {
  FeatureTableSet set;
  set.tables.push_back(make_table({0, MatrixKind::A}, {{0.0, 0.0}, {4.0, 4.0}}, {1, 9}));
  set.tables.push_back(make_table({1, MatrixKind::A}, {{0.0}, {4.0}}, {1, 9}));
  set.topology.layer_count = 2;
  const lf::EnsembleModel model = lf::fit(PredictorKind::FullModelNN, Aggregation::Majority, set);
  REQUIRE(model.slots.size() == 1);
  CHECK(model.slots.front().dim == 3);

  lf::SlotFeatures features = {{SlotKey{0, MatrixKind::A}, {3.0, 3.0}},
                               {SlotKey{1, MatrixKind::A}, {3.5}}};
  const lf::Prediction prediction = lf::predict_from_features(model, features);
  CHECK(prediction.label == 9);
  CHECK(prediction.votes.size() == 1);
}

TEST_CASE("training-set recall and the vote-count law") {
  std::mt19937_64 gen(29);
  std::vector<lf::ModelSnapshot> snapshots;
  std::vector<lf::SlotFeatures> feats;
  std::vector<int> labels;
  std::vector<std::string> ids;
  const std::vector<MatrixKind> kinds = {MatrixKind::A, MatrixKind::B, MatrixKind::BA};
  for (int i = 0; i < 9; ++i) {
    lf::ModelSnapshot snapshot;
    for (std::size_t li = 0; li < 4; ++li) {
      lf::LoraLayerSnapshot layer;
      layer.layer_path = "layer_" + std::to_string(li);
      layer.b = lftest::random_matrix(6, 2, gen);
      layer.a = lftest::random_matrix(2, 5, gen);
      snapshot.layers.push_back(std::move(layer));
    }
    snapshot.label = 1 + i % 3;
    snapshots.push_back(snapshot);
    feats.push_back(lf::extract_features(snapshot, kinds));
    labels.push_back(*snapshot.label);
    ids.push_back("m" + std::to_string(i));
  }
  const FeatureTableSet set =
      lf::detail::assemble_tables(feats, labels, ids, lf::topology_of(snapshots.front()));

  for (PredictorKind kind :
       {PredictorKind::LayerNN, PredictorKind::FullModelNN}) {
    const lf::EnsembleModel model = lf::fit(kind, Aggregation::Majority, set);
    for (std::size_t i = 0; i < snapshots.size(); ++i) {
      const lf::Prediction prediction = lf::predict(model, snapshots[i]);
      CHECK(prediction.label == labels[i]);  // distance-0 self match wins every slot
      if (kind == PredictorKind::LayerNN) {
        CHECK(prediction.votes.size() == 4 * kinds.size());
      } else {
        CHECK(prediction.votes.size() == 1);
      }
    }
  }

  // topology mismatch is a hard error
  const lf::EnsembleModel model = lf::fit(PredictorKind::LayerNN, Aggregation::Majority, set);
  lf::ModelSnapshot wrong = snapshots.front();
  wrong.layers.pop_back();
  try {
    lf::predict(model, wrong);
    FAIL("expected a throw");
  } catch (const lf::Error& e) {
    CHECK(e.code() == lf::ErrorCode::TopologyMismatch);
  }
}

TEST_CASE("model persistence round-trips every predictor kind") {
  const auto dir = lftest::scratch_dir("models");
  std::mt19937_64 gen(31);
  std::uniform_real_distribution<double> dist(-1, 1);

  FeatureTableSet set;
  for (std::size_t li = 0; li < 2; ++li) {
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    for (int i = 0; i < 10; ++i) {
      rows.push_back({dist(gen), dist(gen), dist(gen)});
      labels.push_back(1 + i % 2);
    }
    set.tables.push_back(make_table({li, MatrixKind::BA}, rows, labels));
  }
  set.topology.layer_count = 2;
  set.topology.rank = 3;
  set.topology.layer_paths = {"layer_0", "layer_1"};

  for (PredictorKind kind : {PredictorKind::LayerNN, PredictorKind::GDA, PredictorKind::Ridge,
                             PredictorKind::FullModelNN}) {
    const lf::EnsembleModel model = lf::fit(kind, Aggregation::Average, set);
    const auto path = dir / (std::string(lf::to_string(kind)) + ".json");
    lf::save_model(model, path);
    const lf::EnsembleModel loaded = lf::load_model(path);
    CHECK(loaded.kind == model.kind);
    CHECK(loaded.aggregation == model.aggregation);
    CHECK(loaded.class_set == model.class_set);
    CHECK(loaded.topology.layer_paths == model.topology.layer_paths);
    for (int q = 0; q < 20; ++q) {
      lf::SlotFeatures features = {
          {SlotKey{0, MatrixKind::BA}, {dist(gen), dist(gen), dist(gen)}},
          {SlotKey{1, MatrixKind::BA}, {dist(gen), dist(gen), dist(gen)}}};
      CHECK(lf::predict_from_features(model, features).label ==
            lf::predict_from_features(loaded, features).label);
    }
  }

  // version mismatch is a hard error
  std::ofstream(dir / "bad.json") << R"({"format":"lora-forensics-model","version":99})";
  try {
    lf::load_model(dir / "bad.json");
    FAIL("expected a throw");
  } catch (const lf::Error& e) {
    CHECK(e.code() == lf::ErrorCode::ModelFormatError);
  }
}
