// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "lora_forensics/error.hpp"
#include "lora_forensics/manifest.hpp"
#include "lora_forensics/matrix.hpp"
#include "lora_forensics/parallel.hpp"
#include "lora_forensics/rng.hpp"
#include "lora_forensics/snapshot.hpp"
#include "lora_forensics/spectral.hpp"
#include "lora_forensics/version.hpp"

namespace lf {

// Synthetic corpora plant a known label signal in the spectra so the whole
// pipeline can be verified against ground truth without any fine-tuning.
//   separable / noisy : spectrum magnitude decays with the label,
//                       sigma_m = c_l * n^-alpha * m^-1 * (1 + eps_m)
//   shape-coded       : every class has the same total energy, the label
//                       only moves spectral mass toward the tail, so the
//                       scalar statistic is blind while the spectrum is not
enum class GenPreset { Separable, Noisy, ShapeCoded };

inline const char* to_string(GenPreset preset) {
  switch (preset) {
    case GenPreset::Separable: return "separable";
    case GenPreset::Noisy: return "noisy";
    case GenPreset::ShapeCoded: return "shape-coded";
  }
  return "?";
}

inline GenPreset gen_preset_from_string(const std::string& text) {
  if (text == "separable") return GenPreset::Separable;
  if (text == "noisy") return GenPreset::Noisy;
  if (text == "shape-coded") return GenPreset::ShapeCoded;
  raise(ErrorCode::ConfigError, "unknown preset '" + text + "'");
}

struct GenConfig {
  std::vector<int> class_set = {1, 2, 3, 4, 5, 6};
  int n_micro_datasets = 50;
  std::size_t layers = 8;
  std::size_t d = 64;
  std::size_t k = 64;
  std::size_t rank = 8;
  double alpha = 1.0;   // label-decay exponent (separable/noisy)
  double noise = 0.05;  // relative multiplicative noise per singular value
  GenPreset preset = GenPreset::Separable;
  std::uint64_t seed = 0;
};

inline void validate(const GenConfig& cfg) {
  if (cfg.class_set.empty() || !std::is_sorted(cfg.class_set.begin(), cfg.class_set.end()) ||
      std::adjacent_find(cfg.class_set.begin(), cfg.class_set.end()) != cfg.class_set.end() ||
      cfg.class_set.front() <= 0) {
    raise(ErrorCode::ConfigError, "class_set must be distinct positive labels, ascending");
  }
  if (cfg.n_micro_datasets < 1) raise(ErrorCode::ConfigError, "n_micro_datasets must be >= 1");
  if (cfg.layers < 1) raise(ErrorCode::ConfigError, "layers must be >= 1");
  if (cfg.d < 1 || cfg.k < 1 || cfg.rank < 1 || cfg.rank > std::min(cfg.d, cfg.k)) {
    raise(ErrorCode::ConfigError, "need 1 <= rank <= min(d, k)");
  }
  if (cfg.alpha <= 0.0) raise(ErrorCode::ConfigError, "alpha must be positive");
  if (cfg.noise < 0.0) raise(ErrorCode::ConfigError, "noise must be non-negative");
}

// Per-layer magnitude scale, log-uniform in [0.5, 2], shared by every model
// in the corpus so it carries no label information.
inline double layer_scale(const GenConfig& cfg, std::size_t layer_index) {
  Mcg64 rng(SeedMix().mix(cfg.seed).mix("layer-scale").mix(layer_index).value());
  return std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
}

// Target spectrum with an explicit scale; noise_draw holds r relative
// offsets, each in [-noise, +noise]. Values are sorted non-increasing after
// the noise is applied.
inline Spectrum target_spectrum_with_scale(int n, double scale, const GenConfig& cfg,
                                           const std::vector<double>& noise_draw) {
  const auto it = std::lower_bound(cfg.class_set.begin(), cfg.class_set.end(), n);
  if (it == cfg.class_set.end() || *it != n) {
    raise(ErrorCode::LabelNotInClassSet, "label " + std::to_string(n) + " is not a class");
  }
  if (noise_draw.size() != cfg.rank) {
    raise(ErrorCode::DimensionMismatch, "noise draw length must equal the rank");
  }
  Spectrum sigma(cfg.rank);
  if (cfg.preset == GenPreset::ShapeCoded) {
    // unit-energy profile m^-beta, beta descending across classes
    const std::size_t ci = static_cast<std::size_t>(it - cfg.class_set.begin());
    const std::size_t n_classes = cfg.class_set.size();
    const double beta =
        n_classes > 1
            ? 1.5 - 1.25 * static_cast<double>(ci) / static_cast<double>(n_classes - 1)
            : 1.0;
    double energy = 0.0;
    for (std::size_t m = 0; m < cfg.rank; ++m) {
      sigma[m] = std::pow(static_cast<double>(m + 1), -beta);
      energy += sigma[m] * sigma[m];
    }
    const double norm = std::sqrt(energy);
    for (std::size_t m = 0; m < cfg.rank; ++m) {
      sigma[m] = scale * sigma[m] / norm * (1.0 + noise_draw[m]);
    }
  } else {
    const double level = scale * std::pow(static_cast<double>(n), -cfg.alpha);
    for (std::size_t m = 0; m < cfg.rank; ++m) {
      sigma[m] = level / static_cast<double>(m + 1) * (1.0 + noise_draw[m]);
    }
  }
  std::sort(sigma.begin(), sigma.end(), std::greater<double>());
  return sigma;
}

inline Spectrum target_spectrum(int n, std::size_t layer_index, const GenConfig& cfg,
                                const std::vector<double>& noise_draw) {
  return target_spectrum_with_scale(n, layer_scale(cfg, layer_index), cfg, noise_draw);
}

// B = U sqrt(S), A = sqrt(S) V^T with U, V orthonormal from the QR of seeded
// Gaussian draws, so the product spectrum equals `spectrum` by construction
// and both factors carry its square root.
inline LoraLayerSnapshot synthesize_layer(const Spectrum& spectrum, std::size_t d,
                                          std::size_t k, std::size_t rank,
                                          std::uint64_t seed) {
  if (spectrum.size() != rank || rank > std::min(d, k) || rank == 0) {
    raise(ErrorCode::DimensionMismatch, "spectrum length must be the rank, rank <= min(d, k)");
  }
  Mcg64 rng(seed);
  Matrix gu(d, rank);
  for (double& v : gu.data()) v = rng.normal();
  Matrix gv(k, rank);
  for (double& v : gv.data()) v = rng.normal();
  const Matrix u = thin_qr(gu).q;
  const Matrix v = thin_qr(gv).q;

  LoraLayerSnapshot layer;
  layer.b = Matrix(d, rank);
  layer.a = Matrix(rank, k);
  for (std::size_t m = 0; m < rank; ++m) {
    const double root = std::sqrt(std::max(spectrum[m], 0.0));
    for (std::size_t i = 0; i < d; ++i) layer.b(i, m) = u(i, m) * root;
    for (std::size_t j = 0; j < k; ++j) layer.a(m, j) = v(j, m) * root;
  }
  return layer;
}

struct GeneratedCorpus {
  std::filesystem::path root;
  std::filesystem::path manifest;
  std::size_t snapshot_count = 0;
};

namespace detail {

inline std::string micro_dataset_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "md%03d", index);
  return buf;
}

inline std::string layer_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "layer_%03zu", index);
  return buf;
}

}  // namespace detail

// Builds one snapshot of the corpus. All randomness is derived from
// (seed, micro_dataset_id, label), so generation order and thread count
// cannot change the output.
inline ModelSnapshot synthesize_snapshot(const GenConfig& cfg,
                                         const std::string& micro_dataset_id, int label) {
  ModelSnapshot snapshot;
  snapshot.meta.backbone_tag = "synthetic";
  snapshot.meta.lora_rank = static_cast<int>(cfg.rank);
  snapshot.meta.micro_dataset_id = micro_dataset_id;
  snapshot.meta.seed = static_cast<std::int64_t>(cfg.seed);
  snapshot.meta.step = 0;
  snapshot.label = label;
  snapshot.layers.reserve(cfg.layers);
  for (std::size_t li = 0; li < cfg.layers; ++li) {
    const std::uint64_t base = SeedMix()
                                   .mix(cfg.seed)
                                   .mix("snapshot")
                                   .mix(micro_dataset_id)
                                   .mix(static_cast<std::uint64_t>(label))
                                   .mix(li)
                                   .value();
    Mcg64 noise_rng(SeedMix().mix(base).mix("noise").value());
    std::vector<double> eps(cfg.rank);
    for (double& e : eps) e = noise_rng.uniform(-cfg.noise, cfg.noise);
    const Spectrum sigma = target_spectrum(label, li, cfg, eps);
    LoraLayerSnapshot layer = synthesize_layer(sigma, cfg.d, cfg.k, cfg.rank,
                                               SeedMix().mix(base).mix("factors").value());
    layer.layer_path = detail::layer_name(li);
    snapshot.layers.push_back(std::move(layer));
  }
  return snapshot;
}

// Writes n_micro_datasets x |class_set| snapshots, a manifest, and a
// provenance block; byte-identical for the same config.
inline GeneratedCorpus generate_corpus(const GenConfig& cfg,
                                       const std::filesystem::path& out_dir,
                                       unsigned n_threads = 1) {
  validate(cfg);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "snapshots", ec);
  if (ec) {
    raise(ErrorCode::IoFailure, "cannot create '" + (out_dir / "snapshots").string() + "'");
  }

  struct Item {
    std::string micro_id;
    int label;
    std::string rel_path;
  };
  std::vector<Item> items;
  for (int md = 0; md < cfg.n_micro_datasets; ++md) {
    const std::string micro_id = detail::micro_dataset_name(md);
    for (int label : cfg.class_set) {
      items.push_back({micro_id, label,
                       "snapshots/" + micro_id + "_n" + std::to_string(label) + ".safetensors"});
    }
  }

  parallel_for(items.size(), n_threads, [&](std::size_t i) {
    const Item& item = items[i];
    const ModelSnapshot snapshot = synthesize_snapshot(cfg, item.micro_id, item.label);
    write_snapshot(snapshot, out_dir / item.rel_path);
  });

  std::string manifest_text(kManifestHeader);
  manifest_text += "\n";
  for (const Item& item : items) {
    manifest_text += item.rel_path + "," + item.micro_id + "," + std::to_string(item.label) +
                     ",synthetic," + std::to_string(cfg.rank) + "," +
                     std::to_string(cfg.seed) + ",0\n";
  }
  const std::filesystem::path manifest_path = out_dir / "manifest.csv";
  detail::write_file_atomic(manifest_path, manifest_text);

  nlohmann::json prov;
  prov["generator"] = "lora-forensics synthgen";
  prov["tool_version"] = kToolVersion;
  prov["config"] = {{"class_set", cfg.class_set},
                    {"n_micro_datasets", cfg.n_micro_datasets},
                    {"layers", cfg.layers},
                    {"d", cfg.d},
                    {"k", cfg.k},
                    {"rank", cfg.rank},
                    {"alpha", cfg.alpha},
                    {"noise", cfg.noise},
                    {"preset", to_string(cfg.preset)},
                    {"seed", cfg.seed}};
  detail::write_file_atomic(out_dir / "provenance.json", prov.dump(2) + "\n");

  return {out_dir, manifest_path, items.size()};
}

inline void to_json(nlohmann::json& j, const GenConfig& cfg) {
  j = {{"class_set", cfg.class_set},
       {"n_micro_datasets", cfg.n_micro_datasets},
       {"layers", cfg.layers},
       {"d", cfg.d},
       {"k", cfg.k},
       {"rank", cfg.rank},
       {"alpha", cfg.alpha},
       {"noise", cfg.noise},
       {"preset", to_string(cfg.preset)},
       {"seed", cfg.seed}};
}

inline void from_json(const nlohmann::json& j, GenConfig& cfg) {
  cfg.class_set = j.value("class_set", cfg.class_set);
  cfg.n_micro_datasets = j.value("n_micro_datasets", cfg.n_micro_datasets);
  cfg.layers = j.value("layers", cfg.layers);
  cfg.d = j.value("d", cfg.d);
  cfg.k = j.value("k", cfg.k);
  cfg.rank = j.value("rank", cfg.rank);
  cfg.alpha = j.value("alpha", cfg.alpha);
  cfg.noise = j.value("noise", cfg.noise);
  if (j.contains("preset")) cfg.preset = gen_preset_from_string(j.at("preset").get<std::string>());
  cfg.seed = j.value("seed", cfg.seed);
}

}  // namespace lf
