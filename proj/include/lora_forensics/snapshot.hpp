// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lora_forensics/error.hpp"
#include "lora_forensics/matrix.hpp"

namespace lf {

enum class Dtype { f32, f16 };

inline const char* to_string(Dtype d) { return d == Dtype::f32 ? "F32" : "F16"; }

inline std::size_t dtype_size(Dtype d) { return d == Dtype::f32 ? 4 : 2; }

// IEEE binary16 <-> double. Storage precision only; all math runs in double.
inline double f16_to_double(std::uint16_t h) {
  const int sign = (h >> 15) & 1;
  const int exp = (h >> 10) & 0x1f;
  const int man = h & 0x3ff;
  double v;
  if (exp == 0) {
    v = std::ldexp(static_cast<double>(man), -24);
  } else if (exp == 31) {
    v = man ? std::numeric_limits<double>::quiet_NaN()
            : std::numeric_limits<double>::infinity();
  } else {
    v = std::ldexp(1.0 + static_cast<double>(man) / 1024.0, exp - 15);
  }
  return sign ? -v : v;
}

inline std::uint16_t double_to_f16(double x) {
  const std::uint16_t sign = std::signbit(x) ? 0x8000 : 0;
  if (std::isnan(x)) return sign | 0x7e00;
  const double a = std::fabs(x);
  if (std::isinf(x)) return sign | 0x7c00;
  if (a < std::ldexp(1.0, -14)) {
    // Subnormal range; llrint rounds to nearest even. A result of 1024
    // carries into the smallest normal encoding on its own.
    const auto man = static_cast<std::uint16_t>(std::llrint(std::ldexp(a, 24)));
    return sign | man;
  }
  int e2;
  std::frexp(a, &e2);          // a = f * 2^e2, f in [0.5, 1)
  int exp = e2 - 1;            // unbiased exponent
  if (exp > 15) return sign | 0x7c00;
  auto man = static_cast<std::uint32_t>(std::llrint(std::ldexp(a, 10 - exp)));
  if (man == 2048) {           // mantissa rounded up to the next binade
    man = 1024;
    ++exp;
    if (exp > 15) return sign | 0x7c00;
  }
  return static_cast<std::uint16_t>(sign | ((exp + 15) << 10) | (man - 1024));
}

struct TensorRecord {
  std::string name;
  Dtype dtype = Dtype::f32;
  std::vector<std::int64_t> shape;
  std::vector<double> data;  // widened row-major payload
};

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    raise(ErrorCode::IoFailure, "cannot open '" + path.string() + "'");
  }
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (in.bad()) {
    raise(ErrorCode::IoFailure, "read failed for '" + path.string() + "'");
  }
  return bytes;
}

inline void write_file_atomic(const std::filesystem::path& path,
                              const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      raise(ErrorCode::IoFailure, "cannot open '" + tmp.string() + "' for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      raise(ErrorCode::IoFailure, "write failed for '" + tmp.string() + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    raise(ErrorCode::IoFailure, "rename to '" + path.string() + "' failed");
  }
}

}  // namespace detail

// Container layout: 8-byte little-endian header length N, N bytes of UTF-8
// JSON mapping tensor names to {"dtype", "shape", "data_offsets"}, then the
// raw buffer the offsets address (little-endian scalars, row-major). The
// "__metadata__" key is tolerated and ignored so checkpoints written by
// other tools load as-is.
inline std::map<std::string, TensorRecord> read_container(
    const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = detail::read_file_bytes(path);
  if (bytes.size() < 8) {
    raise(ErrorCode::MalformedHeader, "file shorter than the length prefix");
  }
  std::uint64_t header_len = 0;
  for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | bytes[i];
  if (header_len > bytes.size() - 8) {
    raise(ErrorCode::MalformedHeader, "header length exceeds file size");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::MalformedHeader, std::string("header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) {
    raise(ErrorCode::MalformedHeader, "header is not a JSON object");
  }

  const unsigned char* buffer = bytes.data() + 8 + header_len;
  const std::uint64_t buffer_len = bytes.size() - 8 - header_len;

  std::map<std::string, TensorRecord> records;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") continue;
    if (name.empty()) {
      raise(ErrorCode::MalformedHeader, "empty tensor name");
    }
    if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
        !entry.contains("data_offsets")) {
      raise(ErrorCode::MalformedHeader, "tensor entry '" + name + "' is incomplete");
    }
    TensorRecord rec;
    rec.name = name;
    if (!entry["dtype"].is_string()) {
      raise(ErrorCode::MalformedHeader, "dtype of '" + name + "' is not a string");
    }
    const std::string dtype = entry["dtype"].get<std::string>();
    if (dtype == "F32") {
      rec.dtype = Dtype::f32;
    } else if (dtype == "F16") {
      rec.dtype = Dtype::f16;
    } else {
      raise(ErrorCode::MalformedHeader, "unsupported dtype '" + dtype + "' for '" + name + "'");
    }
    if (!entry["shape"].is_array()) {
      raise(ErrorCode::MalformedHeader, "shape of '" + name + "' is not an array");
    }
    std::uint64_t count = 1;
    for (const auto& dim : entry["shape"]) {
      if (!dim.is_number_integer() || dim.get<std::int64_t>() < 0) {
        raise(ErrorCode::MalformedHeader, "bad shape for '" + name + "'");
      }
      rec.shape.push_back(dim.get<std::int64_t>());
      count *= static_cast<std::uint64_t>(dim.get<std::int64_t>());
    }
    const auto& offs = entry["data_offsets"];
    if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() ||
        !offs[1].is_number_unsigned()) {
      raise(ErrorCode::MalformedHeader, "bad data_offsets for '" + name + "'");
    }
    const auto begin = offs[0].get<std::uint64_t>();
    const auto end = offs[1].get<std::uint64_t>();
    if (end < begin || end > buffer_len) {
      raise(ErrorCode::MalformedHeader, "data_offsets out of range for '" + name + "'");
    }
    if (end - begin != count * dtype_size(rec.dtype)) {
      raise(ErrorCode::MalformedHeader,
            "payload size disagrees with shape for '" + name + "'");
    }
    ranges.emplace_back(begin, end);

    rec.data.resize(count);
    const unsigned char* src = buffer + begin;
    if (rec.dtype == Dtype::f32) {
      for (std::uint64_t i = 0; i < count; ++i) {
        std::uint32_t u = 0;
        std::memcpy(&u, src + 4 * i, 4);
        float f;
        std::memcpy(&f, &u, 4);
        rec.data[i] = static_cast<double>(f);
      }
    } else {
      for (std::uint64_t i = 0; i < count; ++i) {
        std::uint16_t u = 0;
        std::memcpy(&u, src + 2 * i, 2);
        rec.data[i] = f16_to_double(u);
      }
    }
    records.emplace(name, std::move(rec));
  }

  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first < ranges[i - 1].second) {
      raise(ErrorCode::OverlappingOffsets, "tensor byte ranges collide");
    }
  }
  return records;
}

// Deterministic writer: tensor names sorted, offsets contiguous in that
// order, compact canonical JSON. Two writes of the same records are
// byte-identical.
inline void write_container(const std::map<std::string, TensorRecord>& records,
                            const std::filesystem::path& path) {
  nlohmann::json header = nlohmann::json::object();
  std::string buffer;
  std::uint64_t offset = 0;
  for (const auto& [name, rec] : records) {
    std::uint64_t count = 1;
    for (std::int64_t dim : rec.shape) count *= static_cast<std::uint64_t>(dim);
    if (count != rec.data.size()) {
      raise(ErrorCode::ShapeMismatch, "record '" + name + "' shape/data size disagree");
    }
    const std::uint64_t nbytes = count * dtype_size(rec.dtype);
    if (rec.dtype == Dtype::f32) {
      for (double v : rec.data) {
        const auto f = static_cast<float>(v);
        std::uint32_t u = 0;
        std::memcpy(&u, &f, 4);
        for (int b = 0; b < 4; ++b) buffer.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
      }
    } else {
      for (double v : rec.data) {
        const std::uint16_t u = double_to_f16(v);
        buffer.push_back(static_cast<char>(u & 0xff));
        buffer.push_back(static_cast<char>((u >> 8) & 0xff));
      }
    }
    header[name] = {{"dtype", to_string(rec.dtype)},
                    {"shape", rec.shape},
                    {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
  }

  const std::string header_text = header.dump();
  std::string bytes;
  bytes.reserve(8 + header_text.size() + buffer.size());
  const std::uint64_t n = header_text.size();
  for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((n >> (8 * i)) & 0xff));
  bytes += header_text;
  bytes += buffer;
  detail::write_file_atomic(path, bytes);
}

// One adapted layer: the down-projection A (rank x k) and up-projection B
// (d x rank), plus the storage precision each came in with.
struct LoraLayerSnapshot {
  std::string layer_path;
  Matrix b;  // d x rank
  Matrix a;  // rank x k
  Dtype b_dtype = Dtype::f32;
  Dtype a_dtype = Dtype::f32;

  std::size_t d() const { return b.rows(); }
  std::size_t k() const { return a.cols(); }
  std::size_t rank() const { return b.cols(); }
};

struct SnapshotMeta {
  std::string backbone_tag;
  int lora_rank = 0;
  std::string micro_dataset_id;
  std::int64_t seed = 0;
  std::int64_t step = 0;
};

struct ModelSnapshot {
  std::vector<LoraLayerSnapshot> layers;  // sorted by layer_path
  SnapshotMeta meta;
  std::optional<int> label;  // fine-tuning image count, when known
};

// Tensor-key schema. The defaults match the common public checkpoint
// convention; other conventions are a configuration away.
struct SnapshotNaming {
  std::string a_suffix = ".lora_A.weight";
  std::string b_suffix = ".lora_B.weight";
};

namespace detail {

inline bool strip_suffix(const std::string& name, const std::string& suffix,
                         std::string& base) {
  if (name.size() <= suffix.size()) return false;
  if (name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) return false;
  base = name.substr(0, name.size() - suffix.size());
  return true;
}

}  // namespace detail

inline ModelSnapshot read_snapshot(const std::filesystem::path& path,
                                   const SnapshotNaming& naming = {}) {
  const std::map<std::string, TensorRecord> records = read_container(path);

  struct Pair {
    const TensorRecord* a = nullptr;
    const TensorRecord* b = nullptr;
  };
  std::map<std::string, Pair> pairs;  // keyed by layer_path, so sorted
  for (const auto& [name, rec] : records) {
    std::string base;
    if (detail::strip_suffix(name, naming.a_suffix, base)) {
      pairs[base].a = &rec;
    } else if (detail::strip_suffix(name, naming.b_suffix, base)) {
      pairs[base].b = &rec;
    } else {
      raise(ErrorCode::MissingPartner, "tensor '" + name + "' is not a recognized factor");
    }
  }
  if (pairs.empty()) {
    raise(ErrorCode::MalformedHeader, "no factor pairs in '" + path.string() + "'");
  }

  ModelSnapshot snapshot;
  for (const auto& [base, pair] : pairs) {
    if (!pair.a || !pair.b) {
      raise(ErrorCode::MissingPartner, "layer '" + base + "' lacks its partner factor");
    }
    if (pair.a->shape.size() != 2 || pair.b->shape.size() != 2) {
      raise(ErrorCode::ShapeMismatch, "factor of layer '" + base + "' is not 2-D");
    }
    const std::int64_t r_a = pair.a->shape[0];
    const std::int64_t k = pair.a->shape[1];
    const std::int64_t d = pair.b->shape[0];
    const std::int64_t r_b = pair.b->shape[1];
    if (r_a <= 0 || k <= 0 || d <= 0 || r_b <= 0) {
      raise(ErrorCode::ShapeMismatch, "factor of layer '" + base + "' has a zero dimension");
    }
    if (r_a != r_b) {
      raise(ErrorCode::ShapeMismatch, "layer '" + base + "' factor ranks disagree");
    }
    if (r_a > std::min(d, k)) {
      raise(ErrorCode::ShapeMismatch, "layer '" + base + "' rank exceeds min(d, k)");
    }
    LoraLayerSnapshot layer;
    layer.layer_path = base;
    layer.a_dtype = pair.a->dtype;
    layer.b_dtype = pair.b->dtype;
    layer.a = Matrix(static_cast<std::size_t>(r_a), static_cast<std::size_t>(k));
    layer.b = Matrix(static_cast<std::size_t>(d), static_cast<std::size_t>(r_b));
    layer.a.data() = pair.a->data;
    layer.b.data() = pair.b->data;
    if (!layer.a.all_finite() || !layer.b.all_finite()) {
      raise(ErrorCode::NonFiniteInput, "layer '" + base + "' has non-finite entries");
    }
    snapshot.layers.push_back(std::move(layer));
  }
  return snapshot;
}

inline void write_snapshot(const ModelSnapshot& snapshot,
                           const std::filesystem::path& path,
                           const SnapshotNaming& naming = {}) {
  std::map<std::string, TensorRecord> records;
  for (const LoraLayerSnapshot& layer : snapshot.layers) {
    TensorRecord a;
    a.name = layer.layer_path + naming.a_suffix;
    a.dtype = layer.a_dtype;
    a.shape = {static_cast<std::int64_t>(layer.a.rows()),
               static_cast<std::int64_t>(layer.a.cols())};
    a.data = layer.a.data();
    TensorRecord b;
    b.name = layer.layer_path + naming.b_suffix;
    b.dtype = layer.b_dtype;
    b.shape = {static_cast<std::int64_t>(layer.b.rows()),
               static_cast<std::int64_t>(layer.b.cols())};
    b.data = layer.b.data();
    if (!records.emplace(a.name, std::move(a)).second ||
        !records.emplace(b.name, std::move(b)).second) {
      raise(ErrorCode::DuplicateEntry, "duplicate layer path '" + layer.layer_path + "'");
    }
  }
  write_container(records, path);
}

}  // namespace lf
