// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lora_forensics/error.hpp"
#include "lora_forensics/rng.hpp"
#include "lora_forensics/snapshot.hpp"

namespace lf {

struct IndexEntry {
  std::filesystem::path path;  // resolved, loadable as-is
  SnapshotMeta meta;
  std::optional<int> label;
};

// Labeled snapshot collection grouped by micro-dataset; the group is the
// unit every train/test split respects.
struct SnapshotIndex {
  std::vector<IndexEntry> entries;                         // manifest order
  std::map<std::string, std::vector<std::size_t>> groups;  // micro_dataset_id -> entry indices
  std::string source_digest;                               // fnv1a64 of the manifest bytes, hex
};

inline constexpr const char* kManifestHeader =
    "path,micro_dataset_id,label,backbone_tag,lora_rank,seed,step";

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(field);
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  fields.push_back(field);
  return fields;
}

inline std::int64_t parse_int_field(const std::string& text, const std::string& what,
                                    std::size_t line_no) {
  try {
    std::size_t used = 0;
    const std::int64_t v = std::stoll(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    raise(ErrorCode::LabelParseError,
          "bad " + what + " '" + text + "' at manifest line " + std::to_string(line_no));
  }
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace detail

// Reads the sidecar CSV manifest and groups entries by micro-dataset.
// Relative paths resolve against `root`.
inline SnapshotIndex build_index(const std::filesystem::path& root,
                                 const std::filesystem::path& manifest) {
  const std::vector<unsigned char> bytes = detail::read_file_bytes(manifest);
  SnapshotIndex index;
  index.source_digest = detail::hex64(fnv1a64(bytes.data(), bytes.size()));

  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::string line;
  std::size_t line_no = 0;
  bool saw_header = false;
  std::map<std::string, std::size_t> seen_paths;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!saw_header) {
      if (line != kManifestHeader) {
        raise(ErrorCode::MalformedHeader, "unexpected manifest header '" + line + "'");
      }
      saw_header = true;
      continue;
    }
    const std::vector<std::string> fields = detail::split_csv_line(line);
    if (fields.size() != 7) {
      raise(ErrorCode::LabelParseError,
            "expected 7 fields at manifest line " + std::to_string(line_no));
    }
    IndexEntry entry;
    const std::filesystem::path raw(fields[0]);
    entry.path = raw.is_absolute() ? raw : root / raw;
    entry.meta.micro_dataset_id = fields[1];
    if (!fields[2].empty()) {
      const std::int64_t label = detail::parse_int_field(fields[2], "label", line_no);
      if (label <= 0) {
        raise(ErrorCode::LabelParseError,
              "label must be positive at manifest line " + std::to_string(line_no));
      }
      entry.label = static_cast<int>(label);
    }
    entry.meta.backbone_tag = fields[3];
    entry.meta.lora_rank = static_cast<int>(detail::parse_int_field(fields[4], "lora_rank", line_no));
    entry.meta.seed = detail::parse_int_field(fields[5], "seed", line_no);
    entry.meta.step = detail::parse_int_field(fields[6], "step", line_no);

    if (!std::filesystem::exists(entry.path)) {
      raise(ErrorCode::MissingFile, "manifest references missing '" + entry.path.string() + "'");
    }
    if (!seen_paths.emplace(entry.path.string(), line_no).second) {
      raise(ErrorCode::DuplicateEntry, "duplicate path '" + entry.path.string() + "'");
    }
    index.groups[entry.meta.micro_dataset_id].push_back(index.entries.size());
    index.entries.push_back(std::move(entry));
  }
  if (!saw_header) {
    raise(ErrorCode::MalformedHeader, "manifest is empty");
  }
  return index;
}

inline SnapshotIndex build_index(const std::filesystem::path& manifest) {
  return build_index(manifest.parent_path(), manifest);
}

// Sub-index holding only the entries of the given groups, in the original
// entry order.
inline SnapshotIndex select_groups(const SnapshotIndex& index,
                                   const std::vector<std::string>& keys) {
  SnapshotIndex out;
  out.source_digest = index.source_digest;
  std::map<std::string, bool> wanted;
  for (const std::string& key : keys) wanted[key] = true;
  for (const IndexEntry& entry : index.entries) {
    if (!wanted.count(entry.meta.micro_dataset_id)) continue;
    out.groups[entry.meta.micro_dataset_id].push_back(out.entries.size());
    out.entries.push_back(entry);
  }
  return out;
}

inline ModelSnapshot load_entry(const IndexEntry& entry,
                                const SnapshotNaming& naming = {}) {
  ModelSnapshot snapshot = read_snapshot(entry.path, naming);
  snapshot.meta = entry.meta;
  snapshot.label = entry.label;
  return snapshot;
}

}  // namespace lf
