#pragma once

#include <algorithm>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sedforge/annotations.hpp"
#include "sedforge/audio.hpp"
#include "sedforge/error.hpp"
#include "sedforge/random.hpp"

namespace sedforge {

struct RecordingEntry {
  std::string id;
  std::string audio_path;       // relative to the manifest directory unless absolute
  std::string annotation_path;  // idem
  std::string scene = "default";

  bool operator==(const RecordingEntry&) const = default;
};

struct FoldAssignment {
  std::vector<std::string> train, val, test;
  bool operator==(const FoldAssignment&) const = default;
};

/// Recordings, scene labels and fold membership of a dataset.
///
/// On disk (tab-separated, '#' starts a comment line):
///
///   sedforge-manifest 1
///   classes   <class> <class> ...
///   recording <id> <audio path> <annotation path> <scene>
///   fold      <n> train|val|test <id> <id> ...
///
/// Folds are numbered from 1 and must appear in order; a fold may be split over
/// several lines of the same role.
struct DatasetManifest {
  std::vector<std::string> classes;
  std::vector<RecordingEntry> recordings;
  std::vector<FoldAssignment> folds;
  std::filesystem::path base_dir;  // where relative paths resolve; not serialized

  const RecordingEntry& recording(const std::string& id) const {
    for (const auto& r : recordings)
      if (r.id == id) return r;
    throw ValidationError("manifest has no recording '" + id + "'");
  }

  std::filesystem::path resolve(const std::string& p) const {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  bool operator==(const DatasetManifest& o) const {
    return classes == o.classes && recordings == o.recordings && folds == o.folds;
  }
};

/// Throws ValidationError unless every fold's train/val/test sets are pairwise
/// disjoint, reference known recordings, and together cover all recordings.
inline void validate_manifest(const DatasetManifest& m) {
  std::vector<std::string> problems;
  std::set<std::string> ids;
  for (const auto& r : m.recordings)
    if (!ids.insert(r.id).second) problems.push_back("duplicate recording id " + r.id);
  if (m.classes.empty()) problems.push_back("no classes declared");
  for (std::size_t f = 0; f < m.folds.size(); ++f) {
    std::set<std::string> seen;
    const auto tag = "fold " + std::to_string(f + 1) + ": ";
    for (const auto* part : {&m.folds[f].train, &m.folds[f].val, &m.folds[f].test})
      for (const auto& id : *part) {
        if (!ids.count(id)) problems.push_back(tag + "unknown recording " + id);
        if (!seen.insert(id).second) problems.push_back(tag + id + " appears twice");
      }
    if (seen.size() != ids.size())
      problems.push_back(tag + "does not cover every recording");
    if (m.folds[f].train.empty()) problems.push_back(tag + "empty training set");
    if (m.folds[f].val.empty()) problems.push_back(tag + "empty validation set");
  }
  if (!problems.empty()) {
    std::string msg = "invalid manifest:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }
}

inline std::string format_manifest(const DatasetManifest& m) {
  std::ostringstream out;
  out << "sedforge-manifest 1\n";
  out << "classes";
  for (const auto& c : m.classes) out << '\t' << c;
  out << '\n';
  for (const auto& r : m.recordings)
    out << "recording\t" << r.id << '\t' << r.audio_path << '\t' << r.annotation_path << '\t'
        << r.scene << '\n';
  for (std::size_t f = 0; f < m.folds.size(); ++f) {
    const auto emit = [&](const char* role, const std::vector<std::string>& ids) {
      out << "fold\t" << f + 1 << '\t' << role;
      for (const auto& id : ids) out << '\t' << id;
      out << '\n';
    };
    emit("train", m.folds[f].train);
    emit("val", m.folds[f].val);
    emit("test", m.folds[f].test);
  }
  return out.str();
}

inline DatasetManifest parse_manifest(std::string_view text) {
  DatasetManifest m;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    const auto trimmed = detail::trim(line);
    if (trimmed.empty() || trimmed.front() == '#') continue;
    std::vector<std::string> fields;
    {
      std::istringstream ls{std::string(trimmed)};
      std::string tok;
      while (ls >> tok) fields.push_back(tok);
    }
    if (!header) {
      if (fields.size() != 2 || fields[0] != "sedforge-manifest")
        throw ParseError(line_no, "missing 'sedforge-manifest' header");
      if (fields[1] != "1") throw VersionError("unsupported manifest version " + fields[1]);
      header = true;
      continue;
    }
    if (fields[0] == "classes") {
      m.classes.assign(fields.begin() + 1, fields.end());
    } else if (fields[0] == "recording") {
      if (fields.size() != 5)
        throw ParseError(line_no, "recording needs id, audio, annotations, scene");
      m.recordings.push_back({fields[1], fields[2], fields[3], fields[4]});
    } else if (fields[0] == "fold") {
      if (fields.size() < 3) throw ParseError(line_no, "fold needs an index and a role");
      std::size_t index = 0;
      try {
        index = std::stoul(fields[1]);
      } catch (const std::logic_error&) {
        throw ParseError(line_no, "bad fold index '" + fields[1] + "'");
      }
      if (index == 0 || index > m.folds.size() + 1)
        throw ParseError(line_no, "fold indices must start at 1 and increase by one");
      if (index == m.folds.size() + 1) m.folds.emplace_back();
      auto& fold = m.folds[index - 1];
      std::vector<std::string>* part = nullptr;
      if (fields[2] == "train") part = &fold.train;
      else if (fields[2] == "val") part = &fold.val;
      else if (fields[2] == "test") part = &fold.test;
      else throw ParseError(line_no, "unknown fold role '" + fields[2] + "'");
      part->insert(part->end(), fields.begin() + 3, fields.end());
    } else {
      throw ParseError(line_no, "unknown manifest key '" + fields[0] + "'");
    }
  }
  if (!header) throw ParseError(line_no, "empty manifest");
  return m;
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  DatasetManifest m = parse_manifest(read_file_bytes(path));
  m.base_dir = path.parent_path();
  validate_manifest(m);
  return m;
}

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  write_file_bytes(path, format_manifest(m));
}

/// K-fold cross-validation: fold i tests on the i-th slice of a seeded
/// shuffle; `val_fraction` of the remaining recordings is carved out for
/// validation.
inline std::vector<FoldAssignment> make_kfold(const std::vector<std::string>& ids,
                                              std::size_t k, double val_fraction,
                                              std::uint64_t seed) {
  if (k < 2 || ids.size() < k + 1)
    throw ConfigError("k-fold split needs k >= 2 and more recordings than folds");
  std::vector<std::string> order = ids;
  Rng rng(derive_seed(seed, {0x6b666f6c64ULL}));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<FoldAssignment> folds(k);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t lo = i * order.size() / k, hi = (i + 1) * order.size() / k;
    std::vector<std::string> rest;
    for (std::size_t j = 0; j < order.size(); ++j) {
      if (j >= lo && j < hi) folds[i].test.push_back(order[j]);
      else rest.push_back(order[j]);
    }
    auto n_val = static_cast<std::size_t>(std::lround(val_fraction * rest.size()));
    n_val = std::clamp<std::size_t>(n_val, 1, rest.size() - 1);
    folds[i].val.assign(rest.end() - static_cast<std::ptrdiff_t>(n_val), rest.end());
    folds[i].train.assign(rest.begin(), rest.end() - static_cast<std::ptrdiff_t>(n_val));
  }
  return folds;
}

}  // namespace sedforge
