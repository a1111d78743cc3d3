#pragma once

// On-disk formats, all little-endian:
//
//   feature bag       "MILB" | u32 version=1 | u32 N | u32 d | N*d f32, row-major
//   instance labels   "MILL" | u32 version=1 | u32 N | N u16
//   grid coordinates  "MILC" | u32 version=1 | u32 N | N pairs of u32 (row, col)
//
// The dataset manifest is a JSON document: `classes` (array of names, normal
// tissue last), `feature_dim`, and `slides` (records with slide_id,
// feature_path, slide_label, split, optional instance_label_path /
// coords_path). Paths are resolved relative to the manifest's directory.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "milkit/common.hpp"
#include "milkit/rng.hpp"

namespace milkit {

struct LabelSpace {
  std::vector<std::string> class_names;  // normal tissue is by convention last
  int normal_index = -1;

  int num_classes() const { return static_cast<int>(class_names.size()); }

  void validate() const {
    if (num_classes() < 2) throw ValidationError("label space needs at least 2 classes");
    if (normal_index < 0 || normal_index >= num_classes())
      throw ValidationError("normal_index out of range");
    std::set<std::string> seen(class_names.begin(), class_names.end());
    if (static_cast<int>(seen.size()) != num_classes())
      throw ValidationError("class names must be unique");
  }

  int index_of(const std::string& name) const {
    for (int i = 0; i < num_classes(); ++i)
      if (class_names[static_cast<size_t>(i)] == name) return i;
    throw ValidationError("unknown label name: " + name);
  }
};

/// One slide's instances: an N x d feature matrix plus optional per-instance
/// labels and patch-grid coordinates.
struct FeatureBag {
  std::string slide_id;
  Matrix features;  // N x d
  std::optional<std::vector<int>> instance_labels;
  std::optional<std::vector<std::array<std::uint32_t, 2>>> coords;  // (row, col)

  int num_instances() const { return static_cast<int>(features.rows()); }
  int dim() const { return static_cast<int>(features.cols()); }
};

inline void validate_bag(const FeatureBag& bag, int num_classes = -1) {
  if (bag.num_instances() < 1) throw ValidationError("bag " + bag.slide_id + ": N must be >= 1");
  if (bag.dim() < 1) throw ValidationError("bag " + bag.slide_id + ": d must be >= 1");
  if (bag.instance_labels) {
    if (static_cast<int>(bag.instance_labels->size()) != bag.num_instances())
      throw ValidationError("bag " + bag.slide_id + ": instance label count != N");
    if (num_classes > 0)
      for (int l : *bag.instance_labels)
        if (l < 0 || l >= num_classes)
          throw ValidationError("bag " + bag.slide_id + ": instance label out of range");
  }
  if (bag.coords) {
    if (static_cast<int>(bag.coords->size()) != bag.num_instances())
      throw ValidationError("bag " + bag.slide_id + ": coordinate count != N");
    std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
    for (const auto& rc : *bag.coords)
      if (!seen.insert({rc[0], rc[1]}).second)
        throw ValidationError("bag " + bag.slide_id + ": duplicate grid coordinate");
  }
}

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

inline void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

inline void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u32(os, static_cast<std::uint32_t>(bits));
  put_u32(os, static_cast<std::uint32_t>(bits >> 32));
}

inline bool get_bytes(std::istream& is, unsigned char* out, size_t n) {
  is.read(reinterpret_cast<char*>(out), static_cast<std::streamsize>(n));
  return static_cast<size_t>(is.gcount()) == n;
}

inline std::uint32_t get_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!get_bytes(is, b, 4)) throw RuntimeFailure("truncated file while reading " + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint16_t get_u16(std::istream& is, const std::string& what) {
  unsigned char b[2];
  if (!get_bytes(is, b, 2)) throw RuntimeFailure("truncated file while reading " + what);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline float get_f32(std::istream& is, const std::string& what) {
  std::uint32_t bits = get_u32(is, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline double get_f64(std::istream& is, const std::string& what) {
  std::uint64_t lo = get_u32(is, what);
  std::uint64_t hi = get_u32(is, what);
  std::uint64_t bits = lo | (hi << 32);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& path) {
  unsigned char b[4];
  if (!get_bytes(is, b, 4)) throw RuntimeFailure(path + ": truncated magic");
  if (std::memcmp(b, magic, 4) != 0) throw RuntimeFailure(path + ": bad magic (expected " + magic + ")");
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw RuntimeFailure("cannot open for writing: " + path.string());
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeFailure("cannot open for reading: " + path.string());
  return is;
}

}  // namespace detail

inline void write_bag(const FeatureBag& bag, const std::filesystem::path& path) {
  validate_bag(bag);
  auto n = static_cast<std::uint64_t>(bag.num_instances());
  auto d = static_cast<std::uint64_t>(bag.dim());
  if (n > 0xffffffffULL || d > 0xffffffffULL || n * d > 0xffffffffULL)
    throw ValidationError("bag too large for the 32-bit header fields");
  auto os = detail::open_out(path);
  os.write("MILB", 4);
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<std::uint32_t>(n));
  detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (int r = 0; r < bag.features.rows(); ++r)
    for (int c = 0; c < bag.features.cols(); ++c)
      detail::put_f32(os, static_cast<float>(bag.features(r, c)));
  if (!os) throw RuntimeFailure("write failed: " + path.string());
}

/// Header-only peek: (N, d) without reading the payload.
inline std::pair<std::uint32_t, std::uint32_t> read_bag_header(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  detail::expect_magic(is, "MILB", path.string());
  std::uint32_t version = detail::get_u32(is, "version");
  if (version != 1) throw RuntimeFailure(path.string() + ": unknown bag format version");
  std::uint32_t n = detail::get_u32(is, "N");
  std::uint32_t d = detail::get_u32(is, "d");
  return {n, d};
}

inline FeatureBag read_bag(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  detail::expect_magic(is, "MILB", path.string());
  std::uint32_t version = detail::get_u32(is, "version");
  if (version != 1) throw RuntimeFailure(path.string() + ": unknown bag format version");
  std::uint32_t n = detail::get_u32(is, "N");
  std::uint32_t d = detail::get_u32(is, "d");
  FeatureBag bag;
  bag.slide_id = path.stem().string();
  bag.features.resize(n, d);
  for (std::uint32_t r = 0; r < n; ++r)
    for (std::uint32_t c = 0; c < d; ++c)
      bag.features(static_cast<int>(r), static_cast<int>(c)) =
          static_cast<double>(detail::get_f32(is, path.string() + " payload"));
  return bag;
}

inline void write_instance_labels(const std::vector<int>& labels, const std::filesystem::path& path) {
  auto os = detail::open_out(path);
  os.write("MILL", 4);
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 0xffff) throw ValidationError("instance label out of u16 range");
    detail::put_u16(os, static_cast<std::uint16_t>(l));
  }
  if (!os) throw RuntimeFailure("write failed: " + path.string());
}

inline std::vector<int> read_instance_labels(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  detail::expect_magic(is, "MILL", path.string());
  if (detail::get_u32(is, "version") != 1)
    throw RuntimeFailure(path.string() + ": unknown label format version");
  std::uint32_t n = detail::get_u32(is, "N");
  std::vector<int> labels(n);
  for (std::uint32_t i = 0; i < n; ++i) labels[i] = detail::get_u16(is, "label payload");
  return labels;
}

inline void write_coords(const std::vector<std::array<std::uint32_t, 2>>& coords,
                         const std::filesystem::path& path) {
  auto os = detail::open_out(path);
  os.write("MILC", 4);
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<std::uint32_t>(coords.size()));
  for (const auto& rc : coords) {
    detail::put_u32(os, rc[0]);
    detail::put_u32(os, rc[1]);
  }
  if (!os) throw RuntimeFailure("write failed: " + path.string());
}

inline std::vector<std::array<std::uint32_t, 2>> read_coords(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  detail::expect_magic(is, "MILC", path.string());
  if (detail::get_u32(is, "version") != 1)
    throw RuntimeFailure(path.string() + ": unknown coords format version");
  std::uint32_t n = detail::get_u32(is, "N");
  std::vector<std::array<std::uint32_t, 2>> coords(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    coords[i][0] = detail::get_u32(is, "coord payload");
    coords[i][1] = detail::get_u32(is, "coord payload");
  }
  return coords;
}

struct ManifestEntry {
  std::string slide_id;
  std::string feature_path;
  int slide_label = -1;
  std::string split;  // "train" | "test"
  std::optional<std::string> instance_label_path;
  std::optional<std::string> coords_path;
};

struct DatasetManifest {
  LabelSpace label_space;
  std::vector<ManifestEntry> entries;
  int feature_dim = 0;
  std::filesystem::path base_dir;  // sibling paths resolve against this

  std::filesystem::path resolve(const std::string& rel) const { return base_dir / rel; }

  std::vector<const ManifestEntry*> split_entries(const std::string& split) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
      if (e.split == split) out.push_back(&e);
    return out;
  }
};

/// Loads a bag together with its manifest sidecars, validated against the
/// label space.
inline FeatureBag load_bag(const DatasetManifest& m, const ManifestEntry& e) {
  FeatureBag bag = read_bag(m.resolve(e.feature_path));
  bag.slide_id = e.slide_id;
  if (e.instance_label_path) bag.instance_labels = read_instance_labels(m.resolve(*e.instance_label_path));
  if (e.coords_path) bag.coords = read_coords(m.resolve(*e.coords_path));
  validate_bag(bag, m.label_space.num_classes());
  return bag;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw RuntimeFailure("cannot open manifest: " + path.string());
  nlohmann::json doc;
  try {
    is >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest parse error: " + std::string(e.what()));
  }
  for (const auto& [key, _] : doc.items())
    if (key != "classes" && key != "feature_dim" && key != "slides")
      throw ValidationError("manifest: unknown key '" + key + "'");
  if (!doc.contains("classes") || !doc.contains("slides"))
    throw ValidationError("manifest: 'classes' and 'slides' are required");

  DatasetManifest m;
  m.base_dir = path.parent_path();
  for (const auto& c : doc["classes"]) m.label_space.class_names.push_back(c.get<std::string>());
  m.label_space.normal_index = m.label_space.num_classes() - 1;
  m.label_space.validate();

  std::set<std::string> ids;
  for (const auto& rec : doc["slides"]) {
    for (const auto& [key, _] : rec.items())
      if (key != "slide_id" && key != "feature_path" && key != "slide_label" && key != "split" &&
          key != "instance_label_path" && key != "coords_path")
        throw ValidationError("manifest slide record: unknown key '" + key + "'");
    ManifestEntry e;
    e.slide_id = rec.at("slide_id").get<std::string>();
    if (!ids.insert(e.slide_id).second)
      throw ValidationError("manifest: duplicate slide_id '" + e.slide_id + "'");
    e.feature_path = rec.at("feature_path").get<std::string>();
    const auto& lbl = rec.at("slide_label");
    e.slide_label = lbl.is_string() ? m.label_space.index_of(lbl.get<std::string>())
                                    : lbl.get<int>();
    if (e.slide_label < 0 || e.slide_label >= m.label_space.num_classes())
      throw ValidationError("manifest: slide_label out of range for '" + e.slide_id + "'");
    e.split = rec.at("split").get<std::string>();
    if (e.split != "train" && e.split != "test")
      throw ValidationError("manifest: split must be train|test for '" + e.slide_id + "'");
    if (rec.contains("instance_label_path")) e.instance_label_path = rec["instance_label_path"].get<std::string>();
    if (rec.contains("coords_path")) e.coords_path = rec["coords_path"].get<std::string>();
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty()) throw ValidationError("manifest: no slides");

  // Feature dim comes from the first bag; every other header must agree,
  // as must an explicit feature_dim key when present.
  for (const auto& e : m.entries) {
    auto fp = m.resolve(e.feature_path);
    if (!std::filesystem::exists(fp))
      throw ValidationError("manifest: missing feature file for slide '" + e.slide_id + "'");
    auto [n, d] = read_bag_header(fp);
    if (m.feature_dim == 0) m.feature_dim = static_cast<int>(d);
    if (static_cast<int>(d) != m.feature_dim)
      throw ValidationError("manifest: feature dim mismatch for slide '" + e.slide_id + "'");
    if (e.instance_label_path) {
      auto labels = read_instance_labels(m.resolve(*e.instance_label_path));
      if (labels.size() != n)
        throw ValidationError("manifest: instance label count mismatch for '" + e.slide_id + "'");
      for (int l : labels)
        if (l >= m.label_space.num_classes())
          throw ValidationError("manifest: instance label out of range for '" + e.slide_id + "'");
    }
    if (e.coords_path) {
      auto coords = read_coords(m.resolve(*e.coords_path));
      if (coords.size() != n)
        throw ValidationError("manifest: coordinate count mismatch for '" + e.slide_id + "'");
    }
  }
  if (doc.contains("feature_dim") && doc["feature_dim"].get<int>() != m.feature_dim)
    throw ValidationError("manifest: declared feature_dim disagrees with bag headers");
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  nlohmann::json doc;
  doc["classes"] = m.label_space.class_names;
  doc["feature_dim"] = m.feature_dim;
  doc["slides"] = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json rec{{"slide_id", e.slide_id},
                       {"feature_path", e.feature_path},
                       {"slide_label", e.slide_label},
                       {"split", e.split}};
    if (e.instance_label_path) rec["instance_label_path"] = *e.instance_label_path;
    if (e.coords_path) rec["coords_path"] = *e.coords_path;
    doc["slides"].push_back(rec);
  }
  std::ofstream os(path);
  if (!os) throw RuntimeFailure("cannot write manifest: " + path.string());
  os << doc.dump(2) << "\n";
}

struct FoldAssignment {
  int k = 0;
  std::map<std::string, int> assignment;  // slide_id -> fold

  std::vector<std::string> fold_slides(int fold) const {
    std::vector<std::string> out;
    for (const auto& [id, f] : assignment)
      if (f == fold) out.push_back(id);
    return out;
  }
};

/// Stratified k-fold over the train split: per class, a seeded shuffle then
/// round-robin dealing, so per-class fold counts differ by at most 1.
inline FoldAssignment stratified_kfold(const DatasetManifest& m, int k, std::uint64_t seed,
                                       WarningLog* log = nullptr) {
  if (k < 2) throw ValidationError("stratified_kfold: k must be >= 2");
  std::map<int, std::vector<std::string>> by_class;
  for (const auto& e : m.entries)
    if (e.split == "train") by_class[e.slide_label].push_back(e.slide_id);
  if (by_class.empty()) throw ValidationError("stratified_kfold: no train slides");
  for (int c = 0; c < m.label_space.num_classes(); ++c)
    if (!by_class.count(c))
      throw ValidationError("stratified_kfold: class '" + m.label_space.class_names[static_cast<size_t>(c)] +
                            "' has no train slides");

  FoldAssignment fa;
  fa.k = k;
  for (auto& [cls, ids] : by_class) {
    std::sort(ids.begin(), ids.end());
    Rng rng = substream({seed, 0x0f01dULL, static_cast<std::uint64_t>(cls)});
    for (int i = static_cast<int>(ids.size()) - 1; i > 0; --i)
      std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(rng.uniform_int(i + 1))]);
    if (static_cast<int>(ids.size()) < k)
      warn(log, "stratified_kfold: class " + m.label_space.class_names[static_cast<size_t>(cls)] +
                    " has fewer slides than folds; it will be absent from some validation folds");
    for (size_t i = 0; i < ids.size(); ++i) fa.assignment[ids[i]] = static_cast<int>(i % static_cast<size_t>(k));
  }
  return fa;
}

/// Epoch ordering with replacement: each draw picks a class uniformly
/// (probability 1/C over the classes present), then a slide uniformly within
/// it. Deterministic per seed.
inline std::vector<int> balanced_sample_order(const std::vector<int>& slide_labels, int epoch_length,
                                              std::uint64_t seed) {
  if (slide_labels.empty()) throw ValidationError("balanced_sample_order: empty label set");
  std::map<int, std::vector<int>> by_class;
  for (size_t i = 0; i < slide_labels.size(); ++i) by_class[slide_labels[i]].push_back(static_cast<int>(i));
  std::vector<std::vector<int>> classes;
  for (auto& [_, idx] : by_class) classes.push_back(std::move(idx));

  Rng rng = substream({seed, 0xba1a2cedULL});
  std::vector<int> order;
  order.reserve(static_cast<size_t>(epoch_length));
  for (int i = 0; i < epoch_length; ++i) {
    const auto& cls = classes[static_cast<size_t>(rng.uniform_int(static_cast<int>(classes.size())))];
    order.push_back(cls[static_cast<size_t>(rng.uniform_int(static_cast<int>(cls.size())))]);
  }
  return order;
}

}  // namespace milkit
