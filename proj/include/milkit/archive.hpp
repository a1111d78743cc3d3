#pragma once

// Named-tensor archive, little-endian:
//
//   "MILW" | u32 version=1 | u32 count
//   count records of: u32 name_len | name bytes | u32 rank (1 or 2)
//                     | rank u32 dims | f64 payload, row-major
//
// Scalars travel as rank-1 tensors of length 1. Entry order is preserved so
// a rewritten archive is byte-identical.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "milkit/common.hpp"
#include "milkit/dataio.hpp"

namespace milkit {

struct ArchiveEntry {
  std::string name;
  std::uint32_t rank = 2;  // 1 = vector, 2 = matrix
  Matrix value;            // rank-1 stored as n x 1
};

class TensorArchive {
 public:
  void put(const std::string& name, const Matrix& m) {
    if (find(name) >= 0) throw ValidationError("archive: duplicate entry '" + name + "'");
    entries_.push_back({name, 2, m});
  }

  void put(const std::string& name, const Vector& v) {
    if (find(name) >= 0) throw ValidationError("archive: duplicate entry '" + name + "'");
    entries_.push_back({name, 1, v});
  }

  void put_scalar(const std::string& name, double v) {
    Vector s(1);
    s(0) = v;
    put(name, s);
  }

  bool has(const std::string& name) const { return find(name) >= 0; }

  const Matrix& get(const std::string& name) const {
    int i = find(name);
    if (i < 0) throw RuntimeFailure("archive: missing entry '" + name + "'");
    return entries_[static_cast<size_t>(i)].value;
  }

  Vector get_vector(const std::string& name) const {
    const Matrix& m = get(name);
    if (m.cols() != 1) throw RuntimeFailure("archive: entry '" + name + "' is not a vector");
    return m.col(0);
  }

  double get_scalar(const std::string& name) const {
    const Matrix& m = get(name);
    if (m.size() != 1) throw RuntimeFailure("archive: entry '" + name + "' is not a scalar");
    return m(0, 0);
  }

  const std::vector<ArchiveEntry>& entries() const { return entries_; }

  void save(const std::filesystem::path& path) const {
    auto os = detail::open_out(path);
    os.write("MILW", 4);
    detail::put_u32(os, 1);
    detail::put_u32(os, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      detail::put_u32(os, static_cast<std::uint32_t>(e.name.size()));
      os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      detail::put_u32(os, e.rank);
      if (e.rank == 1) {
        detail::put_u32(os, static_cast<std::uint32_t>(e.value.rows()));
      } else {
        detail::put_u32(os, static_cast<std::uint32_t>(e.value.rows()));
        detail::put_u32(os, static_cast<std::uint32_t>(e.value.cols()));
      }
      for (int r = 0; r < e.value.rows(); ++r)
        for (int c = 0; c < e.value.cols(); ++c) detail::put_f64(os, e.value(r, c));
    }
    if (!os) throw RuntimeFailure("write failed: " + path.string());
  }

  static TensorArchive load(const std::filesystem::path& path) {
    auto is = detail::open_in(path);
    detail::expect_magic(is, "MILW", path.string());
    if (detail::get_u32(is, "version") != 1)
      throw RuntimeFailure(path.string() + ": unknown archive version");
    std::uint32_t count = detail::get_u32(is, "count");
    TensorArchive ar;
    for (std::uint32_t i = 0; i < count; ++i) {
      std::uint32_t name_len = detail::get_u32(is, "name length");
      std::string name(name_len, '\0');
      if (name_len && !detail::get_bytes(is, reinterpret_cast<unsigned char*>(name.data()), name_len))
        throw RuntimeFailure(path.string() + ": truncated entry name");
      std::uint32_t rank = detail::get_u32(is, "rank");
      if (rank != 1 && rank != 2) throw RuntimeFailure(path.string() + ": bad tensor rank");
      std::uint32_t rows = detail::get_u32(is, "dims");
      std::uint32_t cols = rank == 2 ? detail::get_u32(is, "dims") : 1;
      ArchiveEntry e;
      e.name = std::move(name);
      e.rank = rank;
      e.value.resize(rows, cols);
      for (std::uint32_t r = 0; r < rows; ++r)
        for (std::uint32_t c = 0; c < cols; ++c)
          e.value(static_cast<int>(r), static_cast<int>(c)) = detail::get_f64(is, "tensor payload");
      ar.entries_.push_back(std::move(e));
    }
    return ar;
  }

 private:
  int find(const std::string& name) const {
    for (size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return static_cast<int>(i);
    return -1;
  }

  std::vector<ArchiveEntry> entries_;
};

}  // namespace milkit
