#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lrc/common.hpp"

namespace lrc {

// Named-tensor archive: a JSON manifest plus one raw row-major little-endian
// binary per tensor. Values are widened to f64 on load and narrowed back on
// save when the recorded dtype is f32, so an f32 archive round-trips bitwise.

static_assert(std::endian::native == std::endian::little,
              "archive payloads are little-endian raw dumps");

enum class DType { F32, F64 };

inline const char* dtype_name(DType t) { return t == DType::F32 ? "f32" : "f64"; }

inline DType dtype_from_name(const std::string& s) {
  if (s == "f32") return DType::F32;
  if (s == "f64") return DType::F64;
  throw FormatError("archive: unknown dtype '" + s + "'");
}

struct TensorEntry {
  std::string name;
  DType dtype = DType::F64;
  std::vector<Index> shape;
  std::vector<double> data;  // row-major, widened

  Index numel() const {
    Index n = 1;
    for (Index s : shape) n *= s;
    return n;
  }
};

class TensorArchive {
 public:
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }

  const TensorEntry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw FormatError("archive: missing tensor '" + name + "'");
    return it->second;
  }

  void put(TensorEntry entry) {
    require(static_cast<Index>(entry.data.size()) == entry.numel(),
            "archive: data length does not match shape");
    entries_[entry.name] = std::move(entry);
  }

  void put_matrix(const std::string& name, const Matrix& m, DType dtype = DType::F64) {
    TensorEntry e;
    e.name = name;
    e.dtype = dtype;
    e.shape = {m.rows(), m.cols()};
    e.data.assign(m.data(), m.data() + m.size());
    entries_[name] = std::move(e);
  }

  void put_vector(const std::string& name, const Vector& v, DType dtype = DType::F64) {
    TensorEntry e;
    e.name = name;
    e.dtype = dtype;
    e.shape = {v.size()};
    e.data.assign(v.data(), v.data() + v.size());
    entries_[name] = std::move(e);
  }

  Matrix matrix(const std::string& name) const {
    const TensorEntry& e = at(name);
    if (e.shape.size() != 2) throw FormatError("archive: tensor '" + name + "' is not 2-d");
    return Eigen::Map<const Matrix>(e.data.data(), e.shape[0], e.shape[1]);
  }

  Vector vector(const std::string& name) const {
    const TensorEntry& e = at(name);
    if (e.shape.size() != 1) throw FormatError("archive: tensor '" + name + "' is not 1-d");
    return Eigen::Map<const Vector>(e.data.data(), e.shape[0]);
  }

  // Name-sorted, so iteration and save order are manifest-order independent.
  const std::map<std::string, TensorEntry>& entries() const { return entries_; }

  size_t size() const { return entries_.size(); }

 private:
  std::map<std::string, TensorEntry> entries_;
};

namespace detail {

inline std::string payload_filename(const std::string& name) { return name + ".bin"; }

}  // namespace detail

inline void save_archive(const TensorArchive& archive, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& [name, e] : archive.entries()) {
    nlohmann::json item;
    item["name"] = name;
    item["dtype"] = dtype_name(e.dtype);
    item["shape"] = e.shape;
    item["file"] = detail::payload_filename(name);
    manifest.push_back(item);

    std::ofstream out(dir / detail::payload_filename(name), std::ios::binary);
    if (!out) throw FormatError("archive: cannot write payload for '" + name + "'");
    if (e.dtype == DType::F64) {
      out.write(reinterpret_cast<const char*>(e.data.data()),
                static_cast<std::streamsize>(e.data.size() * sizeof(double)));
    } else {
      std::vector<float> narrow(e.data.begin(), e.data.end());
      out.write(reinterpret_cast<const char*>(narrow.data()),
                static_cast<std::streamsize>(narrow.size() * sizeof(float)));
    }
  }
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw FormatError("archive: cannot write manifest");
  mf << manifest.dump(2) << '\n';
}

inline TensorArchive load_archive(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw FormatError("archive: missing manifest at " + dir.string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("archive: malformed manifest: ") + e.what());
  }
  if (!manifest.is_array()) throw FormatError("archive: manifest must be an array");

  TensorArchive archive;
  for (const auto& item : manifest) {
    TensorEntry e;
    try {
      e.name = item.at("name").get<std::string>();
      e.dtype = dtype_from_name(item.at("dtype").get<std::string>());
      for (const auto& s : item.at("shape")) e.shape.push_back(s.get<Index>());
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(std::string("archive: bad manifest entry: ") + ex.what());
    }
    if (archive.contains(e.name))
      throw FormatError("archive: duplicate tensor name '" + e.name + "'");

    const std::string file =
        item.contains("file") ? item.at("file").get<std::string>() : detail::payload_filename(e.name);
    std::ifstream in(dir / file, std::ios::binary | std::ios::ate);
    if (!in) throw FormatError("archive: missing payload '" + file + "'");
    const auto bytes = static_cast<size_t>(in.tellg());
    in.seekg(0);

    const auto n = static_cast<size_t>(e.numel());
    const size_t width = e.dtype == DType::F64 ? sizeof(double) : sizeof(float);
    if (bytes != n * width)
      throw FormatError("archive: payload size mismatch for '" + e.name + "'");

    e.data.resize(n);
    if (e.dtype == DType::F64) {
      in.read(reinterpret_cast<char*>(e.data.data()), static_cast<std::streamsize>(bytes));
    } else {
      std::vector<float> narrow(n);
      in.read(reinterpret_cast<char*>(narrow.data()), static_cast<std::streamsize>(bytes));
      for (size_t i = 0; i < n; ++i) e.data[i] = static_cast<double>(narrow[i]);
    }
    if (!in) throw FormatError("archive: short read on '" + e.name + "'");
    archive.put(std::move(e));
  }
  return archive;
}

}  // namespace lrc
