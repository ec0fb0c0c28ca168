#pragma once

// Binary parameter files.
//
//   "GNNW"                      4 bytes
//   u32 format version          (currently 1)
//   u32 hyperparameter count, then per entry:
//       u32 name length, name bytes, i64 value
//   u32 parameter count, then per parameter:
//       u32 name length, name bytes, u32 rank, rank x u32 extents,
//       numel x f64 raw values
//
// All integers and floats are little-endian.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "gnnet/error.hpp"
#include "gnnet/tensor.hpp"

namespace gnnet {

inline constexpr char kWeightsMagic[4] = {'G', 'N', 'N', 'W'};
inline constexpr std::uint32_t kWeightsVersion = 1;

struct NamedTensor {
  std::string name;
  tensor::Tensor value;
};

struct ParameterFile {
  std::vector<std::pair<std::string, std::int64_t>> hyperparameters;
  std::vector<NamedTensor> parameters;
};

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get_le(std::istream& is, const char* what) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw TruncatedError(std::string("weights file truncated while reading ") + what);
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

inline void put_name(std::ostream& os, const std::string& s) {
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_name(std::istream& is) {
  const auto n = get_le<std::uint32_t>(is, "name length");
  if (n > (1u << 16)) throw DataError("weights file: implausible name length");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw TruncatedError("weights file truncated inside a name");
  return s;
}

}  // namespace detail

inline void write_parameter_file(std::ostream& os, const ParameterFile& file) {
  os.write(kWeightsMagic, 4);
  detail::put_le<std::uint32_t>(os, kWeightsVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(file.hyperparameters.size()));
  for (const auto& [name, value] : file.hyperparameters) {
    detail::put_name(os, name);
    detail::put_le<std::int64_t>(os, value);
  }
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(file.parameters.size()));
  for (const auto& p : file.parameters) {
    detail::put_name(os, p.name);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t e : p.value.shape()) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
    for (double v : p.value.data()) detail::put_le<double>(os, v);
  }
  if (!os) throw DataError("weights file: write failed");
}

inline ParameterFile read_parameter_file(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw TruncatedError("weights file truncated in magic");
  if (std::memcmp(magic, kWeightsMagic, 4) != 0) throw VersionError("weights file: bad magic");
  const auto version = detail::get_le<std::uint32_t>(is, "version");
  if (version != kWeightsVersion) {
    throw VersionError("weights file: unsupported version " + std::to_string(version));
  }
  ParameterFile file;
  const auto n_hyper = detail::get_le<std::uint32_t>(is, "hyperparameter count");
  for (std::uint32_t i = 0; i < n_hyper; ++i) {
    std::string name = detail::get_name(is);
    file.hyperparameters.emplace_back(std::move(name), detail::get_le<std::int64_t>(is, "hyperparameter"));
  }
  const auto n_params = detail::get_le<std::uint32_t>(is, "parameter count");
  for (std::uint32_t i = 0; i < n_params; ++i) {
    NamedTensor p;
    p.name = detail::get_name(is);
    const auto rank = detail::get_le<std::uint32_t>(is, "rank");
    if (rank > 8) throw DataError("weights file: implausible rank for " + p.name);
    tensor::Shape shape(rank);
    for (auto& e : shape) e = detail::get_le<std::uint32_t>(is, "extent");
    if (tensor::numel(shape) > (std::size_t{1} << 28)) {
      throw DataError("weights file: implausible tensor size for " + p.name);
    }
    std::vector<double> data(tensor::numel(shape));
    for (auto& v : data) v = detail::get_le<double>(is, "parameter data");
    p.value = tensor::Tensor(std::move(shape), std::move(data));
    file.parameters.push_back(std::move(p));
  }
  return file;
}

inline void save_parameter_file(const std::string& path, const ParameterFile& file) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open for writing: " + path);
  write_parameter_file(os, file);
}

inline ParameterFile load_parameter_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open weights file: " + path);
  return read_parameter_file(is);
}

}  // namespace gnnet
