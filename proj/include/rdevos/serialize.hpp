#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <istream>
#include <map>
#include <ostream>
#include <string>

#include "rdevos/tensor.hpp"

// Binary tensor record, little-endian:
//   "RDVT" | u8 version=1 | u8 dtype (1 = f64, 2 = f32) | u32 rank |
//   rank x u64 dims | row-major payload
// An archive is "RDVA" | u32 count | count x (u32 name length | name | record),
// entries sorted by name.
namespace rdevos {

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

template <typename Scalar>
constexpr std::uint8_t dtype_tag() {
  if constexpr (std::is_same_v<Scalar, double>) return 1;
  else if constexpr (std::is_same_v<Scalar, float>) return 2;
  else static_assert(sizeof(Scalar) == 0, "unsupported tensor scalar");
}

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("truncated tensor stream");
  return v;
}

}  // namespace detail

template <typename Scalar>
void write_tensor(std::ostream& os, const BasicTensor<Scalar>& t) {
  os.write("RDVT", 4);
  detail::write_pod<std::uint8_t>(os, 1);
  detail::write_pod<std::uint8_t>(os, dtype_tag<Scalar>());
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
}

template <typename Scalar = double>
BasicTensor<Scalar> read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RDVT", 4) != 0) throw std::runtime_error("bad tensor record magic");
  if (detail::read_pod<std::uint8_t>(is) != 1) throw std::runtime_error("unsupported tensor record version");
  const auto tag = detail::read_pod<std::uint8_t>(is);
  if (tag != dtype_tag<Scalar>()) throw std::runtime_error("tensor dtype tag mismatch");
  const auto rank = detail::read_pod<std::uint32_t>(is);
  if (rank > 16) throw std::runtime_error("implausible tensor rank");
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<Index>(detail::read_pod<std::uint64_t>(is));
  BasicTensor<Scalar> t(shape);
  is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
  if (!is) throw std::runtime_error("truncated tensor payload");
  return t;
}

/// Named tensor collection used for parameter sets and fixtures.
using TensorArchive = std::map<std::string, Tensor>;

void write_archive(std::ostream& os, const TensorArchive& archive);
TensorArchive read_archive(std::istream& is);

void save_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive load_archive(const std::filesystem::path& path);

/// Fetches `name` or throws a descriptive error.
const Tensor& archive_get(const TensorArchive& archive, const std::string& name);

}  // namespace rdevos
