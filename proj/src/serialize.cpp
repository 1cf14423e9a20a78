#include "rdevos/serialize.hpp"

#include <fstream>

namespace rdevos {

void write_archive(std::ostream& os, const TensorArchive& archive) {
  os.write("RDVA", 4);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(archive.size()));
  for (const auto& [name, t] : archive) {
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
}

TensorArchive read_archive(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RDVA", 4) != 0) throw std::runtime_error("bad tensor archive magic");
  const auto count = detail::read_pod<std::uint32_t>(is);
  TensorArchive out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::read_pod<std::uint32_t>(is);
    if (len > 4096) throw std::runtime_error("implausible archive entry name length");
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw std::runtime_error("truncated archive entry name");
    out.emplace(std::move(name), read_tensor<double>(is));
  }
  return out;
}

void save_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_archive(os, archive);
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_archive(is);
}

const Tensor& archive_get(const TensorArchive& archive, const std::string& name) {
  auto it = archive.find(name);
  if (it == archive.end()) throw std::runtime_error("archive has no entry '" + name + "'");
  return it->second;
}

}  // namespace rdevos
