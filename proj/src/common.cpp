#include "voxopt/common.hpp"

#include <cstdio>
#include <fstream>

namespace voxopt {

std::string fnv1a64_hex(const void* data, std::size_t n) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(data, n)));
  return std::string(buf);
}

std::string file_fnv1a64_hex(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return fnv1a64_hex(bytes.data(), bytes.size());
}

std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  f.seekg(0, std::ios::end);
  const std::streamoff len = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(len));
  if (len > 0 && !f.read(reinterpret_cast<char*>(bytes.data()), len)) {
    throw IoError("read failed: " + path);
  }
  return bytes;
}

void write_file_bytes(const std::string& path, const void* data, std::size_t n) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  if (n > 0) f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace voxopt
