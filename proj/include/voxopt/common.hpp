#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxopt {

/// Malformed external input (STL streams, VOXB files, manifests).
/// Carries the byte offset at which parsing failed where that is meaningful.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t byte_offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
        offset_(byte_offset) {}
  explicit ParseError(const std::string& what) : std::runtime_error(what), offset_(0) {}
  std::size_t byte_offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Violated precondition or domain-type invariant.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Filesystem / OS level failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// FNV-1a over a byte range. Stable across platforms; used for checkpoint
/// identity in summaries and latent files, not for security.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::string fnv1a64_hex(const void* data, std::size_t n);
std::string file_fnv1a64_hex(const std::string& path);

std::vector<unsigned char> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const void* data, std::size_t n);

}  // namespace voxopt
