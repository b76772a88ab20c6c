#pragma once

// Binary file plumbing shared by the corpus / trajectory / model formats.
// All multi-byte fields are little-endian regardless of host.

#include "latte/core.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace latte {

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error::internal("cannot open for writing: " + path);
  return out;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error::dependency("cannot open: " + path);
  return in;
}

template <typename T>
void write_pod(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T)))
    throw Error::validation("truncated file while reading " + what);
  return value;
}

inline void write_bytes(std::ostream& out, const void* data, std::size_t n) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& in, void* data, std::size_t n, const std::string& what) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n))
    throw Error::validation("truncated file while reading " + what);
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  write_bytes(out, s.data(), s.size());
}

inline std::string read_string(std::istream& in, const std::string& what,
                               std::uint32_t max_len = 1u << 24) {
  const auto len = read_pod<std::uint32_t>(in, what + " length");
  if (len > max_len) throw Error::validation("unreasonable string length in " + what);
  std::string s(len, '\0');
  if (len > 0) read_bytes(in, s.data(), len, what);
  return s;
}

// FNV-1a: the stable content hash used for artifact staleness checks and for
// tagging token embeddings with the model that produced them.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

inline std::string read_file(const std::string& path) {
  auto in = open_in(path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  auto out = open_out(path);
  write_bytes(out, content.data(), content.size());
  if (!out) throw Error::internal("write failed: " + path);
}

inline std::uint64_t hash_file(const std::string& path) {
  const std::string bytes = read_file(path);
  return fnv1a(bytes.data(), bytes.size());
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace latte
