#pragma once

// EmbeddingStore: a dense matrix of f32 rows behind a validated binary file.
// Rows are precomputed text-encoder outputs; the pipeline never runs an
// encoder itself. Math happens in f64, files stay f32.
//
// File layout (little-endian):
//   magic "LATTEEMB" | u32 version=1 | u32 dim | u64 count | count*dim f32 rows

#include "latte/audit.hpp"
#include "latte/core.hpp"
#include "latte/io_util.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace latte {

inline constexpr char kEmbeddingMagic[8] = {'L', 'A', 'T', 'T', 'E', 'E', 'M', 'B'};

class EmbeddingStore {
 public:
  EmbeddingStore() = default;

  EmbeddingStore(std::uint32_t dim, std::vector<float> data)
      : dim_(dim), data_(std::move(data)) {
    if (dim_ == 0) throw Error::validation("embedding dim must be positive");
    if (data_.size() % dim_ != 0)
      throw Error::internal("embedding buffer size not a multiple of dim");
  }

  std::uint32_t dim() const { return dim_; }
  std::uint64_t count() const { return dim_ == 0 ? 0 : data_.size() / dim_; }

  // f64 copy of a row; every pipeline read goes through here so the audit
  // sees the complete access trace.
  Vec row(std::uint64_t index, AccessAudit* audit = nullptr) const {
    if (index >= count())
      throw Error::validation("embedding index " + std::to_string(index) +
                              " out of range (count " + std::to_string(count()) + ")");
    if (audit != nullptr) audit->record(index);
    Vec v(dim_);
    const float* base = data_.data() + index * dim_;
    for (std::uint32_t i = 0; i < dim_; ++i) v[i] = static_cast<double>(base[i]);
    return v;
  }

  const std::vector<float>& raw() const { return data_; }

  void save(const std::string& path) const {
    auto out = open_out(path);
    write_bytes(out, kEmbeddingMagic, sizeof(kEmbeddingMagic));
    write_pod<std::uint32_t>(out, 1);
    write_pod<std::uint32_t>(out, dim_);
    write_pod<std::uint64_t>(out, count());
    write_bytes(out, data_.data(), data_.size() * sizeof(float));
    if (!out) throw Error::internal("write failed: " + path);
  }

 private:
  std::uint32_t dim_ = 0;
  std::vector<float> data_;
};

// Loads and validates an embeddings file. Rows must be unit norm within
// `unit_tol` unless `require_unit` is false (raw synthetic latents use that).
// expected_dim 0 accepts whatever dim the file declares.
inline EmbeddingStore load_embeddings(const std::string& path,
                                      std::uint32_t expected_dim = 0,
                                      bool require_unit = true,
                                      double unit_tol = 1e-3) {
  auto in = open_in(path);
  char magic[8];
  read_bytes(in, magic, sizeof(magic), "embeddings magic");
  if (std::memcmp(magic, kEmbeddingMagic, sizeof(magic)) != 0)
    throw Error::validation("not an embeddings file (bad magic): " + path);
  const auto version = read_pod<std::uint32_t>(in, "embeddings version");
  if (version != 1)
    throw Error::validation("unsupported embeddings version " + std::to_string(version));
  const auto dim = read_pod<std::uint32_t>(in, "embeddings dim");
  if (dim == 0) throw Error::validation("embeddings dim is zero: " + path);
  if (expected_dim != 0 && dim != expected_dim)
    throw Error::validation("embedding dim mismatch: file has " + std::to_string(dim) +
                            ", expected " + std::to_string(expected_dim));
  const auto count = read_pod<std::uint64_t>(in, "embeddings count");
  std::vector<float> data(static_cast<std::size_t>(count) * dim);
  if (!data.empty())
    read_bytes(in, data.data(), data.size() * sizeof(float), "embedding rows");
  char extra;
  if (in.read(&extra, 1).gcount() != 0)
    throw Error::validation("trailing bytes after embedding rows: " + path);

  if (require_unit) {
    for (std::uint64_t r = 0; r < count; ++r) {
      double sq = 0.0;
      const float* base = data.data() + r * dim;
      for (std::uint32_t i = 0; i < dim; ++i)
        sq += static_cast<double>(base[i]) * static_cast<double>(base[i]);
      const double norm = std::sqrt(sq);
      if (std::abs(norm - 1.0) > unit_tol)
        throw Error::validation("embedding row " + std::to_string(r) +
                                " is not unit norm (|" + std::to_string(norm) +
                                " - 1| > tol)");
    }
  }
  return EmbeddingStore(dim, std::move(data));
}

}  // namespace latte
