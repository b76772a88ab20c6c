#pragma once

// Flat parameter block with named sections, shared by the learned predictors
// and the bridge. One contiguous f64 vector keeps the optimizer trivial; a
// section is viewed as a column-major matrix (or a vector when cols == 1).
//
// Checkpoint format (little-endian):
//   magic "LATTEMDL" | u32 version=1 | arch tag (u32 len + bytes)
//   hyper block (u32 len + JSON bytes) | u32 section count
//   per section: name (u32 len + bytes) | u64 rows | u64 cols
//   payload: all sections' coefficients in declaration order, f64,
//            column-major within each section.

#include "latte/core.hpp"
#include "latte/io_util.hpp"
#include "latte/rng.hpp"

#include <map>
#include <string>
#include <vector>

namespace latte {

struct ParamSection {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 1;
  Eigen::Index fan_in = 0;  // 0 => zero-init; else uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
  Eigen::Index offset = 0;
};

class ParamBlock {
 public:
  using MatMap = Eigen::Map<Mat>;
  using ConstMatMap = Eigen::Map<const Mat>;
  using VecMap = Eigen::Map<Vec>;
  using ConstVecMap = Eigen::Map<const Vec>;

  ParamBlock() = default;

  // Declares a section; returns its index for cached hot-path access.
  std::size_t add(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                  Eigen::Index fan_in) {
    ParamSection s{name, rows, cols, fan_in, total_};
    total_ += rows * cols;
    by_name_[name] = sections_.size();
    sections_.push_back(s);
    return sections_.size() - 1;
  }

  void allocate() { flat = Vec::Zero(total_); }

  void init(std::uint64_t seed, const std::string& tag) {
    allocate();
    Rng rng(seed, stream_of(tag));
    for (const auto& s : sections_) {
      if (s.fan_in == 0) continue;  // biases start at zero
      const double bound = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
      for (Eigen::Index i = 0; i < s.rows * s.cols; ++i)
        flat[s.offset + i] = rng.uniform(-bound, bound);
    }
  }

  std::size_t section_count() const { return sections_.size(); }
  const ParamSection& section(std::size_t i) const { return sections_.at(i); }

  std::size_t index_of(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw Error::internal("unknown param section: " + name);
    return it->second;
  }

  MatMap mat(std::size_t i) {
    const auto& s = sections_[i];
    return MatMap(flat.data() + s.offset, s.rows, s.cols);
  }
  ConstMatMap mat(std::size_t i) const {
    const auto& s = sections_[i];
    return ConstMatMap(flat.data() + s.offset, s.rows, s.cols);
  }
  VecMap vec(std::size_t i) {
    const auto& s = sections_[i];
    return VecMap(flat.data() + s.offset, s.rows * s.cols);
  }
  ConstVecMap vec(std::size_t i) const {
    const auto& s = sections_[i];
    return ConstVecMap(flat.data() + s.offset, s.rows * s.cols);
  }

  // Same views over an external gradient vector laid out like `flat`.
  MatMap mat_in(Vec& buffer, std::size_t i) const {
    const auto& s = sections_[i];
    return MatMap(buffer.data() + s.offset, s.rows, s.cols);
  }
  VecMap vec_in(Vec& buffer, std::size_t i) const {
    const auto& s = sections_[i];
    return VecMap(buffer.data() + s.offset, s.rows * s.cols);
  }

  Eigen::Index size() const { return total_; }

  Vec flat;

 private:
  std::vector<ParamSection> sections_;
  std::map<std::string, std::size_t> by_name_;
  Eigen::Index total_ = 0;
};

inline constexpr char kModelMagic[8] = {'L', 'A', 'T', 'T', 'E', 'M', 'D', 'L'};

inline void save_model(const std::string& path, const std::string& arch_tag,
                       const std::string& hyper_json, const ParamBlock& params) {
  auto out = open_out(path);
  write_bytes(out, kModelMagic, sizeof(kModelMagic));
  write_pod<std::uint32_t>(out, 1);
  write_string(out, arch_tag);
  write_string(out, hyper_json);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.section_count()));
  for (std::size_t i = 0; i < params.section_count(); ++i) {
    const auto& s = params.section(i);
    write_string(out, s.name);
    write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(s.rows));
    write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(s.cols));
  }
  write_bytes(out, params.flat.data(), static_cast<std::size_t>(params.flat.size()) * sizeof(double));
  if (!out) throw Error::internal("write failed: " + path);
}

struct LoadedModel {
  std::string arch_tag;
  std::string hyper_json;
  std::vector<ParamSection> sections;
  Vec flat;
};

inline LoadedModel load_model(const std::string& path) {
  auto in = open_in(path);
  char magic[8];
  read_bytes(in, magic, sizeof(magic), "model magic");
  if (std::memcmp(magic, kModelMagic, sizeof(magic)) != 0)
    throw Error::validation("not a model checkpoint (bad magic): " + path);
  const auto version = read_pod<std::uint32_t>(in, "model version");
  if (version != 1)
    throw Error::validation("unsupported model version " + std::to_string(version));
  LoadedModel out;
  out.arch_tag = read_string(in, "arch tag");
  out.hyper_json = read_string(in, "hyper block");
  const auto n_sections = read_pod<std::uint32_t>(in, "section count");
  Eigen::Index total = 0;
  for (std::uint32_t i = 0; i < n_sections; ++i) {
    ParamSection s;
    s.name = read_string(in, "section name");
    s.rows = static_cast<Eigen::Index>(read_pod<std::uint64_t>(in, "section rows"));
    s.cols = static_cast<Eigen::Index>(read_pod<std::uint64_t>(in, "section cols"));
    s.offset = total;
    total += s.rows * s.cols;
    out.sections.push_back(std::move(s));
  }
  out.flat.resize(total);
  read_bytes(in, out.flat.data(), static_cast<std::size_t>(total) * sizeof(double),
             "model payload");
  if (!out.flat.allFinite())
    throw Error::validation("model payload contains non-finite values: " + path);
  return out;
}

// Copies a loaded payload into a freshly declared block, validating layout.
inline void adopt_payload(ParamBlock& block, const LoadedModel& loaded) {
  if (loaded.sections.size() != block.section_count())
    throw Error::validation("model section count mismatch");
  for (std::size_t i = 0; i < block.section_count(); ++i) {
    const auto& want = block.section(i);
    const auto& got = loaded.sections[i];
    if (want.name != got.name || want.rows != got.rows || want.cols != got.cols)
      throw Error::validation("model section mismatch at '" + want.name + "'");
  }
  block.allocate();
  block.flat = loaded.flat;
}

}  // namespace latte
