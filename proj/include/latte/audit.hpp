#pragma once

// Access audit: records every embedding row touched, tagged with the pipeline
// stage that touched it. Used to prove that state construction and predictor
// training never read held-out (validation/test) rows.

#include "latte/core.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <vector>

namespace latte {

class AccessAudit {
 public:
  void set_stage(const std::string& stage) {
    std::lock_guard<std::mutex> lock(mu_);
    stage_ = stage;
  }

  void record(std::uint64_t embedding_index) {
    std::lock_guard<std::mutex> lock(mu_);
    touched_[stage_].insert(embedding_index);
  }

  std::string stage() const {
    std::lock_guard<std::mutex> lock(mu_);
    return stage_;
  }

  std::set<std::uint64_t> touched(const std::string& stage) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = touched_.find(stage);
    return it == touched_.end() ? std::set<std::uint64_t>{} : it->second;
  }

  // Indices in `forbidden` that stage(s) matching `stage_prefix` touched.
  std::vector<std::uint64_t> violations(const std::string& stage_prefix,
                                        const std::set<std::uint64_t>& forbidden) const {
    std::lock_guard<std::mutex> lock(mu_);
    std::vector<std::uint64_t> out;
    for (const auto& [stage, indices] : touched_) {
      if (stage.rfind(stage_prefix, 0) != 0) continue;
      for (std::uint64_t idx : indices)
        if (forbidden.count(idx)) out.push_back(idx);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  nlohmann::json to_json() const {
    std::lock_guard<std::mutex> lock(mu_);
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [stage, indices] : touched_) {
      nlohmann::json arr = nlohmann::json::array();
      for (std::uint64_t idx : indices) arr.push_back(idx);
      j[stage] = std::move(arr);
    }
    return j;
  }

 private:
  mutable std::mutex mu_;
  std::string stage_ = "unstaged";
  std::map<std::string, std::set<std::uint64_t>> touched_;
};

}  // namespace latte
