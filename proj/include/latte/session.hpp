#pragma once

// Session records and the immutable SessionStore with per-user / per-item
// time-ordered indices.

#include "latte/core.hpp"
#include "latte/io_util.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

namespace latte {

struct Session {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;  // seconds since epoch, > 0
  std::string text;
  std::uint64_t embedding_index = 0;
};

struct StoreMeta {
  std::size_t lines_parsed = 0;
  std::size_t timestamp_ties = 0;  // pairs ordered by the lexicographic tie rule
  std::string tie_rule = "(user_id, item_id) lexicographic";
};

// Immutable after construction; concurrent reads are safe.
class SessionStore {
 public:
  SessionStore() = default;

  explicit SessionStore(std::vector<Session> sessions, StoreMeta meta = {})
      : sessions_(std::move(sessions)), meta_(meta) {
    build_indices();
  }

  std::size_t size() const { return sessions_.size(); }
  const Session& session(std::size_t i) const { return sessions_.at(i); }
  const std::vector<Session>& sessions() const { return sessions_; }
  const StoreMeta& meta() const { return meta_; }

  const std::vector<std::string>& users() const { return users_; }

  bool has_user(const std::string& user_id) const {
    return by_user_.find(user_id) != by_user_.end();
  }

  // Indices into sessions(), ascending by (timestamp, item_id).
  const std::vector<std::size_t>& user_sessions(const std::string& user_id) const {
    auto it = by_user_.find(user_id);
    if (it == by_user_.end()) throw Error::validation("unknown user: " + user_id);
    return it->second;
  }

  // Indices into sessions(), ascending by (timestamp, user_id, item_id).
  const std::vector<std::size_t>& item_sessions(const std::string& item_id) const {
    static const std::vector<std::size_t> kEmpty;
    auto it = by_item_.find(item_id);
    return it == by_item_.end() ? kEmpty : it->second;
  }

  std::size_t item_count() const { return by_item_.size(); }

 private:
  void build_indices() {
    for (std::size_t i = 0; i < sessions_.size(); ++i) {
      by_user_[sessions_[i].user_id].push_back(i);
      by_item_[sessions_[i].item_id].push_back(i);
    }
    auto order = [this](std::size_t a, std::size_t b) {
      const Session& sa = sessions_[a];
      const Session& sb = sessions_[b];
      return std::tie(sa.timestamp, sa.user_id, sa.item_id) <
             std::tie(sb.timestamp, sb.user_id, sb.item_id);
    };
    for (auto& [user, list] : by_user_) std::sort(list.begin(), list.end(), order);
    for (auto& [item, list] : by_item_) std::sort(list.begin(), list.end(), order);
    users_.reserve(by_user_.size());
    for (const auto& [user, list] : by_user_) users_.push_back(user);
  }

  std::vector<Session> sessions_;
  StoreMeta meta_;
  std::map<std::string, std::vector<std::size_t>> by_user_;
  std::map<std::string, std::vector<std::size_t>> by_item_;
  std::vector<std::string> users_;  // sorted (std::map order)
};

// Parses a JSON-lines sessions file. Required per line:
//   user (string), item (string), ts (integer > 0), text (non-empty), emb (row index).
// Duplicate (user, item, ts) triples are rejected; timestamp ties across
// different records are legal and ordered lexicographically.
inline SessionStore load_sessions(const std::string& path) {
  auto in = open_in(path);
  std::vector<Session> sessions;
  StoreMeta meta;
  std::set<std::tuple<std::string, std::string, std::int64_t>> seen;
  std::vector<std::string> duplicates;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error::validation("sessions line " + std::to_string(line_no) +
                              ": malformed JSON (" + e.what() + ")");
    }
    auto need = [&](const char* field) -> const nlohmann::json& {
      if (!rec.contains(field))
        throw Error::validation("sessions line " + std::to_string(line_no) +
                                ": missing field '" + field + "'");
      return rec.at(field);
    };
    Session s;
    try {
      s.user_id = need("user").get<std::string>();
      s.item_id = need("item").get<std::string>();
      s.timestamp = need("ts").get<std::int64_t>();
      s.text = need("text").get<std::string>();
      s.embedding_index = need("emb").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw Error::validation("sessions line " + std::to_string(line_no) +
                              ": bad field type (" + e.what() + ")");
    }
    if (s.timestamp <= 0)
      throw Error::validation("sessions line " + std::to_string(line_no) +
                              ": timestamp must be > 0");
    if (s.text.empty())
      throw Error::validation("sessions line " + std::to_string(line_no) +
                              ": empty text");
    if (!seen.insert({s.user_id, s.item_id, s.timestamp}).second)
      duplicates.push_back("(" + s.user_id + ", " + s.item_id + ", " +
                           std::to_string(s.timestamp) + ") at line " +
                           std::to_string(line_no));
    sessions.push_back(std::move(s));
  }
  if (!duplicates.empty()) {
    std::string msg = "duplicate (user, item, timestamp) records:";
    for (const auto& d : duplicates) msg += "\n  " + d;
    throw Error::validation(msg);
  }
  meta.lines_parsed = line_no;

  // Count tie pairs before handing off (informational, keeps splits auditable).
  std::map<std::pair<std::string, std::int64_t>, int> per_user_ts;
  for (const auto& s : sessions) ++per_user_ts[{s.user_id, s.timestamp}];
  for (const auto& [key, n] : per_user_ts)
    if (n > 1) meta.timestamp_ties += static_cast<std::size_t>(n - 1);

  return SessionStore(std::move(sessions), meta);
}

inline void save_sessions(const SessionStore& store, const std::string& path) {
  auto out = open_out(path);
  for (const auto& s : store.sessions()) {
    nlohmann::json rec{{"user", s.user_id},
                       {"item", s.item_id},
                       {"ts", s.timestamp},
                       {"text", s.text},
                       {"emb", s.embedding_index}};
    out << rec.dump() << "\n";
  }
  if (!out) throw Error::internal("write failed: " + path);
}

}  // namespace latte
