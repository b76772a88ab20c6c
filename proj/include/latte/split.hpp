#pragma once

// Chronological splits. Per retained user (sessions in time order, 0-based
// positions 0..T-1):
//   test = T-1, val = T-2, bridge_train = T-3.
// Rolling predictor pairs (prefix -> target) target positions 4..T-3: the
// earliest target needs four earlier sessions, the latest target is the
// bridge session itself, and validation/test positions are never targets and
// never inside any prefix. A pair is emitted only when the prefix holds at
// least min_states constructible states (>= 1 eligible peer each) and the
// prefix ends strictly before the target's timestamp.

#include "latte/core.hpp"
#include "latte/io_util.hpp"
#include "latte/peer.hpp"
#include "latte/session.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace latte {

struct UserSplit {
  // Positions within the user's chronological session list.
  std::size_t test_pos = 0;
  std::size_t val_pos = 0;
  std::size_t bridge_pos = 0;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (prefix_end, target)
};

struct SplitParams {
  int min_sessions = 8;   // holdout trio + history floor
  int min_states = 4;     // constructible states required in a prefix
  PeerQueryParams peer;   // eligibility used for constructibility checks
};

struct SplitAssignment {
  std::map<std::string, UserSplit> users;
  std::map<std::string, std::string> excluded;  // user -> reason code
  SplitParams params;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["version"] = 1;
    j["params"] = {{"min_sessions", params.min_sessions},
                   {"min_states", params.min_states},
                   {"m", params.peer.m},
                   {"min_peer_history", params.peer.min_peer_history}};
    nlohmann::json users_j = nlohmann::json::object();
    for (const auto& [user, split] : users) {
      nlohmann::json pairs_j = nlohmann::json::array();
      for (const auto& [prefix_end, target] : split.pairs)
        pairs_j.push_back({prefix_end, target});
      users_j[user] = {{"test", split.test_pos},
                       {"val", split.val_pos},
                       {"bridge_train", split.bridge_pos},
                       {"pairs", pairs_j}};
    }
    j["users"] = std::move(users_j);
    j["excluded"] = excluded;
    return j;
  }

  static SplitAssignment from_json(const nlohmann::json& j) {
    SplitAssignment out;
    out.params.min_sessions = j.at("params").at("min_sessions").get<int>();
    out.params.min_states = j.at("params").at("min_states").get<int>();
    out.params.peer.m = j.at("params").at("m").get<int>();
    out.params.peer.min_peer_history = j.at("params").at("min_peer_history").get<int>();
    for (const auto& [user, uj] : j.at("users").items()) {
      UserSplit split;
      split.test_pos = uj.at("test").get<std::size_t>();
      split.val_pos = uj.at("val").get<std::size_t>();
      split.bridge_pos = uj.at("bridge_train").get<std::size_t>();
      for (const auto& pair : uj.at("pairs"))
        split.pairs.emplace_back(pair.at(0).get<std::size_t>(),
                                 pair.at(1).get<std::size_t>());
      out.users[user] = std::move(split);
    }
    if (j.contains("excluded"))
      for (const auto& [user, reason] : j.at("excluded").items())
        out.excluded[user] = reason.get<std::string>();
    return out;
  }

  void save(const std::string& path) const { write_file(path, to_json().dump(2) + "\n"); }

  static SplitAssignment load(const std::string& path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw Error::validation(std::string("bad split file: ") + e.what());
    }
    return from_json(j);
  }
};

// A session position is "constructible" when at least one eligible peer
// exists for it; residual degeneracy is only knowable with embeddings and is
// handled (skipped and counted) when trajectories are built.
inline bool constructible(const SessionStore& store, const PeerIndex& index,
                          const Session& s, const PeerQueryParams& peer) {
  (void)store;
  return !query_peers(index, s.item_id, s.timestamp, s.user_id, peer).empty();
}

inline SplitAssignment chronological_split(const SessionStore& store,
                                           const PeerIndex& index,
                                           const SplitParams& params = {}) {
  SplitAssignment out;
  out.params = params;
  for (const auto& user : store.users()) {
    const auto& list = store.user_sessions(user);
    const std::size_t total = list.size();
    if (total < static_cast<std::size_t>(params.min_sessions)) {
      out.excluded[user] = "too_few_sessions";
      continue;
    }
    // The holdout trio must be strictly ordered in time; lexicographic
    // tie-breaks are fine inside history but not across split boundaries.
    const Session& bridge = store.session(list[total - 3]);
    const Session& val = store.session(list[total - 2]);
    const Session& test = store.session(list[total - 1]);
    if (!(bridge.timestamp < val.timestamp && val.timestamp < test.timestamp)) {
      out.excluded[user] = "holdout_timestamp_ties";
      continue;
    }

    UserSplit split;
    split.test_pos = total - 1;
    split.val_pos = total - 2;
    split.bridge_pos = total - 3;

    // Prefix constructibility, computed once per position.
    std::vector<int> constructible_prefix(total + 1, 0);
    for (std::size_t pos = 0; pos < total; ++pos) {
      const Session& s = store.session(list[pos]);
      constructible_prefix[pos + 1] =
          constructible_prefix[pos] + (constructible(store, index, s, params.peer) ? 1 : 0);
    }

    for (std::size_t target = 4; target + 2 < total; ++target) {
      if (constructible_prefix[target] < params.min_states) continue;
      const Session& prev = store.session(list[target - 1]);
      const Session& tgt = store.session(list[target]);
      if (!(prev.timestamp < tgt.timestamp)) continue;  // tie would leak
      split.pairs.emplace_back(target - 1, target);
    }
    out.users[user] = std::move(split);
  }
  return out;
}

}  // namespace latte
