#pragma once

// Peer retrieval: who else reviewed this item strictly before this moment.
// The index answers time-cutoff queries by binary search; query_peers applies
// the eligibility rules (target exclusion, per-user dedupe, history floor,
// overflow selection).

#include "latte/core.hpp"
#include "latte/io_util.hpp"
#include "latte/rng.hpp"
#include "latte/session.hpp"

#include <algorithm>
#include <map>
#include <string>
#include <vector>

namespace latte {

struct PeerEntry {
  std::string user_id;
  std::size_t session_index = 0;       // into the SessionStore
  std::uint64_t embedding_index = 0;   // response embedding row
  std::int64_t timestamp = 0;
  // Filled by the anchoring stage (profile of this peer at query time);
  // empty until then.
  Vec profile;
  bool profile_is_zero = true;
};

struct PeerSet {
  std::string item_id;
  std::int64_t query_time = 0;
  std::vector<PeerEntry> peers;  // ascending (timestamp, user_id)
  // Selection metadata.
  std::size_t candidates_considered = 0;   // same-item, pre-cutoff, non-target reviews
  std::size_t excluded_by_history = 0;     // distinct users under the history floor
  bool empty() const { return peers.empty(); }
};

enum class PeerOverflow { most_recent, random_seeded };

class PeerIndex {
 public:
  PeerIndex() = default;

  explicit PeerIndex(const SessionStore& store) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      const Session& s = store.session(i);
      items_[s.item_id].push_back(Row{s.timestamp, s.user_id, i, s.embedding_index});
      user_times_[s.user_id].push_back(s.timestamp);
    }
    for (auto& [item, rows] : items_)
      std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        return std::tie(a.timestamp, a.user_id) < std::tie(b.timestamp, b.user_id);
      });
    for (auto& [user, times] : user_times_) std::sort(times.begin(), times.end());
  }

  // Same-item reviews strictly before `cutoff`, time-ascending.
  struct Row {
    std::int64_t timestamp;
    std::string user_id;
    std::size_t session_index;
    std::uint64_t embedding_index;
  };

  std::vector<Row> before(const std::string& item_id, std::int64_t cutoff) const {
    auto it = items_.find(item_id);
    if (it == items_.end()) return {};
    const auto& rows = it->second;
    auto end = std::lower_bound(rows.begin(), rows.end(), cutoff,
                                [](const Row& r, std::int64_t t) { return r.timestamp < t; });
    return std::vector<Row>(rows.begin(), end);
  }

  const std::vector<Row>& all_rows(const std::string& item_id) const {
    static const std::vector<Row> kEmpty;
    auto it = items_.find(item_id);
    return it == items_.end() ? kEmpty : it->second;
  }

  // Corpus-wide interaction count of `user` strictly before `cutoff`.
  std::size_t history_count(const std::string& user_id, std::int64_t cutoff) const {
    auto it = user_times_.find(user_id);
    if (it == user_times_.end()) return 0;
    const auto& times = it->second;
    return static_cast<std::size_t>(
        std::lower_bound(times.begin(), times.end(), cutoff) - times.begin());
  }

  // All-time interaction count (leakage probe's unmasked mode).
  std::size_t total_count(const std::string& user_id) const {
    auto it = user_times_.find(user_id);
    return it == user_times_.end() ? 0 : it->second.size();
  }

  // Reviews of `item_id` strictly before `cutoff` by users other than
  // `exclude_user`. Used by the retention filters.
  std::size_t count_time_valid_peers(const std::string& item_id, std::int64_t cutoff,
                                     const std::string& exclude_user) const {
    std::size_t n = 0;
    for (const Row& r : before(item_id, cutoff))
      if (r.user_id != exclude_user) ++n;
    return n;
  }

 private:
  std::map<std::string, std::vector<Row>> items_;
  std::map<std::string, std::vector<std::int64_t>> user_times_;
};

inline PeerIndex build_peer_index(const SessionStore& store) { return PeerIndex(store); }

struct PeerQueryParams {
  int m = 16;
  int min_peer_history = 4;
  PeerOverflow overflow = PeerOverflow::most_recent;
  std::uint64_t seed = 0;  // only used by random_seeded overflow
};

// Eligible peers for (item, query_time, target_user):
//   1. same-item reviews strictly before query_time, target user removed;
//   2. one review per peer user (their latest before the cutoff);
//   3. users with < min_peer_history interactions anywhere before the cutoff
//      are dropped (their own same-item review counts, it is earlier too);
//   4. if more than m remain, keep the m most recent (or a seeded random m).
// Result is ordered ascending by (timestamp, user_id) and is identical under
// any parallel schedule because nothing here depends on shared state.
inline PeerSet query_peers(const PeerIndex& index, const std::string& item_id,
                           std::int64_t query_time, const std::string& target_user,
                           const PeerQueryParams& params = {}) {
  PeerSet result;
  result.item_id = item_id;
  result.query_time = query_time;

  std::vector<PeerIndex::Row> candidates;
  for (const auto& row : index.before(item_id, query_time))
    if (row.user_id != target_user) candidates.push_back(row);
  result.candidates_considered = candidates.size();

  // Latest review per user: rows are time-ascending, so later entries win.
  std::map<std::string, PeerIndex::Row> latest;
  for (const auto& row : candidates) {
    auto [it, inserted] = latest.insert({row.user_id, row});
    if (!inserted) it->second = row;
  }

  std::vector<PeerIndex::Row> eligible;
  for (const auto& [user, row] : latest) {
    if (index.history_count(user, query_time) <
        static_cast<std::size_t>(params.min_peer_history)) {
      ++result.excluded_by_history;
      continue;
    }
    eligible.push_back(row);
  }

  if (eligible.size() > static_cast<std::size_t>(params.m)) {
    if (params.overflow == PeerOverflow::most_recent) {
      std::sort(eligible.begin(), eligible.end(), [](const auto& a, const auto& b) {
        return std::tie(b.timestamp, a.user_id) < std::tie(a.timestamp, b.user_id);
      });
    } else {
      // Seeded by (seed, item, query_time) so each query site is independent
      // yet reproducible.
      std::sort(eligible.begin(), eligible.end(), [](const auto& a, const auto& b) {
        return std::tie(a.timestamp, a.user_id) < std::tie(b.timestamp, b.user_id);
      });
      Rng rng(params.seed ^ fnv1a(item_id), static_cast<std::uint64_t>(query_time));
      rng.shuffle(eligible);
    }
    eligible.resize(static_cast<std::size_t>(params.m));
  }

  std::sort(eligible.begin(), eligible.end(), [](const auto& a, const auto& b) {
    return std::tie(a.timestamp, a.user_id) < std::tie(b.timestamp, b.user_id);
  });
  for (const auto& row : eligible)
    result.peers.push_back(PeerEntry{row.user_id, row.session_index,
                                     row.embedding_index, row.timestamp, Vec(), true});
  return result;
}

// Unmasked variant for the leakage probe: ignores the time cutoff entirely
// (candidates may postdate the query, history counts are all-time). Never
// used by the real pipeline.
inline PeerSet query_peers_unmasked(const PeerIndex& index, const std::string& item_id,
                                    std::int64_t query_time, const std::string& target_user,
                                    const PeerQueryParams& params = {}) {
  PeerSet result;
  result.item_id = item_id;
  result.query_time = query_time;

  std::vector<PeerIndex::Row> candidates;
  for (const auto& row : index.all_rows(item_id))
    if (row.user_id != target_user) candidates.push_back(row);
  result.candidates_considered = candidates.size();

  std::map<std::string, PeerIndex::Row> latest;
  for (const auto& row : candidates) {
    auto [it, inserted] = latest.insert({row.user_id, row});
    if (!inserted) it->second = row;
  }
  std::vector<PeerIndex::Row> eligible;
  for (const auto& [user, row] : latest) {
    if (index.total_count(user) < static_cast<std::size_t>(params.min_peer_history)) {
      ++result.excluded_by_history;
      continue;
    }
    eligible.push_back(row);
  }
  if (eligible.size() > static_cast<std::size_t>(params.m)) {
    std::sort(eligible.begin(), eligible.end(), [](const auto& a, const auto& b) {
      return std::tie(b.timestamp, a.user_id) < std::tie(a.timestamp, b.user_id);
    });
    eligible.resize(static_cast<std::size_t>(params.m));
  }
  std::sort(eligible.begin(), eligible.end(), [](const auto& a, const auto& b) {
    return std::tie(a.timestamp, a.user_id) < std::tie(b.timestamp, b.user_id);
  });
  for (const auto& row : eligible)
    result.peers.push_back(PeerEntry{row.user_id, row.session_index,
                                     row.embedding_index, row.timestamp, Vec(), true});
  return result;
}

}  // namespace latte
