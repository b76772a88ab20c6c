#pragma once

// Retention filters applied before splitting. A user survives when
//   - they have at least min_history sessions before their last one,
//   - each of their historical items has at least min_valid_peers reviews by
//     other users strictly before the session in question, and
//   - their held-out targets (last three sessions) are at least min_chars
//     long; chars_on_history extends the length rule to every session.
// Surviving users keep all their sessions. Filtering never errors; an empty
// result is legal.

#include "latte/core.hpp"
#include "latte/peer.hpp"
#include "latte/session.hpp"

#include <string>
#include <vector>

namespace latte {

struct FilterParams {
  int min_history = 8;
  int min_valid_peers = 4;
  int min_chars = 30;
  bool chars_on_history = false;  // apply min_chars to every session, not just targets
};

struct FilterReport {
  std::size_t users_before = 0;
  std::size_t users_after = 0;
  std::size_t sessions_after = 0;
  double retention = 0.0;  // users_after / users_before
};

// UTF-8 aware length: counts codepoints, not bytes.
inline std::size_t text_length(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s)
    if ((c & 0xC0) != 0x80) ++n;
  return n;
}

inline std::pair<SessionStore, FilterReport> apply_filters(const SessionStore& store,
                                                           const PeerIndex& index,
                                                           const FilterParams& params = {}) {
  FilterReport report;
  report.users_before = store.users().size();

  std::vector<Session> kept;
  for (const auto& user : store.users()) {
    const auto& list = store.user_sessions(user);
    const std::size_t total = list.size();
    if (total < static_cast<std::size_t>(params.min_history) + 1) continue;

    bool ok = true;
    // Every historical item needs enough peer reviews before the session.
    for (std::size_t pos = 0; ok && pos + 1 < total; ++pos) {
      const Session& s = store.session(list[pos]);
      if (index.count_time_valid_peers(s.item_id, s.timestamp, user) <
          static_cast<std::size_t>(params.min_valid_peers))
        ok = false;
    }
    if (!ok) continue;

    const std::size_t first_checked =
        params.chars_on_history ? 0 : (total >= 3 ? total - 3 : 0);
    for (std::size_t pos = first_checked; ok && pos < total; ++pos) {
      if (text_length(store.session(list[pos]).text) <
          static_cast<std::size_t>(params.min_chars))
        ok = false;
    }
    if (!ok) continue;

    for (std::size_t idx : list) kept.push_back(store.session(idx));
    ++report.users_after;
  }

  report.sessions_after = kept.size();
  report.retention = report.users_before == 0
                         ? 0.0
                         : static_cast<double>(report.users_after) /
                               static_cast<double>(report.users_before);
  return {SessionStore(std::move(kept), store.meta()), report};
}

}  // namespace latte
