#pragma once

// Synthetic corpus generator for pipeline fixtures.
//
// Sessions follow the additive response model (embedding = item component +
// user state + noise) with known ground truth per session. The schedule has
// three phases on a collision-free timestamp grid:
//   1. warmup   — peer users review private warmup items, accruing the
//                 corpus-wide history the peer query's floor demands;
//   2. coverage — each catalog item collects reviews from several distinct
//                 peer users, so every later target session has enough
//                 time-valid peers to survive retention filters;
//   3. targets  — target users review random catalog items; their states
//                 either follow a random walk (drifting preferences) or stay
//                 i.i.d. around a fixed base (static preferences).
// Peer and warmup users deliberately fail the retention filters (their early
// items have no other reviewers), so downstream stages model target users
// only while still drawing peers from the full corpus.
//
// The planted-overlap variant adds copycat users whose extra session copies a
// target's item, a 9-token run of its text, and (approximately) its
// embedding, timestamped just after the target. Time masking excludes these
// sessions from peer queries; unmasked retrieval picks them up, which is what
// the leakage diagnostics measure.
//
// Every random draw comes from a per-entity stream keyed by the entity's id,
// so output is independent of generation order and stable across reruns.

#include "latte/core.hpp"
#include "latte/embedding.hpp"
#include "latte/rng.hpp"
#include "latte/session.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

namespace latte {

struct SyntheticCorpusSpec {
  int d = 32;
  int target_users = 48;
  int peer_users = 24;
  int items = 24;
  int sessions_per_user = 12;     // per target user
  int peer_reviews_per_item = 6;  // distinct peer users per item per round
  int peer_rounds = 2;
  int warmup_sessions = 4;        // per peer user; satisfies the history floor
  double item_scale = 0.18;       // per-coordinate sd of item components
  double user_scale = 1.0;        // norm of the base user state
  double walk_step = 0.22;        // per-session state movement
  double noise_sd = 0.05;         // per-coordinate sd of session noise
  bool random_walk = true;        // false: states i.i.d. around the base
  bool normalize = true;          // unit-normalize stored embeddings
  int copycats = 0;               // planted-overlap users (leakage fixture)
  std::uint64_t seed = 1;
};

struct TruthRecord {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
  Vec s;    // user state
  Vec c;    // item component
  Vec eps;  // session noise
};

struct SyntheticCorpus {
  SessionStore store;
  EmbeddingStore embeddings;
  std::vector<TruthRecord> truth;           // aligned with embedding rows
  std::vector<std::size_t> planted;         // session indices of copycat sessions
  std::vector<std::size_t> planted_targets; // session indices of the copied targets
};

namespace detail {

inline std::string synth_id(const char* prefix, int n) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%03d", prefix, n);
  return buf;
}

inline std::string synth_word(const char* prefix, std::uint64_t n) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%s%03d", prefix, static_cast<int>(n));
  return buf;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace detail

inline SyntheticCorpus gen_additive(const SyntheticCorpusSpec& spec) {
  if (spec.d < 2) throw Error::validation("corpus spec: d must be at least 2");
  if (spec.peer_reviews_per_item > spec.peer_users)
    throw Error::validation("corpus spec: peer_reviews_per_item exceeds peer_users");
  if (spec.sessions_per_user < 4)
    throw Error::validation("corpus spec: sessions_per_user must be at least 4");

  const Eigen::Index d = spec.d;

  // Item components and item vocabulary, one stream per item.
  std::vector<Vec> item_vecs;
  std::vector<std::vector<std::string>> item_words;
  std::vector<std::string> item_ids;
  for (int j = 0; j < spec.items; ++j) {
    item_ids.push_back(detail::synth_id("item", j));
    Rng rng(spec.seed, stream_of("item-" + item_ids.back()));
    item_vecs.push_back(rng.normal_vec(d, spec.item_scale));
    std::vector<std::string> words;
    for (int w = 0; w < 3; ++w) words.push_back(detail::synth_word("t", rng.below(200)));
    item_words.push_back(std::move(words));
  }
  std::vector<Vec> warm_vecs;
  std::vector<std::string> warm_ids;
  const int warm_items = std::max(4, spec.peer_users / 3);
  for (int j = 0; j < warm_items; ++j) {
    warm_ids.push_back(detail::synth_id("warm", j));
    Rng rng(spec.seed, stream_of("item-" + warm_ids.back()));
    warm_vecs.push_back(rng.normal_vec(d, spec.item_scale));
  }

  // Per-user generation: assemble the user's (timestamp, item) schedule,
  // then walk their stream once in chronological order.
  struct Draft {
    Session session;
    Vec embedding_raw;
    TruthRecord truth;
  };
  std::vector<Draft> drafts;

  auto emit_user = [&](const std::string& user_id,
                       const std::vector<std::pair<std::int64_t, int>>& schedule,
                       const std::vector<Vec>& catalog,
                       const std::vector<std::string>& ids, bool pick_items) {
    Rng rng(spec.seed, stream_of("user-" + user_id));
    std::vector<std::string> style;
    for (int w = 0; w < 5; ++w) style.push_back(detail::synth_word("w", rng.below(400)));
    Vec base = spec.user_scale * rng.unit_vec(d);
    Vec state = base;
    for (const auto& [ts, fixed_item] : schedule) {
      const int item = pick_items
                           ? static_cast<int>(rng.below(static_cast<std::uint64_t>(
                                 catalog.size())))
                           : fixed_item;
      const Vec step = spec.walk_step * rng.unit_vec(d);
      state = spec.random_walk ? Vec(state + step) : Vec(base + step);
      const Vec eps = rng.normal_vec(d, spec.noise_sd);

      std::vector<std::string> tokens = style;
      const auto& iw = item_words[static_cast<std::size_t>(item) % item_words.size()];
      tokens.insert(tokens.end(), iw.begin(), iw.end());
      for (int w = 0; w < 4; ++w) tokens.push_back(detail::synth_word("w", rng.below(400)));
      rng.shuffle(tokens);

      Draft draft;
      draft.session.user_id = user_id;
      draft.session.item_id = ids[static_cast<std::size_t>(item)];
      draft.session.timestamp = ts;
      draft.session.text = detail::join_tokens(tokens);
      draft.embedding_raw = catalog[static_cast<std::size_t>(item)] + state + eps;
      draft.truth = {user_id, draft.session.item_id, ts, state,
                     catalog[static_cast<std::size_t>(item)], eps};
      drafts.push_back(std::move(draft));
    }
  };

  // Phase 1 + 2: peer users. Warmup on private items, then assigned reviews.
  std::vector<std::vector<std::pair<std::int64_t, int>>> peer_schedules(
      static_cast<std::size_t>(spec.peer_users));
  for (int p = 0; p < spec.peer_users; ++p)
    for (int k = 0; k < spec.warmup_sessions; ++k)
      peer_schedules[static_cast<std::size_t>(p)].push_back(
          {500 + (static_cast<std::int64_t>(p) * spec.warmup_sessions + k) * 7,
           -(p % warm_items) - 1});  // negative marks a warmup item
  for (int r = 0; r < spec.peer_rounds; ++r)
    for (int j = 0; j < spec.items; ++j)
      for (int s = 0; s < spec.peer_reviews_per_item; ++s) {
        const int p = (j * 7 + r * 9 + s) % spec.peer_users;
        const std::int64_t ts =
            20000 + (static_cast<std::int64_t>(r) * spec.items * spec.peer_reviews_per_item +
                     static_cast<std::int64_t>(j) * spec.peer_reviews_per_item + s) *
                        11;
        peer_schedules[static_cast<std::size_t>(p)].push_back({ts, j});
      }
  // Merged catalog: warmup items occupy indices [items, items + warm_items).
  std::vector<Vec> merged_vecs = item_vecs;
  merged_vecs.insert(merged_vecs.end(), warm_vecs.begin(), warm_vecs.end());
  std::vector<std::string> merged_ids = item_ids;
  merged_ids.insert(merged_ids.end(), warm_ids.begin(), warm_ids.end());
  for (int p = 0; p < spec.peer_users; ++p) {
    auto& sched = peer_schedules[static_cast<std::size_t>(p)];
    std::sort(sched.begin(), sched.end());
    for (auto& [ts, item] : sched)
      if (item < 0) item = spec.items + (-item - 1);
    emit_user(detail::synth_id("peer", p), sched, merged_vecs, merged_ids, false);
  }

  // Phase 3: target users.
  const std::int64_t target_base = 50000;
  for (int u = 0; u < spec.target_users; ++u) {
    std::vector<std::pair<std::int64_t, int>> sched;
    for (int k = 0; k < spec.sessions_per_user; ++k)
      sched.push_back({target_base +
                           (static_cast<std::int64_t>(k) * spec.target_users + u) * 13,
                       0});
    emit_user(detail::synth_id("user", u), sched, item_vecs, item_ids, true);
  }

  // Copycats: 4 warmup sessions plus one near-duplicate of a target's last
  // session, timestamped 7 ticks after it.
  std::vector<std::size_t> planted, planted_targets;
  for (int cpy = 0; cpy < spec.copycats; ++cpy) {
    const std::string user_id = detail::synth_id("leak", cpy);
    const std::string target_user = detail::synth_id("user", cpy % spec.target_users);
    // Locate the target's last session among drafts.
    std::size_t target_idx = drafts.size();
    for (std::size_t i = 0; i < drafts.size(); ++i)
      if (drafts[i].session.user_id == target_user &&
          (target_idx == drafts.size() ||
           drafts[i].session.timestamp > drafts[target_idx].session.timestamp))
        target_idx = i;
    if (target_idx == drafts.size())
      throw Error::internal("copycat target not found: " + target_user);
    const Draft& target = drafts[target_idx];

    Rng rng(spec.seed, stream_of("user-" + user_id));
    for (int k = 0; k < spec.warmup_sessions; ++k) {
      const int item = cpy % warm_items;
      Draft draft;
      draft.session.user_id = user_id;
      draft.session.item_id = warm_ids[static_cast<std::size_t>(item)];
      draft.session.timestamp =
          15000 + (static_cast<std::int64_t>(cpy) * spec.warmup_sessions + k) * 7;
      std::vector<std::string> tokens;
      for (int w = 0; w < 8; ++w)
        tokens.push_back(detail::synth_word("w", rng.below(400)));
      draft.session.text = detail::join_tokens(tokens);
      draft.embedding_raw =
          warm_vecs[static_cast<std::size_t>(item)] + rng.normal_vec(d, 0.3);
      draft.truth = {user_id, draft.session.item_id, draft.session.timestamp,
                     Vec::Zero(d), warm_vecs[static_cast<std::size_t>(item)],
                     Vec::Zero(d)};
      drafts.push_back(std::move(draft));
    }

    // The leak itself: copy a 9-token run (two 8-grams) and the embedding.
    std::vector<std::string> target_tokens;
    {
      std::string tok;
      for (char ch : target.session.text) {
        if (ch == ' ') {
          if (!tok.empty()) target_tokens.push_back(tok);
          tok.clear();
        } else {
          tok += ch;
        }
      }
      if (!tok.empty()) target_tokens.push_back(tok);
    }
    std::vector<std::string> tokens(target_tokens.begin(),
                                    target_tokens.begin() +
                                        std::min<std::size_t>(9, target_tokens.size()));
    for (int w = 0; w < 3; ++w) tokens.push_back(detail::synth_word("w", rng.below(400)));

    Draft leak;
    leak.session.user_id = user_id;
    leak.session.item_id = target.session.item_id;
    leak.session.timestamp = target.session.timestamp + 7;
    leak.session.text = detail::join_tokens(tokens);
    leak.embedding_raw = target.embedding_raw + rng.normal_vec(d, 0.05);
    leak.truth = {user_id, leak.session.item_id, leak.session.timestamp,
                  target.truth.s, target.truth.c, target.truth.eps};
    planted.push_back(drafts.size());
    planted_targets.push_back(target_idx);
    drafts.push_back(std::move(leak));
  }

  // Assemble. Embedding row i belongs to session i in draft order.
  std::vector<Session> sessions;
  std::vector<TruthRecord> truth;
  std::vector<float> data;
  data.reserve(drafts.size() * static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < drafts.size(); ++i) {
    Draft& draft = drafts[i];
    draft.session.embedding_index = i;
    Vec e = draft.embedding_raw;
    if (spec.normalize) {
      const double n = e.norm();
      if (n < 1e-9)
        throw Error::internal("degenerate synthetic embedding for " +
                              draft.session.user_id);
      e /= n;
    }
    for (Eigen::Index k = 0; k < d; ++k) data.push_back(static_cast<float>(e[k]));
    sessions.push_back(std::move(draft.session));
    truth.push_back(std::move(draft.truth));
  }

  SyntheticCorpus corpus;
  corpus.store = SessionStore(std::move(sessions));
  corpus.embeddings = EmbeddingStore(static_cast<std::uint32_t>(d), std::move(data));
  corpus.truth = std::move(truth);
  corpus.planted = std::move(planted);
  corpus.planted_targets = std::move(planted_targets);
  return corpus;
}

inline void write_corpus(const SyntheticCorpus& corpus, const std::string& dir) {
  std::filesystem::create_directories(dir);
  save_sessions(corpus.store, dir + "/sessions.jsonl");
  corpus.embeddings.save(dir + "/embeddings.bin");
  std::ofstream out = open_out(dir + "/truth.jsonl");
  for (const auto& t : corpus.truth) {
    nlohmann::json row = {{"user", t.user_id},
                          {"item", t.item_id},
                          {"ts", t.timestamp},
                          {"s", std::vector<double>(t.s.data(), t.s.data() + t.s.size())},
                          {"c", std::vector<double>(t.c.data(), t.c.data() + t.c.size())},
                          {"eps", std::vector<double>(t.eps.data(),
                                                      t.eps.data() + t.eps.size())}};
    out << row.dump() << "\n";
  }
  if (!out) throw Error::internal("failed writing " + dir + "/truth.jsonl");
}

}  // namespace latte
