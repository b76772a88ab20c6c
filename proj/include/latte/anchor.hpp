#pragma once

// Peer-anchored relative preference states.
//
// For a session at time t with response embedding r and peers v = 1..k
// (response embeddings q_v, weights w on the simplex):
//
//   profile(u, t)  = normalize( sum of u's earlier response embeddings ), zero if none
//   weights        = softmax( gamma * <profile(u,t), profile(v,t)> ), uniform fallback
//   raw residual   = sum_v w_v * (r - q_v)
//   state          = raw residual / ||raw residual||      (skipped when degenerate)
//
// The residual is accumulated term-wise as w_v * (r - q_v) rather than as
// r - sum_v w_v q_v: any offset shared by r and every q_v cancels inside each
// difference, so shared-component cancellation is exact in floating point
// whenever the shifted inputs themselves are representable.

#include "latte/audit.hpp"
#include "latte/core.hpp"
#include "latte/embedding.hpp"
#include "latte/peer.hpp"
#include "latte/session.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace latte {

struct ProfileSummary {
  Vec vector;
  bool is_zero = true;
};

struct RelativeState {
  Vec vector;                    // unit norm
  double residual_norm = 0.0;    // > 0, pre-normalization magnitude
  int peer_count = 0;            // 0 only for states loaded from a cache file
  double weight_entropy = 0.0;
  std::size_t session_pos = 0;   // position in the user's chronological list
  std::int64_t timestamp = 0;
};

struct Trajectory {
  std::string user_id;
  std::vector<RelativeState> states;  // chronological

  std::size_t size() const { return states.size(); }
  bool empty() const { return states.empty(); }
};

// Normalized sum of the user's response embeddings strictly before
// cutoff_time. Zero (is_zero) when there is no earlier history or the sum is
// degenerate (norm < 1e-9, e.g. embeddings cancelling out).
inline ProfileSummary profile_summary(const std::string& user_id,
                                      std::int64_t cutoff_time,
                                      const SessionStore& store,
                                      const EmbeddingStore& embeddings,
                                      AccessAudit* audit = nullptr) {
  ProfileSummary out;
  if (!store.has_user(user_id)) {
    out.vector = Vec::Zero(embeddings.dim());
    return out;
  }
  Vec sum = Vec::Zero(embeddings.dim());
  bool any = false;
  for (std::size_t idx : store.user_sessions(user_id)) {
    const Session& s = store.session(idx);
    if (s.timestamp >= cutoff_time) break;  // list is time-ascending
    sum += embeddings.row(s.embedding_index, audit);
    any = true;
  }
  if (!any) {
    out.vector = std::move(sum);
    return out;
  }
  const double norm = sum.norm();
  if (norm < 1e-9) {
    out.vector = Vec::Zero(embeddings.dim());
    return out;
  }
  out.vector = sum / norm;
  out.is_zero = false;
  return out;
}

// Softmax over gamma-scaled profile similarities. Uniform when the target
// profile is zero or every peer profile is zero (cold-start fallback).
inline Vec peer_weights(const ProfileSummary& target,
                        const std::vector<ProfileSummary>& peers,
                        double gamma = 10.0) {
  const auto k = static_cast<Eigen::Index>(peers.size());
  if (k == 0) throw Error::validation("peer_weights requires at least one peer");

  bool all_zero = true;
  for (const auto& p : peers)
    if (!p.is_zero) all_zero = false;
  if (target.is_zero || all_zero)
    return Vec::Constant(k, 1.0 / static_cast<double>(k));

  Vec scores(k);
  for (Eigen::Index i = 0; i < k; ++i)
    scores[i] = peers[static_cast<std::size_t>(i)].is_zero
                    ? 0.0
                    : gamma * target.vector.dot(peers[static_cast<std::size_t>(i)].vector);
  const double max_score = scores.maxCoeff();
  Vec w = (scores.array() - max_score).exp();
  return w / w.sum();
}

inline Vec peer_baseline(const Vec& weights, const std::vector<Vec>& peer_embeddings) {
  if (static_cast<std::size_t>(weights.size()) != peer_embeddings.size())
    throw Error::validation("peer_baseline: weights and embeddings differ in length");
  if (peer_embeddings.empty())
    throw Error::validation("peer_baseline requires at least one peer");
  Vec out = Vec::Zero(peer_embeddings.front().size());
  for (Eigen::Index i = 0; i < weights.size(); ++i)
    out += weights[i] * peer_embeddings[static_cast<std::size_t>(i)];
  return out;
}

// Raw anchored residual, accumulated term-wise (see header comment).
inline Vec anchored_residual(const Vec& response, const std::vector<Vec>& peer_embeddings,
                             const Vec& weights) {
  if (static_cast<std::size_t>(weights.size()) != peer_embeddings.size())
    throw Error::validation("anchored_residual: weights and embeddings differ in length");
  Vec out = Vec::Zero(response.size());
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    const Vec& q = peer_embeddings[static_cast<std::size_t>(i)];
    if (q.size() != response.size())
      throw Error::validation("anchored_residual: dimension mismatch");
    out += weights[i] * (response - q);
  }
  return out;
}

inline double weight_entropy(const Vec& weights) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < weights.size(); ++i)
    if (weights[i] > 0.0) h -= weights[i] * std::log(weights[i]);
  return h;
}

// Normalizes a residual into a state; nullopt marks a degenerate session
// (residual norm <= eps) that must be skipped, not stored.
inline std::optional<RelativeState> relative_state(const Vec& response, const Vec& baseline,
                                                   double eps = 1e-8) {
  if (response.size() != baseline.size())
    throw Error::validation("relative_state: dimension mismatch");
  Vec residual = response - baseline;
  const double norm = residual.norm();
  if (norm <= eps) return std::nullopt;
  RelativeState state;
  state.vector = residual / norm;
  state.residual_norm = norm;
  return state;
}

struct TrajectoryParams {
  PeerQueryParams peer;
  double gamma = 10.0;
  double eps = 1e-8;
};

struct TrajectoryBuildStats {
  std::size_t sessions_seen = 0;
  std::size_t skipped_no_peers = 0;
  std::size_t skipped_degenerate = 0;
};

enum class StateSkip { none, no_peers, degenerate };

// One session's anchored state: peer query, profiles, softmax weights,
// term-wise residual, normalization. The store and index passed here define
// the peer universe — callers enforcing holdout masking pass a store with
// held-out sessions removed. session_pos is left at its default; callers that
// track positions fill it in.
inline std::pair<std::optional<RelativeState>, StateSkip> relative_state_for_session(
    const std::string& user_id, const std::string& item_id, std::int64_t timestamp,
    std::uint64_t embedding_index, const SessionStore& store, const PeerIndex& index,
    const EmbeddingStore& embeddings, const TrajectoryParams& params = {},
    AccessAudit* audit = nullptr) {
  PeerSet peers = query_peers(index, item_id, timestamp, user_id, params.peer);
  if (peers.empty()) return {std::nullopt, StateSkip::no_peers};

  const ProfileSummary target_profile =
      profile_summary(user_id, timestamp, store, embeddings, audit);
  std::vector<ProfileSummary> peer_profiles;
  std::vector<Vec> peer_embs;
  peer_profiles.reserve(peers.peers.size());
  peer_embs.reserve(peers.peers.size());
  for (const PeerEntry& p : peers.peers) {
    peer_profiles.push_back(profile_summary(p.user_id, timestamp, store, embeddings, audit));
    peer_embs.push_back(embeddings.row(p.embedding_index, audit));
  }

  const Vec weights = peer_weights(target_profile, peer_profiles, params.gamma);
  const Vec response = embeddings.row(embedding_index, audit);
  const Vec residual = anchored_residual(response, peer_embs, weights);

  const double norm = residual.norm();
  if (norm <= params.eps) return {std::nullopt, StateSkip::degenerate};
  RelativeState state;
  state.vector = residual / norm;
  state.residual_norm = norm;
  state.peer_count = static_cast<int>(peers.peers.size());
  state.weight_entropy = weight_entropy(weights);
  state.timestamp = timestamp;
  return {std::move(state), StateSkip::none};
}

// Builds the state sequence for one user over their sessions at positions
// [0, until_pos). Pass the user's total session count (or leave the default)
// to cover everything; the pipeline caps the training-era build at the bridge
// session so later rows are never touched while models are being fit.
inline std::pair<Trajectory, TrajectoryBuildStats> build_trajectory(
    const std::string& user_id, const SessionStore& store, const PeerIndex& index,
    const EmbeddingStore& embeddings, const TrajectoryParams& params = {},
    std::size_t until_pos = static_cast<std::size_t>(-1), AccessAudit* audit = nullptr) {
  Trajectory traj;
  traj.user_id = user_id;
  TrajectoryBuildStats stats;

  const auto& list = store.user_sessions(user_id);
  const std::size_t limit = std::min(until_pos, list.size());
  for (std::size_t pos = 0; pos < limit; ++pos) {
    const Session& s = store.session(list[pos]);
    ++stats.sessions_seen;
    auto [state, skip] = relative_state_for_session(
        user_id, s.item_id, s.timestamp, s.embedding_index, store, index, embeddings,
        params, audit);
    if (skip == StateSkip::no_peers) {
      ++stats.skipped_no_peers;
      continue;
    }
    if (skip == StateSkip::degenerate) {
      ++stats.skipped_degenerate;
      continue;
    }
    state->session_pos = pos;
    traj.states.push_back(std::move(*state));
  }
  return {std::move(traj), stats};
}

// p_t - p_{t-1} with 1-based t in [2, |states|].
inline Vec adjacent_delta(const Trajectory& traj, std::size_t t) {
  if (t < 2 || t > traj.states.size())
    throw Error::validation("adjacent_delta: index " + std::to_string(t) +
                            " out of range [2, " + std::to_string(traj.states.size()) + "]");
  return traj.states[t - 1].vector - traj.states[t - 2].vector;
}

}  // namespace latte
