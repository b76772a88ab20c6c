#pragma once

// Representation and leakage diagnostics: effective rank of a vector set,
// cosine statistics (same-item peers, adjacent states, all-pairs collapse
// check), 8-gram copy rate, ROUGE-1/ROUGE-L, and the masked-vs-unmasked
// leakage probe.
//
// Text metrics tokenize by lowercasing, splitting on whitespace, and
// stripping non-alphanumeric characters from token edges. Copy rate is
// reported corpus-pooled (total matched n-grams over total n-grams); the
// per-candidate value is available from ngram_copy_rate directly.

#include "latte/anchor.hpp"
#include "latte/core.hpp"
#include "latte/embedding.hpp"
#include "latte/peer.hpp"
#include "latte/rng.hpp"
#include "latte/session.hpp"

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace latte {

// (sum sigma)^2 / sum sigma^2 over the eigenvalues of the mean-centered
// sample covariance (divisor n-1). Columns of `vectors` are observations.
// Zero covariance (all vectors identical) is defined as rank 1.
inline double effective_rank(const Mat& vectors) {
  const Eigen::Index n = vectors.cols();
  if (n < 2) throw Error::validation("effective_rank needs at least 2 vectors");
  Mat centered = vectors.colwise() - Vec(vectors.rowwise().mean());
  Mat cov = centered * centered.transpose() / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Mat> solver(cov, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success)
    throw Error::internal("effective_rank: eigensolver failed");
  double sum = 0.0, sum_sq = 0.0;
  for (Eigen::Index i = 0; i < solver.eigenvalues().size(); ++i) {
    const double sigma = std::max(solver.eigenvalues()[i], 0.0);
    sum += sigma;
    sum_sq += sigma * sigma;
  }
  if (sum_sq <= 0.0) return 1.0;
  return sum * sum / sum_sq;
}

// All-pairs cosine mean/std over the columns of `vectors`.
inline std::pair<double, double> pairwise_cosine_stats(const Mat& vectors) {
  const Eigen::Index n = vectors.cols();
  if (n < 2) throw Error::validation("pairwise_cosine_stats needs at least 2 vectors");
  double sum = 0.0, sum_sq = 0.0;
  std::size_t pairs = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double c = cosine(vectors.col(i), vectors.col(j));
      sum += c;
      sum_sq += c * c;
      ++pairs;
    }
  const double mean = sum / static_cast<double>(pairs);
  const double var = std::max(sum_sq / static_cast<double>(pairs) - mean * mean, 0.0);
  return {mean, std::sqrt(var)};
}

// Mean cos(p_t, p_{t+1}) over sampled adjacent state pairs across
// trajectories; all pairs when fewer than sample_size exist.
inline double adjacent_user_cosine(const std::vector<Trajectory>& trajectories,
                                   std::size_t sample_size, std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (trajectory, t)
  for (std::size_t ti = 0; ti < trajectories.size(); ++ti)
    for (std::size_t t = 0; t + 1 < trajectories[ti].states.size(); ++t)
      pairs.push_back({ti, t});
  if (pairs.empty()) throw Error::validation("adjacent_user_cosine: no adjacent pairs");
  Rng rng(seed, stream_of("adjacent-pairs"));
  if (pairs.size() > sample_size) {
    rng.shuffle(pairs);
    pairs.resize(sample_size);
  }
  double sum = 0.0;
  for (const auto& [ti, t] : pairs)
    sum += cosine(trajectories[ti].states[t].vector, trajectories[ti].states[t + 1].vector);
  return sum / static_cast<double>(pairs.size());
}

// Mean cosine over sampled (target session, time-valid peer session) pairs
// sharing an item. `vector_of` maps a session index to the vector under
// comparison (raw embedding or anchored state) or nullopt when unavailable;
// pairs with a missing side are skipped.
inline std::pair<double, std::size_t> same_item_peer_cosine(
    const SessionStore& store, const PeerIndex& index,
    const std::function<std::optional<Vec>(std::size_t)>& vector_of,
    std::size_t sample_size, std::uint64_t seed, const PeerQueryParams& params = {}) {
  // Session index lookup by (user, timestamp, item): PeerEntry carries the
  // embedding index, which equals the session's embedding row, but we need
  // the session index for vector_of. Build a map once.
  std::map<std::tuple<std::string, std::int64_t, std::string>, std::size_t> by_key;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Session& s = store.session(i);
    by_key[{s.user_id, s.timestamp, s.item_id}] = i;
  }

  Rng rng(seed, stream_of("same-item-pairs"));
  double sum = 0.0;
  std::size_t used = 0;
  const std::size_t budget = sample_size * 8;  // draws before giving up
  for (std::size_t draw = 0; draw < budget && used < sample_size; ++draw) {
    const std::size_t si = static_cast<std::size_t>(rng.below(store.size()));
    const Session& s = store.session(si);
    const auto target_vec = vector_of(si);
    if (!target_vec) continue;
    PeerSet peers = query_peers(index, s.item_id, s.timestamp, s.user_id, params);
    if (peers.empty()) continue;
    // Random peer; skip if its vector is unavailable.
    const PeerEntry& peer =
        peers.peers[static_cast<std::size_t>(rng.below(peers.peers.size()))];
    auto it = by_key.find({peer.user_id, peer.timestamp, s.item_id});
    if (it == by_key.end()) continue;
    const auto peer_vec = vector_of(it->second);
    if (!peer_vec) continue;
    sum += cosine(*target_vec, *peer_vec);
    ++used;
  }
  if (used == 0) throw Error::validation("same_item_peer_cosine: no valid pairs sampled");
  return {sum / static_cast<double>(used), used};
}

// ---------------------------------------------------------------------------
// Text metrics.

inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    // Strip non-alphanumeric edges, lowercase.
    std::size_t b = 0, e = current.size();
    auto alnum = [](unsigned char c) { return std::isalnum(c) || c >= 0x80; };
    while (b < e && !alnum(static_cast<unsigned char>(current[b]))) ++b;
    while (e > b && !alnum(static_cast<unsigned char>(current[e - 1]))) --e;
    if (e > b) {
      std::string tok = current.substr(b, e - b);
      for (char& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      tokens.push_back(std::move(tok));
    }
    current.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c)))
      flush();
    else
      current += c;
  }
  flush();
  return tokens;
}

namespace detail {

inline std::string join_ngram(const std::vector<std::string>& tokens, std::size_t start,
                              std::size_t n) {
  std::string key;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) key += '\x1f';
    key += tokens[start + i];
  }
  return key;
}

inline std::set<std::string> ngram_set(const std::vector<std::string>& tokens,
                                       std::size_t n) {
  std::set<std::string> grams;
  if (tokens.size() >= n)
    for (std::size_t i = 0; i + n <= tokens.size(); ++i)
      grams.insert(join_ngram(tokens, i, n));
  return grams;
}

}  // namespace detail

struct CopyRate {
  double percentage = 0.0;
  std::size_t ngrams_total = 0;
  std::size_t ngrams_matched = 0;
  bool too_short = false;  // generated text shorter than n tokens
};

inline CopyRate ngram_copy_rate(const std::string& generated,
                                const std::vector<std::string>& peer_texts,
                                std::size_t n = 8) {
  CopyRate result;
  const std::vector<std::string> tokens = tokenize(generated);
  if (tokens.size() < n) {
    result.too_short = true;
    return result;
  }
  std::set<std::string> peer_grams;
  for (const auto& text : peer_texts) {
    const auto grams = detail::ngram_set(tokenize(text), n);
    peer_grams.insert(grams.begin(), grams.end());
  }
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++result.ngrams_total;
    if (peer_grams.count(detail::join_ngram(tokens, i, n))) ++result.ngrams_matched;
  }
  result.percentage = 100.0 * static_cast<double>(result.ngrams_matched) /
                      static_cast<double>(result.ngrams_total);
  return result;
}

// Corpus-pooled copy rate: total matched n-grams over total n-grams across
// all candidates. Candidates shorter than n tokens contribute nothing.
inline CopyRate pooled_copy_rate(const std::vector<std::string>& candidates,
                                 const std::vector<std::string>& peer_texts,
                                 std::size_t n = 8) {
  CopyRate pooled;
  for (const auto& candidate : candidates) {
    const CopyRate one = ngram_copy_rate(candidate, peer_texts, n);
    if (one.too_short) continue;
    pooled.ngrams_total += one.ngrams_total;
    pooled.ngrams_matched += one.ngrams_matched;
  }
  if (pooled.ngrams_total == 0) {
    pooled.too_short = true;
    return pooled;
  }
  pooled.percentage = 100.0 * static_cast<double>(pooled.ngrams_matched) /
                      static_cast<double>(pooled.ngrams_total);
  return pooled;
}

struct RougeScores {
  double r1_f = 0.0;
  double rl_f = 0.0;
};

inline RougeScores rouge(const std::string& candidate, const std::string& reference) {
  const std::vector<std::string> cand = tokenize(candidate);
  const std::vector<std::string> ref = tokenize(reference);
  RougeScores scores;
  if (cand.empty() || ref.empty()) return scores;

  auto f1 = [](double overlap, double cand_n, double ref_n) {
    if (overlap <= 0.0) return 0.0;
    const double p = overlap / cand_n;
    const double r = overlap / ref_n;
    return 2.0 * p * r / (p + r);
  };

  // ROUGE-1: clipped unigram overlap.
  std::map<std::string, std::size_t> ref_counts;
  for (const auto& t : ref) ++ref_counts[t];
  std::size_t overlap = 0;
  for (const auto& t : cand) {
    auto it = ref_counts.find(t);
    if (it != ref_counts.end() && it->second > 0) {
      ++overlap;
      --it->second;
    }
  }
  scores.r1_f = f1(static_cast<double>(overlap), static_cast<double>(cand.size()),
                   static_cast<double>(ref.size()));

  // ROUGE-L: longest common subsequence.
  const std::size_t m = cand.size(), r = ref.size();
  std::vector<std::size_t> prev(r + 1, 0), curr(r + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= r; ++j)
      curr[j] = cand[i - 1] == ref[j - 1] ? prev[j - 1] + 1
                                          : std::max(prev[j], curr[j - 1]);
    std::swap(prev, curr);
  }
  scores.rl_f = f1(static_cast<double>(prev[r]), static_cast<double>(m),
                   static_cast<double>(r));
  return scores;
}

// ---------------------------------------------------------------------------
// Leakage probe: the same probe sessions scored under time-masked and
// unmasked peer retrieval. Unmasking must only ever be used here.

struct LeakageProbe {
  double masked_mean_cosine = 0.0;
  double unmasked_mean_cosine = 0.0;
  double masked_copy_rate = 0.0;    // pooled percentage
  double unmasked_copy_rate = 0.0;
  std::size_t probes = 0;
  std::size_t masked_pairs = 0;
  std::size_t unmasked_pairs = 0;

  nlohmann::json to_json() const {
    return {{"masked_mean_cosine", masked_mean_cosine},
            {"unmasked_mean_cosine", unmasked_mean_cosine},
            {"masked_copy_rate", masked_copy_rate},
            {"unmasked_copy_rate", unmasked_copy_rate},
            {"probes", probes},
            {"masked_pairs", masked_pairs},
            {"unmasked_pairs", unmasked_pairs}};
  }
};

inline LeakageProbe leakage_probe(const SessionStore& store, const PeerIndex& index,
                                  const EmbeddingStore& embeddings,
                                  const std::vector<std::size_t>& probe_sessions,
                                  const PeerQueryParams& params = {}) {
  if (probe_sessions.empty()) throw Error::validation("leakage_probe: no probe sessions");
  std::map<std::tuple<std::string, std::int64_t, std::string>, std::size_t> by_key;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Session& s = store.session(i);
    by_key[{s.user_id, s.timestamp, s.item_id}] = i;
  }

  LeakageProbe probe;
  probe.probes = probe_sessions.size();
  double masked_sum = 0.0, unmasked_sum = 0.0;
  std::vector<std::string> candidates;
  std::vector<std::string> masked_texts, unmasked_texts;

  for (std::size_t si : probe_sessions) {
    const Session& target = store.session(si);
    candidates.push_back(target.text);
    const Vec target_emb = embeddings.row(target.embedding_index);

    auto score = [&](const PeerSet& peers, double& sum, std::size_t& count,
                     std::vector<std::string>& texts) {
      for (const auto& peer : peers.peers) {
        sum += cosine(target_emb, embeddings.row(peer.embedding_index));
        ++count;
        auto it = by_key.find({peer.user_id, peer.timestamp, target.item_id});
        if (it != by_key.end()) texts.push_back(store.session(it->second).text);
      }
    };
    score(query_peers(index, target.item_id, target.timestamp, target.user_id, params),
          masked_sum, probe.masked_pairs, masked_texts);
    score(query_peers_unmasked(index, target.item_id, target.timestamp, target.user_id,
                               params),
          unmasked_sum, probe.unmasked_pairs, unmasked_texts);
  }

  if (probe.masked_pairs == 0 || probe.unmasked_pairs == 0)
    throw Error::validation("leakage_probe: a probe session has no peers");
  probe.masked_mean_cosine = masked_sum / static_cast<double>(probe.masked_pairs);
  probe.unmasked_mean_cosine = unmasked_sum / static_cast<double>(probe.unmasked_pairs);
  probe.masked_copy_rate = pooled_copy_rate(candidates, masked_texts).percentage;
  probe.unmasked_copy_rate = pooled_copy_rate(candidates, unmasked_texts).percentage;
  return probe;
}

// ---------------------------------------------------------------------------
// Report.

struct DiagnosticsReport {
  double effective_rank = 0.0;
  double same_item_peer_cosine = 0.0;
  double adjacent_user_cosine = 0.0;
  double pairwise_cosine_mean = 0.0;
  double pairwise_cosine_std = 0.0;
  std::size_t vectors_sampled = 0;
  std::size_t peer_pairs_sampled = 0;
  std::size_t adjacent_pairs_sampled = 0;
  std::size_t users_sampled = 0;
  nlohmann::json config_echo;

  nlohmann::json to_json() const {
    return {{"effective_rank", effective_rank},
            {"same_item_peer_cosine", same_item_peer_cosine},
            {"adjacent_user_cosine", adjacent_user_cosine},
            {"pairwise_cosine_mean", pairwise_cosine_mean},
            {"pairwise_cosine_std", pairwise_cosine_std},
            {"samples",
             {{"vectors", vectors_sampled},
              {"peer_pairs", peer_pairs_sampled},
              {"adjacent_pairs", adjacent_pairs_sampled},
              {"users", users_sampled}}},
            {"config", config_echo}};
  }

  std::string table() const {
    char buf[1024];
    std::snprintf(buf, sizeof(buf),
                  "%-24s %10s %8s\n"
                  "%-24s %10.4f %8zu\n"
                  "%-24s %10.4f %8zu\n"
                  "%-24s %10.4f %8zu\n"
                  "%-24s %10.4f %8zu\n"
                  "%-24s %10.4f %8zu\n",
                  "metric", "value", "n",
                  "effective_rank", effective_rank, vectors_sampled,
                  "same_item_peer_cosine", same_item_peer_cosine, peer_pairs_sampled,
                  "adjacent_user_cosine", adjacent_user_cosine, adjacent_pairs_sampled,
                  "pairwise_cosine_mean", pairwise_cosine_mean, users_sampled,
                  "pairwise_cosine_std", pairwise_cosine_std, users_sampled);
    return buf;
  }
};

}  // namespace latte
