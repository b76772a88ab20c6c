#include "latte/diagnostics.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <optional>
#include <vector>

using namespace latte;

namespace {

Session make_session(std::string user, std::string item, std::int64_t ts,
                     std::uint64_t emb, std::string text = "placeholder review text") {
  Session s;
  s.user_id = std::move(user);
  s.item_id = std::move(item);
  s.timestamp = ts;
  s.text = std::move(text);
  s.embedding_index = emb;
  return s;
}

Vec basis(Eigen::Index d, Eigen::Index i) {
  Vec v = Vec::Zero(d);
  v[i] = 1.0;
  return v;
}

EmbeddingStore store_from_rows(const std::vector<Vec>& rows) {
  const auto d = static_cast<std::uint32_t>(rows.front().size());
  std::vector<float> data;
  for (const Vec& r : rows)
    for (Eigen::Index i = 0; i < r.size(); ++i)
      data.push_back(static_cast<float>(r[i]));
  return EmbeddingStore(d, std::move(data));
}

}  // namespace

TEST_CASE("effective rank of a known spectrum is exact") {
  // Centered covariance comes out exactly diag(2, 1): row means are zero and
  // every product is a small integer. (sum)^2 / (sum of squares) = 9/5.
  Mat x(2, 5);
  x << 2, -2, 0, 0, 0,
       1, 1, -1, -1, 0;
  REQUIRE(effective_rank(x) == 1.8);

  SECTION("identical isotropic directions score full rank") {
    Mat iso(3, 4);
    iso << 1, -1, 0, 0,
           0, 0, 1, -1,
           0, 0, 0, 0;
    // covariance diag(2/3, 2/3, 0): two equal eigenvalues -> rank 2
    CHECK(effective_rank(iso) == Catch::Approx(2.0).epsilon(1e-9));
  }
  SECTION("rank-one data scores 1") {
    Mat one(3, 4);
    one.setZero();
    one.row(0) << 1, 2, 3, 4;
    CHECK(effective_rank(one) == Catch::Approx(1.0).epsilon(1e-9));
  }
  SECTION("fewer than two vectors is rejected") {
    CHECK_THROWS_AS(effective_rank(Mat(3, 1)), Error);
  }
}

TEST_CASE("pairwise cosine statistics") {
  SECTION("hand-computed mix of aligned and orthogonal columns") {
    Mat m(3, 3);
    m.col(0) = basis(3, 0);
    m.col(1) = basis(3, 0);
    m.col(2) = basis(3, 1);
    auto [mean, sd] = pairwise_cosine_stats(m);
    CHECK(mean == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(sd == Catch::Approx(std::sqrt(2.0 / 9.0)).epsilon(1e-12));
  }
  SECTION("identical columns collapse to mean 1, std 0") {
    Mat m(4, 5);
    for (Eigen::Index c = 0; c < 5; ++c) m.col(c) = basis(4, 2);
    auto [mean, sd] = pairwise_cosine_stats(m);
    CHECK(mean == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(sd == Catch::Approx(0.0).margin(1e-7));
  }
  SECTION("needs two columns") {
    CHECK_THROWS_AS(pairwise_cosine_stats(Mat(3, 1)), Error);
  }
}

TEST_CASE("tokenizer folds case and strips punctuation edges") {
  auto tokens = tokenize("  Hello, WORLD!  foo-bar x9 ... ");
  REQUIRE(tokens.size() == 4);
  CHECK(tokens[0] == "hello");
  CHECK(tokens[1] == "world");
  CHECK(tokens[2] == "foo-bar");  // interior punctuation survives
  CHECK(tokens[3] == "x9");

  CHECK(tokenize("!!! ... ---").empty());
  CHECK(tokenize("").empty());

  // bytes >= 0x80 count as word characters, so UTF-8 words survive
  auto utf = tokenize("caf\xC3\xA9 rocks");
  REQUIRE(utf.size() == 2);
  CHECK(utf[0] == "caf\xC3\xA9");
}

TEST_CASE("n-gram copy rate against peer texts") {
  SECTION("half the bigrams match") {
    CopyRate r = ngram_copy_rate("a b c", {"x a b y"}, 2);
    CHECK_FALSE(r.too_short);
    CHECK(r.ngrams_total == 2);
    CHECK(r.ngrams_matched == 1);  // "a b" matches, "b c" does not
    CHECK(r.percentage == 50.0);
  }
  SECTION("matching is case-insensitive") {
    CopyRate r = ngram_copy_rate("A B", {"a b"}, 2);
    CHECK(r.percentage == 100.0);
  }
  SECTION("short generations are flagged, not scored") {
    CopyRate r = ngram_copy_rate("lonely", {"a b"}, 2);
    CHECK(r.too_short);
    CHECK(r.ngrams_total == 0);
  }
  SECTION("default window is eight tokens") {
    const std::string nine = "t1 t2 t3 t4 t5 t6 t7 t8 t9";
    CopyRate r = ngram_copy_rate(nine, {nine});
    CHECK(r.ngrams_total == 2);
    CHECK(r.percentage == 100.0);
  }
  SECTION("pooled rate sums totals across candidates") {
    CopyRate r = pooled_copy_rate({"a b c", "z"}, {"x a b y"}, 2);
    CHECK_FALSE(r.too_short);
    CHECK(r.ngrams_total == 2);  // the one-token candidate contributes nothing
    CHECK(r.ngrams_matched == 1);
    CHECK(r.percentage == 50.0);
  }
  SECTION("pooled rate with only short candidates is flagged") {
    CopyRate r = pooled_copy_rate({"z", "q"}, {"a b"}, 2);
    CHECK(r.too_short);
  }
}

TEST_CASE("rouge overlap scores are exact on the reference example") {
  RougeScores s = rouge("a b c", "a c d");
  // unigram overlap {a, c}: P = R = 2/3; LCS "a c": P = R = 2/3
  REQUIRE(s.r1_f == 2.0 / 3.0);
  REQUIRE(s.rl_f == 2.0 / 3.0);

  SECTION("identical strings score 1") {
    RougeScores t = rouge("one two three", "one two three");
    CHECK(t.r1_f == 1.0);
    CHECK(t.rl_f == 1.0);
  }
  SECTION("disjoint strings score 0") {
    RougeScores t = rouge("one two", "three four");
    CHECK(t.r1_f == 0.0);
    CHECK(t.rl_f == 0.0);
  }
  SECTION("unigram clipping caps repeated candidate tokens") {
    RougeScores t = rouge("a a a a", "a b");
    // overlap clipped to 1: P = 1/4, R = 1/2 -> F1 = 1/3
    CHECK(t.r1_f == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  }
  SECTION("LCS respects order") {
    RougeScores t = rouge("c b a", "a b c");
    // longest common subsequence is any single token
    CHECK(t.rl_f == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  }
  SECTION("empty sides score zero") {
    CHECK(rouge("", "a").rl_f == 0.0);
    CHECK(rouge("a", "").r1_f == 0.0);
  }
}

TEST_CASE("adjacent state cosine over trajectories") {
  auto state_at = [](Vec v, std::size_t pos) {
    RelativeState s;
    s.vector = std::move(v);
    s.residual_norm = 1.0;
    s.session_pos = pos;
    return s;
  };
  Trajectory a;
  a.user_id = "a";
  a.states = {state_at(basis(3, 0), 0), state_at(basis(3, 0), 1),
              state_at(basis(3, 1), 2)};
  Trajectory b;
  b.user_id = "b";
  b.states = {state_at(basis(3, 0), 0), state_at(basis(3, 1), 1)};

  SECTION("all pairs when the sample budget covers them") {
    // pairs: (1, 1 -> cos 1), (1 -> e1, cos 0), (b: cos 0) -> mean 1/3
    const double mean = adjacent_user_cosine({a, b}, 100, 5);
    CHECK(mean == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  }
  SECTION("subsampling is deterministic in the seed") {
    const double m1 = adjacent_user_cosine({a, b}, 2, 7);
    const double m2 = adjacent_user_cosine({a, b}, 2, 7);
    CHECK(m1 == m2);
  }
  SECTION("no adjacent pairs anywhere is an error") {
    Trajectory lone;
    lone.user_id = "c";
    lone.states = {state_at(basis(3, 0), 0)};
    CHECK_THROWS_AS(adjacent_user_cosine({lone}, 10, 1), Error);
  }
}

TEST_CASE("same-item peer cosine on a crafted store") {
  // three users review the same item in sequence, all with identical
  // embeddings: every sampled (target, earlier peer) pair has cosine 1
  std::vector<Session> raw = {make_session("u1", "x", 10, 0),
                              make_session("u2", "x", 20, 1),
                              make_session("u3", "x", 30, 2)};
  SessionStore store(std::move(raw));
  EmbeddingStore emb = store_from_rows({basis(3, 1), basis(3, 1), basis(3, 1)});
  PeerIndex index = build_peer_index(store);

  auto vector_of = [&](std::size_t si) -> std::optional<Vec> {
    return emb.row(store.session(si).embedding_index);
  };

  SECTION("aligned embeddings give mean cosine one") {
    auto [mean, used] = same_item_peer_cosine(store, index, vector_of, 16, 3);
    CHECK(mean == Catch::Approx(1.0).epsilon(1e-6));
    CHECK(used > 0);
  }
  SECTION("unavailable vectors are skipped") {
    auto gappy = [&](std::size_t si) -> std::optional<Vec> {
      if (store.session(si).user_id == "u3") return std::nullopt;
      return emb.row(store.session(si).embedding_index);
    };
    auto [mean, used] = same_item_peer_cosine(store, index, gappy, 16, 3);
    CHECK(mean == Catch::Approx(1.0).epsilon(1e-6));
    CHECK(used > 0);
  }
  SECTION("a store with no reachable pairs throws") {
    std::vector<Session> solo = {make_session("only", "y", 10, 0)};
    SessionStore lone_store(std::move(solo));
    PeerIndex lone_index = build_peer_index(lone_store);
    CHECK_THROWS_AS(same_item_peer_cosine(lone_store, lone_index, vector_of, 4, 3),
                    Error);
  }
}

TEST_CASE("leakage probe separates masked and unmasked retrieval") {
  const std::string probe_text =
      "alpha beta gamma delta epsilon zeta eta theta iota kappa";
  const std::string past_text =
      "one two three four five six seven eight nine ten";
  // past peer: orthogonal embedding, unrelated text; future peer: identical
  // text and embedding (a planted copycat visible only without the time mask)
  std::vector<Session> raw = {
      make_session("past", "x", 50, 0, past_text),
      make_session("probe", "x", 100, 1, probe_text),
      make_session("future", "x", 200, 2, probe_text),
  };
  SessionStore store(std::move(raw));
  EmbeddingStore emb = store_from_rows({basis(3, 0), basis(3, 1), basis(3, 1)});
  PeerIndex index = build_peer_index(store);

  std::size_t probe_session = store.size();
  for (std::size_t i = 0; i < store.size(); ++i)
    if (store.session(i).user_id == "probe") probe_session = i;
  REQUIRE(probe_session < store.size());

  LeakageProbe probe = leakage_probe(store, index, emb, {probe_session});
  CHECK(probe.probes == 1);
  CHECK(probe.masked_pairs == 1);    // only the past peer
  CHECK(probe.unmasked_pairs == 2);  // past and future
  CHECK(probe.masked_copy_rate == 0.0);
  CHECK(probe.unmasked_copy_rate == 100.0);
  CHECK(probe.masked_mean_cosine == Catch::Approx(0.0).margin(1e-7));
  CHECK(probe.unmasked_mean_cosine == Catch::Approx(0.5).epsilon(1e-7));
  CHECK(probe.unmasked_copy_rate > probe.masked_copy_rate);
  CHECK(probe.unmasked_mean_cosine > probe.masked_mean_cosine);

  CHECK_THROWS_AS(leakage_probe(store, index, emb, {}), Error);
}

TEST_CASE("diagnostics report serializes both ways") {
  DiagnosticsReport r;
  r.effective_rank = 3.25;
  r.pairwise_cosine_mean = 0.125;
  r.vectors_sampled = 42;
  const std::string table = r.table();
  CHECK(table.find("effective_rank") != std::string::npos);
  CHECK(table.find("3.2500") != std::string::npos);
  CHECK(table.find("42") != std::string::npos);
  nlohmann::json j = r.to_json();
  CHECK(j.at("effective_rank").get<double>() == 3.25);
  CHECK(j.at("samples").at("vectors").get<std::size_t>() == 42);
}
