#include "latte/embedding.hpp"
#include "latte/filter.hpp"
#include "latte/peer.hpp"
#include "latte/session.hpp"
#include "latte/split.hpp"
#include "latte/synthcorpus.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

using namespace latte;

namespace {

std::string tmp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "latte_corpus_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

Session make_session(std::string user, std::string item, std::int64_t ts,
                     std::uint64_t emb, std::string text = "some review text") {
  Session s;
  s.user_id = std::move(user);
  s.item_id = std::move(item);
  s.timestamp = ts;
  s.text = std::move(text);
  s.embedding_index = emb;
  return s;
}

}  // namespace

TEST_CASE("session store orders per-user lists by time") {
  std::vector<Session> raw = {
      make_session("u2", "i1", 30, 0), make_session("u1", "i2", 20, 1),
      make_session("u1", "i1", 10, 2), make_session("u2", "i3", 5, 3)};
  SessionStore store(std::move(raw));

  const auto& u1 = store.user_sessions("u1");
  REQUIRE(u1.size() == 2);
  CHECK(store.session(u1[0]).timestamp == 10);
  CHECK(store.session(u1[1]).timestamp == 20);

  const auto& u2 = store.user_sessions("u2");
  CHECK(store.session(u2[0]).timestamp == 5);
  CHECK(store.session(u2[1]).timestamp == 30);

  CHECK(store.users().size() == 2);
  CHECK(store.has_user("u1"));
  CHECK_FALSE(store.has_user("nope"));
}

TEST_CASE("session store breaks timestamp ties deterministically") {
  std::vector<Session> raw = {make_session("u", "b", 10, 0),
                              make_session("u", "a", 10, 1),
                              make_session("u", "c", 5, 2)};
  SessionStore store(std::move(raw));
  const auto& list = store.user_sessions("u");
  CHECK(store.session(list[0]).item_id == "c");
  // tie at t=10 resolves lexicographically by item
  CHECK(store.session(list[1]).item_id == "a");
  CHECK(store.session(list[2]).item_id == "b");
}

TEST_CASE("sessions JSONL round-trips byte-identically") {
  std::vector<Session> raw;
  for (int i = 0; i < 7; ++i)
    raw.push_back(make_session("user" + std::to_string(i % 3), "item" + std::to_string(i),
                               100 + i, static_cast<std::uint64_t>(i),
                               "text with \"quotes\" and \xE2\x9C\x93 utf8 #" +
                                   std::to_string(i)));
  SessionStore store(std::move(raw));

  const std::string p1 = tmp_path("roundtrip1.jsonl");
  const std::string p2 = tmp_path("roundtrip2.jsonl");
  save_sessions(store, p1);
  SessionStore loaded = load_sessions(p1);
  REQUIRE(loaded.size() == store.size());
  save_sessions(loaded, p2);
  CHECK(read_file(p1) == read_file(p2));

  for (std::size_t i = 0; i < store.size(); ++i) {
    CHECK(loaded.session(i).user_id == store.session(i).user_id);
    CHECK(loaded.session(i).item_id == store.session(i).item_id);
    CHECK(loaded.session(i).timestamp == store.session(i).timestamp);
    CHECK(loaded.session(i).text == store.session(i).text);
    CHECK(loaded.session(i).embedding_index == store.session(i).embedding_index);
  }
}

TEST_CASE("session loader rejects malformed lines") {
  const std::string path = tmp_path("bad.jsonl");

  SECTION("not json") {
    write_file(path, "this is not json\n");
    CHECK_THROWS_AS(load_sessions(path), Error);
  }
  SECTION("missing field") {
    write_file(path, R"({"user":"u","item":"i","ts":1})" "\n");
    CHECK_THROWS_AS(load_sessions(path), Error);
  }
  SECTION("wrong type") {
    write_file(path, R"({"user":"u","item":"i","ts":"soon","text":"t","emb":0})" "\n");
    CHECK_THROWS_AS(load_sessions(path), Error);
  }
  SECTION("empty file is a validation error") {
    write_file(path, "");
    CHECK_THROWS_AS(load_sessions(path), Error);
  }
}

TEST_CASE("embedding store round-trips bit-exactly") {
  const std::uint32_t d = 5;
  std::vector<float> data;
  Rng rng(3, stream_of("emb-test"));
  for (int r = 0; r < 4; ++r) {
    Vec v = rng.unit_vec(d);
    for (Eigen::Index i = 0; i < v.size(); ++i)
      data.push_back(static_cast<float>(v[i]));
  }
  EmbeddingStore store(d, std::vector<float>(data));
  const std::string path = tmp_path("emb.bin");
  store.save(path);

  EmbeddingStore loaded = load_embeddings(path, d);
  REQUIRE(loaded.count() == 4);
  REQUIRE(loaded.dim() == d);
  for (std::uint64_t r = 0; r < 4; ++r) {
    const Vec a = store.row(r);
    const Vec b = loaded.row(r);
    for (Eigen::Index i = 0; i < a.size(); ++i)
      CHECK(a[i] == b[i]);  // f32 payload promoted identically
  }

  // second save is byte-identical
  const std::string path2 = tmp_path("emb2.bin");
  loaded.save(path2);
  CHECK(read_file(path) == read_file(path2));
}

TEST_CASE("embedding loader validates the file") {
  const std::uint32_t d = 3;
  std::vector<float> data = {1.f, 0.f, 0.f, 0.f, 1.f, 0.f};
  EmbeddingStore store(d, std::vector<float>(data));
  const std::string path = tmp_path("emb_val.bin");
  store.save(path);

  SECTION("dim mismatch") {
    CHECK_THROWS_AS(load_embeddings(path, 4), Error);
  }
  SECTION("expected_dim 0 adopts the file dim") {
    CHECK(load_embeddings(path).dim() == 3);
  }
  SECTION("trailing bytes rejected") {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out.put('x');
    out.close();
    CHECK_THROWS_AS(load_embeddings(path, d), Error);
  }
  SECTION("bad magic rejected") {
    std::string bytes = read_file(path);
    bytes[0] = 'X';
    write_file(path, bytes);
    CHECK_THROWS_AS(load_embeddings(path, d), Error);
  }
  SECTION("non-unit rows rejected unless allowed") {
    std::vector<float> big = {2.f, 0.f, 0.f};
    EmbeddingStore bad(d, std::vector<float>(big));
    const std::string bp = tmp_path("emb_nonunit.bin");
    bad.save(bp);
    CHECK_THROWS_AS(load_embeddings(bp, d), Error);
    CHECK(load_embeddings(bp, d, /*require_unit=*/false).count() == 1);
  }
  SECTION("out-of-range row read rejected") {
    CHECK_THROWS_AS(store.row(2), Error);
  }
}

TEST_CASE("synthetic corpus has the advertised shape") {
  SyntheticCorpusSpec spec;
  spec.target_users = 6;
  spec.peer_users = 8;
  spec.items = 6;
  spec.sessions_per_user = 8;
  spec.peer_reviews_per_item = 4;
  SyntheticCorpus corpus = gen_additive(spec);

  // every session's embedding row exists and is unit norm
  REQUIRE(corpus.embeddings.count() == corpus.store.size());
  for (std::size_t i = 0; i < corpus.store.size(); ++i) {
    const Session& s = corpus.store.session(i);
    REQUIRE(s.embedding_index < corpus.embeddings.count());
    CHECK(std::abs(corpus.embeddings.row(s.embedding_index).norm() - 1.0) < 1e-6);
    CHECK(s.text.size() >= 30);
  }

  // target users have exactly sessions_per_user sessions, chronological
  for (int u = 0; u < spec.target_users; ++u) {
    char name[16];
    std::snprintf(name, sizeof(name), "user%03d", u);
    const auto& list = corpus.store.user_sessions(name);
    REQUIRE(list.size() == static_cast<std::size_t>(spec.sessions_per_user));
    for (std::size_t k = 1; k < list.size(); ++k)
      CHECK(corpus.store.session(list[k - 1]).timestamp <
            corpus.store.session(list[k]).timestamp);
  }

  // truth latents exist for target sessions
  CHECK(corpus.truth.size() >= static_cast<std::size_t>(spec.target_users) *
                                   static_cast<std::size_t>(spec.sessions_per_user));

  // determinism: same spec, same bytes
  SyntheticCorpus again = gen_additive(spec);
  REQUIRE(again.store.size() == corpus.store.size());
  for (std::size_t i = 0; i < corpus.store.size(); ++i) {
    CHECK(again.store.session(i).text == corpus.store.session(i).text);
    CHECK(again.store.session(i).timestamp == corpus.store.session(i).timestamp);
  }
  for (std::uint64_t r = 0; r < corpus.embeddings.count(); ++r) {
    const Vec a = corpus.embeddings.row(r);
    const Vec b = again.embeddings.row(r);
    for (Eigen::Index i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("corpus writer emits a loadable trio") {
  SyntheticCorpusSpec spec;
  spec.target_users = 4;
  spec.peer_users = 6;
  spec.items = 4;
  spec.sessions_per_user = 8;
  spec.peer_reviews_per_item = 3;
  const std::string dir = tmp_path("fixture_out");
  std::filesystem::remove_all(dir);
  write_corpus(gen_additive(spec), dir);

  SessionStore store = load_sessions(dir + "/sessions.jsonl");
  EmbeddingStore emb = load_embeddings(dir + "/embeddings.bin");
  CHECK(store.size() == emb.count());
  CHECK(std::filesystem::exists(dir + "/truth.jsonl"));
}

TEST_CASE("filters keep exactly the users with enough history, peers, and text") {
  // Users: "good" passes everything; "short" lacks history; "thin" has one
  // non-final session on an item nobody reviewed earlier; "terse" fails the
  // minimum character rule on its last sessions. The final session is never
  // peer-checked, so everyone's last interaction may be on a fresh item.
  std::vector<Session> raw;
  const std::string long_text(40, 'x');
  const std::string short_text(10, 'x');

  // peer mass: 5 other users reviewing item "shared" early
  for (int p = 0; p < 5; ++p) {
    const std::string peer = "peer" + std::to_string(p);
    for (int k = 0; k < 4; ++k)
      raw.push_back(make_session(peer, "warm" + std::to_string(k), 10 + k,
                                 raw.size(), long_text));
    raw.push_back(make_session(peer, "shared", 50 + p, raw.size(), long_text));
  }

  // 9 sessions >= min_history(8)+1, all but the last on the covered item.
  auto add_covered_user = [&](const std::string& name, const std::string& text) {
    for (int k = 0; k < 8; ++k)
      raw.push_back(make_session(name, "shared", 100 + k, raw.size(), text));
    raw.push_back(make_session(name, "fresh_" + name, 120, raw.size(), text));
  };
  add_covered_user("good", long_text);
  add_covered_user("terse", short_text);  // text too short in the last 3
  for (int k = 0; k < 5; ++k)             // too little history
    raw.push_back(make_session("short", "shared", 100 + k, raw.size(), long_text));

  // "thin": mid-history session on an uncovered item
  for (int k = 0; k < 4; ++k)
    raw.push_back(make_session("thin", "shared", 100 + k, raw.size(), long_text));
  raw.push_back(make_session("thin", "lonely", 110, raw.size(), long_text));
  for (int k = 0; k < 4; ++k)
    raw.push_back(make_session("thin", "shared", 120 + k, raw.size(), long_text));

  SessionStore store(std::move(raw));
  PeerIndex index = build_peer_index(store);
  FilterParams params;  // min_history=8, min_valid_peers=4, min_chars=30
  auto [filtered, report] = apply_filters(store, index, params);

  CHECK(report.users_before == 9);  // 5 peers + 4 candidates
  CHECK(filtered.has_user("good"));
  CHECK_FALSE(filtered.has_user("short"));
  CHECK_FALSE(filtered.has_user("terse"));
  CHECK_FALSE(filtered.has_user("thin"));
  // survivors keep their full history
  CHECK(filtered.user_sessions("good").size() == 9);
  CHECK(report.users_after == 1);
  CHECK(report.retention == Catch::Approx(1.0 / 9.0));

  SECTION("chars_on_history applies the text rule everywhere") {
    FilterParams strict = params;
    strict.chars_on_history = true;
    // give "good" one short early review
    std::vector<Session> raw2;
    for (std::size_t i = 0; i < store.size(); ++i) raw2.push_back(store.session(i));
    for (auto& s : raw2)
      if (s.user_id == "good" && s.timestamp == 100) s.text = short_text;
    SessionStore store2(std::move(raw2));
    PeerIndex index2 = build_peer_index(store2);
    auto [f1, r1] = apply_filters(store2, index2, params);
    auto [f2, r2] = apply_filters(store2, index2, strict);
    CHECK(f1.has_user("good"));        // default: only the last 3 checked
    CHECK_FALSE(f2.has_user("good"));  // strict: early terse review fails it
  }
}

TEST_CASE("chronological split fixes the holdout trio and rolling pairs") {
  std::vector<Session> raw;
  // ten-session user plus ample peers on one shared item
  for (int p = 0; p < 6; ++p) {
    const std::string peer = "p" + std::to_string(p);
    for (int k = 0; k < 4; ++k)
      raw.push_back(make_session(peer, "w" + std::to_string(k), k, raw.size()));
    raw.push_back(make_session(peer, "it", 10 + p, raw.size()));
  }
  for (int k = 0; k < 10; ++k)
    raw.push_back(make_session("u", "it", 100 + k, raw.size()));
  SessionStore store(std::move(raw));
  PeerIndex index = build_peer_index(store);

  SplitParams params;
  params.min_sessions = 8;
  params.min_states = 4;
  SplitAssignment split = chronological_split(store, index, params);

  REQUIRE(split.users.count("u") == 1);
  const UserSplit& us = split.users.at("u");
  CHECK(us.test_pos == 9);
  CHECK(us.val_pos == 8);
  CHECK(us.bridge_pos == 7);
  // targets 4..7 => pairs (3,4) (4,5) (5,6) (6,7)
  REQUIRE(us.pairs.size() == 4);
  CHECK(us.pairs.front() == std::make_pair<std::size_t, std::size_t>(3, 4));
  CHECK(us.pairs.back() == std::make_pair<std::size_t, std::size_t>(6, 7));

  SECTION("too few sessions is excluded with a reason") {
    std::vector<Session> tiny;
    for (int k = 0; k < 5; ++k)
      tiny.push_back(make_session("short", "it", k, static_cast<std::uint64_t>(k)));
    SessionStore small(std::move(tiny));
    PeerIndex small_index = build_peer_index(small);
    SplitAssignment s2 = chronological_split(small, small_index, params);
    CHECK(s2.users.empty());
    CHECK(s2.excluded.at("short") == "too_few_sessions");
  }

  SECTION("holdout timestamp ties exclude the user") {
    std::vector<Session> tied;
    for (int k = 0; k < 9; ++k)
      tied.push_back(make_session("t", "a" + std::to_string(k), 100 + k,
                                  static_cast<std::uint64_t>(k)));
    tied.push_back(make_session("t", "zz", 108, 9));  // same ts as position 8
    SessionStore ts(std::move(tied));
    PeerIndex ti = build_peer_index(ts);
    SplitAssignment s3 = chronological_split(ts, ti, params);
    CHECK(s3.excluded.at("t") == "holdout_timestamp_ties");
  }
}

TEST_CASE("split JSON round-trips") {
  SplitAssignment split;
  split.params.min_sessions = 8;
  split.params.min_states = 4;
  UserSplit us;
  us.test_pos = 11;
  us.val_pos = 10;
  us.bridge_pos = 9;
  us.pairs = {{3, 4}, {4, 5}};
  split.users["alice"] = us;
  split.excluded["bob"] = "too_few_sessions";

  const std::string path = tmp_path("split.json");
  split.save(path);
  SplitAssignment loaded = SplitAssignment::load(path);
  CHECK(loaded.users.at("alice").test_pos == 11);
  CHECK(loaded.users.at("alice").val_pos == 10);
  CHECK(loaded.users.at("alice").bridge_pos == 9);
  CHECK(loaded.users.at("alice").pairs == us.pairs);
  CHECK(loaded.excluded.at("bob") == "too_few_sessions");
  CHECK(loaded.params.min_sessions == 8);

  // second save identical
  const std::string path2 = tmp_path("split2.json");
  loaded.save(path2);
  CHECK(read_file(path) == read_file(path2));
}
