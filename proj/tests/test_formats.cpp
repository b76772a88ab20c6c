#include "latte/io_util.hpp"
#include "latte/params.hpp"
#include "latte/rng.hpp"
#include "latte/trajectory_io.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

using namespace latte;

namespace {

std::string tmp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "latte_format_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

RelativeState state_of(Vec v, double residual, std::int64_t ts, std::size_t pos) {
  RelativeState s;
  s.vector = std::move(v);
  s.residual_norm = residual;
  s.timestamp = ts;
  s.session_pos = pos;
  return s;
}

}  // namespace

TEST_CASE("trajectory cache round-trips bit-exactly") {
  const std::uint32_t d = 3;
  Rng rng(3, stream_of("traj-cache"));

  std::vector<Trajectory> trajs(3);
  trajs[0].user_id = "alice";
  for (std::size_t t = 0; t < 4; ++t)
    trajs[0].states.push_back(
        state_of(rng.unit_vec(d), 0.5 + static_cast<double>(t),
                 1000 + static_cast<std::int64_t>(t), t));
  trajs[1].user_id = "b";  // single state
  trajs[1].states.push_back(state_of(rng.unit_vec(d), 2.0, -7, 0));
  trajs[2].user_id = "empty-user";  // zero states is a legal record

  const std::string path = tmp_path("traj.bin");
  save_trajectories(trajs, d, path);

  std::uint32_t d_loaded = 0;
  auto loaded = load_trajectories(path, &d_loaded);
  CHECK(d_loaded == d);
  REQUIRE(loaded.size() == 3);
  CHECK(loaded[0].user_id == "alice");
  CHECK(loaded[2].user_id == "empty-user");
  CHECK(loaded[2].states.empty());

  // storage is f32 + i64: values must round-trip exactly at that precision
  REQUIRE(loaded[0].states.size() == 4);
  for (std::size_t t = 0; t < 4; ++t) {
    const auto& orig = trajs[0].states[t];
    const auto& got = loaded[0].states[t];
    for (Eigen::Index i = 0; i < 3; ++i)
      REQUIRE(got.vector[i] == static_cast<double>(static_cast<float>(orig.vector[i])));
    CHECK(got.residual_norm ==
          static_cast<double>(static_cast<float>(orig.residual_norm)));
    CHECK(got.timestamp == orig.timestamp);
    CHECK(got.session_pos == t);
  }
  CHECK(loaded[1].states[0].timestamp == -7);

  SECTION("re-saving the loaded cache is byte-identical") {
    const std::string path2 = tmp_path("traj2.bin");
    save_trajectories(loaded, d, path2);
    CHECK(read_file(path) == read_file(path2));
  }
  SECTION("wrong magic is refused") {
    const std::string bad = tmp_path("notatraj.bin");
    write_file(bad, "LATTENOPErest of the file");
    CHECK_THROWS_AS(load_trajectories(bad), Error);
  }
  SECTION("future versions are refused") {
    std::string bytes = read_file(path);
    bytes[8] = 9;  // version field follows the 8-byte magic
    const std::string bad = tmp_path("badver.bin");
    write_file(bad, bytes);
    CHECK_THROWS_AS(load_trajectories(bad), Error);
  }
  SECTION("truncation inside a record is detected") {
    std::string bytes = read_file(path);
    const std::string bad = tmp_path("trunc.bin");
    write_file(bad, bytes.substr(0, bytes.size() - 5));
    CHECK_THROWS_AS(load_trajectories(bad), Error);
  }
  SECTION("dimension mismatch on save is an error") {
    CHECK_THROWS_AS(save_trajectories(trajs, d + 1, tmp_path("wrongd.bin")), Error);
  }
}

TEST_CASE("model container preserves sections, hyper block, and payload") {
  ParamBlock block;
  block.add("W", 3, 2, 2);
  block.add("b", 3, 1, 0);
  block.init(11, "fmt-test");
  REQUIRE(block.size() == 9);

  const std::string hyper = R"({"lr":0.001,"epochs":3})";
  const std::string path = tmp_path("model.bin");
  save_model(path, "T1", hyper, block);

  LoadedModel loaded = load_model(path);
  CHECK(loaded.arch_tag == "T1");
  CHECK(loaded.hyper_json == hyper);
  REQUIRE(loaded.sections.size() == 2);
  CHECK(loaded.sections[0].name == "W");
  CHECK(loaded.sections[0].rows == 3);
  CHECK(loaded.sections[0].cols == 2);
  CHECK(loaded.sections[1].name == "b");
  REQUIRE(loaded.flat.size() == 9);
  for (Eigen::Index i = 0; i < 9; ++i) REQUIRE(loaded.flat[i] == block.flat[i]);

  SECTION("adopting into a matching block copies the payload") {
    ParamBlock fresh;
    fresh.add("W", 3, 2, 2);
    fresh.add("b", 3, 1, 0);
    adopt_payload(fresh, loaded);
    for (Eigen::Index i = 0; i < 9; ++i) REQUIRE(fresh.flat[i] == block.flat[i]);
  }
  SECTION("layout mismatches are refused") {
    ParamBlock wrong_shape;
    wrong_shape.add("W", 2, 3, 3);
    wrong_shape.add("b", 3, 1, 0);
    CHECK_THROWS_AS(adopt_payload(wrong_shape, loaded), Error);

    ParamBlock wrong_name;
    wrong_name.add("V", 3, 2, 2);
    wrong_name.add("b", 3, 1, 0);
    CHECK_THROWS_AS(adopt_payload(wrong_name, loaded), Error);

    ParamBlock wrong_count;
    wrong_count.add("W", 3, 2, 2);
    CHECK_THROWS_AS(adopt_payload(wrong_count, loaded), Error);
  }
  SECTION("non-finite payloads are refused at load") {
    ParamBlock poisoned;
    poisoned.add("W", 2, 1, 0);
    poisoned.allocate();
    poisoned.flat[1] = std::numeric_limits<double>::quiet_NaN();
    const std::string bad = tmp_path("nan.bin");
    save_model(bad, "T1", "{}", poisoned);
    CHECK_THROWS_AS(load_model(bad), Error);
  }
  SECTION("truncated payloads are refused") {
    std::string bytes = read_file(path);
    const std::string bad = tmp_path("modeltrunc.bin");
    write_file(bad, bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(load_model(bad), Error);
  }
  SECTION("wrong magic is refused") {
    const std::string bad = tmp_path("badmagic.bin");
    write_file(bad, "XXXXXXXXsome bytes here");
    CHECK_THROWS_AS(load_model(bad), Error);
  }
}

TEST_CASE("content hashing is stable and canonical") {
  SECTION("64-bit FNV-1a known answers") {
    CHECK(fnv1a(std::string("")) == 0xcbf29ce484222325ULL);
    CHECK(fnv1a(std::string("a")) == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a(std::string("ab")) != fnv1a(std::string("ba")));
  }
  SECTION("file hash equals the in-memory hash of its bytes") {
    const std::string path = tmp_path("hashme.txt");
    const std::string content = "line one\nline two\n";
    write_file(path, content);
    CHECK(hash_file(path) == fnv1a(content));
  }
  SECTION("hex rendering is fixed-width lowercase") {
    CHECK(hex64(0xcbf29ce484222325ULL) == "cbf29ce484222325");
    CHECK(hex64(0x0ULL) == "0000000000000000");
    CHECK(hex64(0xffULL) == "00000000000000ff");
  }
}

TEST_CASE("length-prefixed strings round-trip through streams") {
  const std::string path = tmp_path("strings.bin");
  {
    auto out = open_out(path);
    write_string(out, "hello");
    write_string(out, "");
    write_string(out, std::string("\0binary\xff", 8));
  }
  auto in = open_in(path);
  CHECK(read_string(in, "first") == "hello");
  CHECK(read_string(in, "second").empty());
  CHECK(read_string(in, "third") == std::string("\0binary\xff", 8));

  SECTION("reading past the end reports the field name") {
    try {
      read_string(in, "ghost-field");
      FAIL("expected a throw");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("ghost-field") != std::string::npos);
    }
  }
}
