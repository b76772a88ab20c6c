#include "latte/driftlab.hpp"  // snap_to_grid for exact closed-form identities
#include "latte/forecast.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

using namespace latte;

namespace {

std::string tmp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "latte_forecast_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

Mat random_states(Eigen::Index d, Eigen::Index n, std::uint64_t seed,
                  bool grid = false) {
  Rng rng(seed, stream_of("forecast-states"));
  Mat m(d, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    Vec v = rng.unit_vec(d);
    m.col(c) = grid ? snap_to_grid(v) : v;
  }
  return m;
}

}  // namespace

TEST_CASE("last-state predictor returns the final column") {
  Mat s = random_states(5, 4, 1);
  ForecastResult r = predict_last(s);
  CHECK((r.raw - s.col(3)).norm() == 0.0);
  CHECK(r.arch == Arch::P0_last);
  CHECK(r.input_len == 4);
  CHECK(r.normalized.norm() == Catch::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(predict_last(Mat(5, 0)), Error);
}

TEST_CASE("linear trend extrapolates one step") {
  Mat s = random_states(6, 5, 2);
  ForecastResult r = predict_linear_trend(s);
  Vec expect = 2.0 * s.col(4) - s.col(3);
  CHECK((r.raw - expect).norm() == 0.0);
  CHECK_THROWS_AS(predict_linear_trend(random_states(6, 1, 3)), Error);
}

TEST_CASE("EMA blends last state and running mean") {
  Mat s = random_states(4, 6, 4);

  SECTION("beta = 1 reduces to the last state exactly") {
    ForecastResult r = predict_ema(s, 1.0);
    for (Eigen::Index i = 0; i < 4; ++i) CHECK(r.raw[i] == s.col(5)[i]);
  }
  SECTION("beta = 0 reduces to the plain average exactly") {
    ForecastResult r = predict_ema(s, 0.0);
    Vec mean = s.rowwise().mean();
    for (Eigen::Index i = 0; i < 4; ++i) CHECK(r.raw[i] == mean[i]);
  }
  SECTION("interior beta matches an independent computation") {
    const double beta = 0.3;
    ForecastResult r = predict_ema(s, beta);
    for (Eigen::Index i = 0; i < 4; ++i) {
      double mean = 0.0;
      for (Eigen::Index c = 0; c < 6; ++c) mean += s(i, c);
      mean /= 6.0;
      CHECK(r.raw[i] == Catch::Approx(beta * s(i, 5) + (1 - beta) * mean).epsilon(1e-12));
    }
  }
  SECTION("beta outside [0,1] is rejected") {
    CHECK_THROWS_AS(predict_ema(s, -0.1), Error);
    CHECK_THROWS_AS(predict_ema(s, 1.1), Error);
  }
}

TEST_CASE("per-coordinate OLS matches an independent line fit") {
  Mat s = random_states(3, 7, 5);
  ForecastResult r = predict_ols(s);
  const Eigen::Index n = 7;
  for (Eigen::Index i = 0; i < 3; ++i) {
    // classic normal-equation slope/intercept over t = 1..n
    double st = 0.0, sx = 0.0, stt = 0.0, stx = 0.0;
    for (Eigen::Index t = 1; t <= n; ++t) {
      st += static_cast<double>(t);
      sx += s(i, t - 1);
      stt += static_cast<double>(t) * static_cast<double>(t);
      stx += static_cast<double>(t) * s(i, t - 1);
    }
    const double nn = static_cast<double>(n);
    const double slope = (nn * stx - st * sx) / (nn * stt - st * st);
    const double intercept = (sx - slope * st) / nn;
    const double expect = intercept + slope * (nn + 1.0);
    CHECK(r.raw[i] == Catch::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("OLS equals the linear trend at exactly two states") {
  // On dyadic-grid inputs both arrangements are exact, so the identity holds
  // to the bit.
  Mat s = random_states(8, 2, 6, /*grid=*/true);
  ForecastResult ols = predict_ols(s);
  ForecastResult trend = predict_linear_trend(s);
  for (Eigen::Index i = 0; i < 8; ++i) REQUIRE(ols.raw[i] == trend.raw[i]);
}

TEST_CASE("raw-space loss and gradient are consistent") {
  Rng rng(7, stream_of("loss-test"));
  Vec raw = rng.normal_vec(5, 1.0);
  Vec target = rng.unit_vec(5);
  const double lambda = 0.01;

  SECTION("value matches a hand computation") {
    const double cos = raw.dot(target) / (raw.norm() * target.norm());
    const double expect = 1.0 - cos + lambda * (raw - target).squaredNorm();
    CHECK(loss_on_raw(raw, target, lambda) == Catch::Approx(expect).epsilon(1e-12));
  }
  SECTION("gradient matches central differences") {
    Vec grad = loss_grad_on_raw(raw, target, lambda);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < raw.size(); ++i) {
      Vec plus = raw, minus = raw;
      plus[i] += h;
      minus[i] -= h;
      const double fd =
          (loss_on_raw(plus, target, lambda) - loss_on_raw(minus, target, lambda)) /
          (2.0 * h);
      CHECK(grad[i] == Catch::Approx(fd).margin(1e-7));
    }
  }
  SECTION("zero raw vector is guarded") {
    Vec zero = Vec::Zero(5);
    CHECK(std::isfinite(loss_on_raw(zero, target, lambda)));
    Vec g = loss_grad_on_raw(zero, target, lambda);
    CHECK(g.allFinite());
  }
}

TEST_CASE("attention and GRU gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    CHECK(gradient_check(Arch::P3_attention, seed) < 1e-4);
    CHECK(gradient_check(Arch::P4_gru, seed) < 1e-4);
  }
}

TEST_CASE("trained predictors are deterministic and checkpointable") {
  // tiny synthetic pairs: states drift along a fixed direction
  const Eigen::Index d = 6;
  Rng rng(11, stream_of("train-fixture"));
  Vec g = 0.1 * rng.unit_vec(d);
  std::vector<StatePair> train, val;
  for (int u = 0; u < 24; ++u) {
    Vec base = rng.unit_vec(d);
    Mat prefix(d, 4);
    for (int t = 0; t < 4; ++t)
      prefix.col(t) = (base + static_cast<double>(t) * g + rng.normal_vec(d, 0.02))
                          .normalized();
    StatePair p;
    p.prefix = prefix;
    p.target = (base + 4.0 * g).normalized();
    (u < 18 ? train : val).push_back(std::move(p));
  }

  PredictorHyper hyper;
  hyper.hidden = 16;
  hyper.attn_hidden = 16;
  hyper.epochs = 3;
  hyper.batch_size = 8;
  hyper.seed = 3;

  PredictorModel m1 = train_predictor(train, val, Arch::P4_gru, d, hyper);
  PredictorModel m2 = train_predictor(train, val, Arch::P4_gru, d, hyper);

  REQUIRE(m1.log.size() == m2.log.size());
  for (std::size_t e = 0; e < m1.log.size(); ++e) {
    CHECK(m1.log[e].train_loss == m2.log[e].train_loss);
    CHECK(m1.log[e].val_loss == m2.log[e].val_loss);
  }
  CHECK(m1.best_epoch == m2.best_epoch);

  // identical predictions, bit for bit
  ForecastResult r1 = predict(m1, train[0].prefix);
  ForecastResult r2 = predict(m2, train[0].prefix);
  for (Eigen::Index i = 0; i < d; ++i) REQUIRE(r1.raw[i] == r2.raw[i]);

  SECTION("checkpoint round-trip preserves predictions") {
    const std::string path = tmp_path("p4.bin");
    save_predictor(m1, path);
    PredictorModel loaded = load_predictor(path);
    CHECK(loaded.arch == Arch::P4_gru);
    CHECK(loaded.d == d);
    CHECK(loaded.best_epoch == m1.best_epoch);
    ForecastResult r3 = predict(loaded, train[0].prefix);
    for (Eigen::Index i = 0; i < d; ++i) REQUIRE(r3.raw[i] == r1.raw[i]);
  }
  SECTION("different seed gives different parameters") {
    PredictorHyper other = hyper;
    other.seed = 4;
    PredictorModel m3 = train_predictor(train, val, Arch::P4_gru, d, other);
    ForecastResult r3 = predict(m3, train[0].prefix);
    CHECK((r3.raw - r1.raw).norm() > 0.0);
  }
  SECTION("attention arch trains and dispatches too") {
    PredictorModel ma = train_predictor(train, val, Arch::P3_attention, d, hyper);
    ForecastResult ra = predict(ma, train[0].prefix);
    CHECK(ra.normalized.norm() == Catch::Approx(1.0).epsilon(1e-12));
  }
  SECTION("closed-form archs refuse gradient training") {
    CHECK_THROWS_AS(train_predictor(train, val, Arch::P0_last, d, hyper), Error);
  }
}

TEST_CASE("closed-form checkpoints reconstruct the right predictor") {
  PredictorModel model;
  model.arch = Arch::P2_ema;
  model.d = 4;
  model.hyper.ema_beta = 0.25;
  const std::string path = tmp_path("p2.bin");
  save_predictor(model, path);

  PredictorModel loaded = load_predictor(path);
  CHECK(loaded.arch == Arch::P2_ema);
  CHECK(loaded.hyper.ema_beta == 0.25);

  Mat s = random_states(4, 5, 12);
  ForecastResult via_model = predict(loaded, s);
  ForecastResult direct = predict_ema(s, 0.25);
  for (Eigen::Index i = 0; i < 4; ++i) CHECK(via_model.raw[i] == direct.raw[i]);
}

TEST_CASE("profile baselines aggregate history as documented") {
  const Eigen::Index d = 4;
  std::vector<Vec> embs;
  std::vector<std::int64_t> times;
  Rng rng(13, stream_of("baseline-test"));
  for (int k = 0; k < 6; ++k) {
    embs.push_back(rng.unit_vec(d));
    times.push_back(100 + 10 * k);
  }

  SECTION("static profile is the normalized mean") {
    UnitVec u = static_profile(embs);
    Vec sum = Vec::Zero(d);
    for (const Vec& e : embs) sum += e;
    CHECK((u.v - sum.normalized()).norm() < 1e-12);
    CHECK_FALSE(u.degenerate);
  }
  SECTION("recent profile uses only the last k") {
    UnitVec u = recent_profile(embs, 2);
    Vec sum = embs[4] + embs[5];
    CHECK((u.v - sum.normalized()).norm() < 1e-12);
  }
  SECTION("recent profile with k larger than history equals static") {
    UnitVec a = recent_profile(embs, 100);
    UnitVec b = static_profile(embs);
    CHECK((a.v - b.v).norm() == 0.0);
  }
  SECTION("time-decayed profile weights by half-life") {
    const double half_life = 20.0;
    UnitVec u = time_decayed_profile(embs, times, half_life);
    Vec sum = Vec::Zero(d);
    const std::int64_t now = times.back();
    for (std::size_t k = 0; k < embs.size(); ++k) {
      const double age = static_cast<double>(now - times[k]);
      sum += std::pow(0.5, age / half_life) * embs[k];
    }
    CHECK((u.v - sum.normalized()).norm() < 1e-10);
  }
  SECTION("empty history is rejected") {
    CHECK_THROWS_AS(static_profile({}), Error);
    CHECK_THROWS_AS(recent_profile({}, 3), Error);
    CHECK_THROWS_AS(recent_profile(embs, 0), Error);
  }
  SECTION("DEP-style profile averages trajectory states") {
    Trajectory traj;
    traj.user_id = "u";
    for (int k = 0; k < 3; ++k) {
      RelativeState s;
      s.vector = rng.unit_vec(d);
      s.residual_norm = 1.0;
      s.session_pos = static_cast<std::size_t>(k);
      traj.states.push_back(std::move(s));
    }
    UnitVec u = dep_style_profile(traj);
    Vec sum = Vec::Zero(d);
    for (const auto& s : traj.states) sum += s.vector;
    CHECK((u.v - sum.normalized()).norm() < 1e-12);
  }
}

TEST_CASE("forecast normalization flags degenerate raw outputs") {
  Mat s(3, 2);
  s.col(0) << 1.0, 0.0, 0.0;
  s.col(1) << 0.5, 0.0, 0.0;
  // trend = 2*(0.5,0,0) - (1,0,0) = 0 -> degenerate
  ForecastResult r = predict_linear_trend(s);
  CHECK(r.degenerate);
  CHECK(r.raw.norm() == 0.0);
}
