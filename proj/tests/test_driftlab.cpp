#include "latte/driftlab.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace latte;

TEST_CASE("grid snapping is exact and idempotent") {
  SECTION("snapped values are dyadic rationals") {
    const double x = snap_to_grid(0.3);
    CHECK(x == 314573.0 / 1048576.0);
    CHECK(snap_to_grid(x) == x);
  }
  SECTION("grid multiples pass through unchanged") {
    CHECK(snap_to_grid(0.5) == 0.5);
    CHECK(snap_to_grid(-0.25) == -0.25);
    CHECK(snap_to_grid(0.0) == 0.0);
    CHECK(snap_to_grid(3.0) == 3.0);
  }
  SECTION("vector version snaps every coordinate") {
    Vec v(3);
    v << 0.3, -1.7, 0.5;
    Vec s = snap_to_grid(v);
    CHECK(s[0] == snap_to_grid(0.3));
    CHECK(s[1] == snap_to_grid(-1.7));
    CHECK(s[2] == 0.5);
  }
}

TEST_CASE("deterministic direction vectors for sweep configuration") {
  Vec a = directed_vec(6, 0.25, 3, "axis");
  CHECK(a.norm() == Catch::Approx(0.25).epsilon(1e-12));
  Vec b = directed_vec(6, 0.25, 3, "axis");
  CHECK((a - b).norm() == 0.0);
  Vec c = directed_vec(6, 0.25, 4, "axis");
  CHECK((a - c).norm() > 0.0);
  CHECK(directed_vec(6, 0.0, 3, "axis").norm() == 0.0);
}

TEST_CASE("residual oracle validates the additive model") {
  AdditiveModelConfig cfg;
  cfg.trials = 20000;
  cfg.seed = 2;

  SECTION("conditioned run passes with simplex weights") {
    OracleReport r = verify_anchoring(cfg);
    CHECK(r.pass);
    CHECK(r.estimator == "anchored_residual");
    CHECK(r.trials == cfg.trials);
    CHECK(r.details.at("mean_ok").get<bool>());
    CHECK(r.details.at("variance_ok").get<bool>());
    const double wsq = r.details.at("weight_sq_sum").get<double>();
    CHECK(r.analytic_var_trace ==
          Catch::Approx(cfg.d * cfg.noise_var * (1.0 + wsq)).epsilon(1e-12));
  }
  SECTION("noise-free cancellation is bit-exact") {
    cfg.noise_var = 0.0;
    cfg.trials = 500;
    OracleReport r = verify_anchoring(cfg);
    CHECK(r.pass);
    CHECK(r.details.at("max_abs_deviation_from_analytic_mean").get<double>() == 0.0);
    CHECK(r.tolerance_note.find("sigma=0") != std::string::npos);
  }
  SECTION("uniform weights change the variance prediction") {
    cfg.weights = WeightSpec::uniform;
    OracleReport r = verify_anchoring(cfg);
    CHECK(r.pass);
    CHECK(r.details.at("weight_sq_sum").get<double>() ==
          Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  }
  SECTION("unconditioned mode is informational only") {
    cfg.trials = 2000;
    OracleReport r = verify_anchoring(cfg, /*conditioned=*/false);
    CHECK(r.pass);  // never gated
    CHECK(r.estimator == "anchored_residual_unconditioned");
  }
}

TEST_CASE("closed-form forecast risk at the reference configuration") {
  DriftModelConfig cfg;
  cfg.d = 4;
  cfg.T = 10;
  cfg.sigma2 = 0.04;
  cfg.g = directed_vec(4, 0.1, 1, "ref-drift");  // ||g||^2 = 0.01
  cfg.a = directed_vec(4, 1.0, 1, "ref-base");

  SECTION("static average: squared bias plus averaged noise") {
    const auto [b2, vt] = analytic_mse(DriftEstimator::static_average, cfg);
    CHECK(b2 == Catch::Approx(0.25).epsilon(1e-10));
    CHECK(vt == Catch::Approx(4.0 * 0.04 / 9.0).epsilon(1e-12));
    CHECK(b2 + vt == Catch::Approx(0.2677778).epsilon(1e-6));
  }
  SECTION("last state: one-step drift bias plus full noise") {
    const auto [b2, vt] = analytic_mse(DriftEstimator::last_state, cfg);
    CHECK(b2 == Catch::Approx(0.01).epsilon(1e-10));
    CHECK(vt == Catch::Approx(0.16).epsilon(1e-12));
    CHECK(b2 + vt == Catch::Approx(0.17).epsilon(1e-10));
  }
  SECTION("line fit: unbiased, inflated variance") {
    const auto [b2, vt] = analytic_mse(DriftEstimator::ols, cfg);
    CHECK(b2 == 0.0);
    // var = d sigma^2 (1/(T-1) + (T - T/2)^2 / s_tt), s_tt = 9*10*8/12 = 60
    CHECK(vt == Catch::Approx(0.16 * (1.0 / 9.0 + 25.0 / 60.0)).epsilon(1e-12));
  }
  SECTION("zero drift removes all bias terms") {
    cfg.g = Vec();
    CHECK(analytic_mse(DriftEstimator::static_average, cfg).first == 0.0);
    CHECK(analytic_mse(DriftEstimator::last_state, cfg).first == 0.0);
  }
}

TEST_CASE("drift trial generator") {
  DriftModelConfig cfg;
  cfg.d = 3;
  cfg.T = 6;
  cfg.sigma2 = 0.01;
  cfg.a = directed_vec(3, 1.0, 5, "gen-base");
  cfg.g = directed_vec(3, 0.2, 5, "gen-drift");
  cfg.seed = 9;

  SECTION("shape and target mean") {
    DriftSample s = gen_drift_trial(cfg, 0);
    CHECK(s.states.rows() == 3);
    CHECK(s.states.cols() == 5);  // T - 1 observed states
    CHECK((s.mu_T - (cfg.base() + 6.0 * cfg.drift())).norm() == 0.0);
  }
  SECTION("same trial index reproduces the same bits") {
    DriftSample s1 = gen_drift_trial(cfg, 7);
    DriftSample s2 = gen_drift_trial(cfg, 7);
    CHECK((s1.states - s2.states).norm() == 0.0);
    DriftSample s3 = gen_drift_trial(cfg, 8);
    CHECK((s1.states - s3.states).norm() > 0.0);
  }
  SECTION("noise-free trials lie exactly on the drift line") {
    cfg.sigma2 = 0.0;
    DriftSample s = gen_drift_trial(cfg, 0);
    for (int t = 1; t <= 5; ++t) {
      Vec expect = cfg.base() + static_cast<double>(t) * cfg.drift();
      CHECK((s.states.col(t - 1) - expect).norm() == 0.0);
    }
  }
  SECTION("gen_linear_drift batches trials") {
    cfg.trials = 4;
    auto all = gen_linear_drift(cfg);
    REQUIRE(all.size() == 4);
    CHECK((all[2].states - gen_drift_trial(cfg, 2).states).norm() == 0.0);
  }
}

TEST_CASE("monte carlo risk matches the closed forms") {
  DriftModelConfig cfg;
  cfg.d = 4;
  cfg.T = 10;
  cfg.sigma2 = 0.04;
  cfg.a = directed_vec(4, 1.0, 11, "mc-base");
  cfg.g = directed_vec(4, 0.1, 11, "mc-drift");

  const std::uint64_t trials = 2000;  // tolerance auto-widens below 1e4
  OracleReport rs = monte_carlo_mse(DriftEstimator::static_average, cfg, trials, 3);
  CHECK(rs.pass);
  CHECK(rs.empirical_mse == Catch::Approx(0.2677778).margin(0.03));

  OracleReport rl = monte_carlo_mse(DriftEstimator::last_state, cfg, trials, 3);
  CHECK(rl.pass);
  CHECK(rl.empirical_mse == Catch::Approx(0.17).margin(0.02));

  OracleReport ro = monte_carlo_mse(DriftEstimator::ols, cfg, trials, 3);
  CHECK(ro.pass);
  CHECK(ro.details.at("bias_ok").get<bool>());
  CHECK(ro.empirical_bias_norm < 3.0 * std::sqrt([&] {
          double s = 0.0;
          for (double x : ro.bias_standard_errors) s += x * x;
          return s;
        }()));

  SECTION("noise-free runs demand near-zero error") {
    cfg.sigma2 = 0.0;
    OracleReport r = monte_carlo_mse(DriftEstimator::ols, cfg, 50, 3);
    CHECK(r.pass);
    CHECK(r.empirical_mse <= 1e-20);
  }
}

TEST_CASE("crossover sweep agrees with the analytic winner") {
  SweepResult r = crossover_sweep({0.0, 0.4}, {0.05, 0.4}, 10, 4, 2000, 17);
  REQUIRE(r.cells.size() == 4);

  // g = 0: the average always wins; strong drift with tiny noise: last wins
  CHECK(r.cells[0].analytic_winner == "static");  // g=0, sigma=0.05
  CHECK(r.cells[1].analytic_winner == "static");  // g=0, sigma=0.4
  CHECK(r.cells[2].analytic_winner == "last");    // g=0.4, sigma=0.05
  CHECK(r.cells[3].analytic_winner == "last");    // g=0.4, sigma=0.4
  CHECK(r.agreement == 1.0);
  for (const auto& c : r.cells) CHECK(c.agree);

  SECTION("csv is one header plus one line per cell") {
    const std::string csv = r.csv();
    CHECK(csv.rfind("g_norm,sigma,", 0) == 0);
    std::size_t lines = 0, at = 0;
    while ((at = csv.find('\n', at)) != std::string::npos) {
      ++lines;
      ++at;
    }
    CHECK(lines == 5);
    CHECK(csv.find("static") != std::string::npos);
    CHECK(csv.find("last") != std::string::npos);
  }
}

TEST_CASE("estimator dispatch matches direct computations") {
  Rng rng(23, stream_of("estimate-raw"));
  Mat states(3, 5);
  for (Eigen::Index c = 0; c < 5; ++c) states.col(c) = rng.unit_vec(3);

  Vec last = estimate_raw(DriftEstimator::last_state, states);
  CHECK((last - states.col(4)).norm() == 0.0);

  Vec avg = estimate_raw(DriftEstimator::static_average, states);
  for (Eigen::Index i = 0; i < 3; ++i) {
    double m = 0.0;
    for (Eigen::Index c = 0; c < 5; ++c) m += states(i, c);
    CHECK(avg[i] == Catch::Approx(m / 5.0).epsilon(1e-12));
  }
}
