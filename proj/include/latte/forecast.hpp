#pragma once

// Next-state forecasting over relative-preference trajectories.
//
// Closed forms (parameter-free):
//   P0  last state                     raw = x_{n}
//   P1  linear trend                   raw = 2 x_n - x_{n-1}
//   P2  exponential moving average     raw = beta x_n + (1-beta) mean(x)
//   OLS per-coordinate least squares line over t = 1..n evaluated at t = n+1
//
// Learned (trained with the decoupled regression loss below):
//   P3  attention pooling with the last state as query, output normalized
//   P4  one-layer GRU + linear head, raw output unnormalized
//
// Loss on a raw forecast r against a unit target p:
//   loss = 1 - cos(r, p) + lambda * ||r - p||^2
//
// All math is f64. Training is bit-deterministic for a fixed seed: data order
// comes from our own Rng, batch gradients are reduced over a fixed chunk
// grid, and no std:: distribution is involved anywhere.

#include "latte/anchor.hpp"
#include "latte/core.hpp"
#include "latte/optim.hpp"
#include "latte/params.hpp"
#include "latte/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace latte {

enum class Arch { P0_last, P1_trend, P2_ema, P3_attention, P4_gru, OLS };

inline std::string arch_tag(Arch arch) {
  switch (arch) {
    case Arch::P0_last: return "P0";
    case Arch::P1_trend: return "P1";
    case Arch::P2_ema: return "P2";
    case Arch::P3_attention: return "P3";
    case Arch::P4_gru: return "P4";
    case Arch::OLS: return "OLS";
  }
  throw Error::internal("unreachable arch");
}

inline Arch parse_arch(const std::string& tag) {
  if (tag == "P0") return Arch::P0_last;
  if (tag == "P1") return Arch::P1_trend;
  if (tag == "P2") return Arch::P2_ema;
  if (tag == "P3") return Arch::P3_attention;
  if (tag == "P4") return Arch::P4_gru;
  if (tag == "OLS") return Arch::OLS;
  throw Error::validation("unknown predictor arch '" + tag + "'");
}

struct ForecastResult {
  Vec raw;
  Vec normalized;
  Arch arch = Arch::P0_last;
  std::size_t input_len = 0;
  bool degenerate = false;  // raw norm under eps; normalized is zero then
};

inline ForecastResult make_result(Vec raw, Arch arch, std::size_t input_len,
                                  double eps = 1e-12) {
  ForecastResult r;
  r.arch = arch;
  r.input_len = input_len;
  const double norm = raw.norm();
  if (norm > eps) {
    r.normalized = raw / norm;
  } else {
    r.normalized = Vec::Zero(raw.size());
    r.degenerate = true;
  }
  r.raw = std::move(raw);
  return r;
}

// States as a d x n matrix, columns in chronological order.
inline Mat state_matrix(const Trajectory& traj) {
  if (traj.empty()) throw Error::validation("empty trajectory");
  const auto d = traj.states.front().vector.size();
  Mat m(d, static_cast<Eigen::Index>(traj.states.size()));
  for (std::size_t i = 0; i < traj.states.size(); ++i) {
    if (traj.states[i].vector.size() != d)
      throw Error::validation("trajectory states disagree on dim");
    m.col(static_cast<Eigen::Index>(i)) = traj.states[i].vector;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Closed forms.

inline ForecastResult predict_last(const Mat& states) {
  if (states.cols() < 1) throw Error::validation("predict_last needs >= 1 state");
  return make_result(states.col(states.cols() - 1), Arch::P0_last,
                     static_cast<std::size_t>(states.cols()));
}

inline ForecastResult predict_linear_trend(const Mat& states) {
  if (states.cols() < 2) throw Error::validation("predict_linear_trend needs >= 2 states");
  const auto n = states.cols();
  Vec raw = 2.0 * states.col(n - 1) - states.col(n - 2);
  return make_result(std::move(raw), Arch::P1_trend, static_cast<std::size_t>(n));
}

inline ForecastResult predict_ema(const Mat& states, double beta) {
  if (states.cols() < 1) throw Error::validation("predict_ema needs >= 1 state");
  if (beta < 0.0 || beta > 1.0)
    throw Error::validation("ema beta must lie in [0, 1]");
  const auto n = states.cols();
  Vec mean = states.rowwise().mean();
  Vec raw = beta * states.col(n - 1) + (1.0 - beta) * mean;
  return make_result(std::move(raw), Arch::P2_ema, static_cast<std::size_t>(n));
}

// Per-coordinate line fit over regressors t = 1..n, evaluated at t = n+1.
inline ForecastResult predict_ols(const Mat& states) {
  const auto n = states.cols();
  if (n < 2) throw Error::validation("predict_ols needs >= 2 states");
  const double nn = static_cast<double>(n);
  const double t_mean = (nn + 1.0) / 2.0;
  double s_tt = 0.0;
  for (Eigen::Index t = 1; t <= n; ++t) {
    const double dt = static_cast<double>(t) - t_mean;
    s_tt += dt * dt;
  }
  Vec x_mean = states.rowwise().mean();
  Vec s_tx = Vec::Zero(states.rows());
  for (Eigen::Index t = 1; t <= n; ++t)
    s_tx += (static_cast<double>(t) - t_mean) * (states.col(t - 1) - x_mean);
  Vec slope = s_tx / s_tt;
  Vec raw = x_mean + slope * (nn + 1.0 - t_mean);
  return make_result(std::move(raw), Arch::OLS, static_cast<std::size_t>(n));
}

inline ForecastResult predict_last(const Trajectory& t) { return predict_last(state_matrix(t)); }
inline ForecastResult predict_linear_trend(const Trajectory& t) {
  return predict_linear_trend(state_matrix(t));
}
inline ForecastResult predict_ema(const Trajectory& t, double beta) {
  return predict_ema(state_matrix(t), beta);
}
inline ForecastResult predict_ols(const Trajectory& t) { return predict_ols(state_matrix(t)); }

// ---------------------------------------------------------------------------
// Loss.

inline double loss_on_raw(const Vec& raw, const Vec& target, double lambda,
                          double eps = 1e-12) {
  const double denom = raw.norm() * target.norm();
  const double cos = denom > eps ? raw.dot(target) / denom : 0.0;
  return 1.0 - cos + lambda * (raw - target).squaredNorm();
}

// d loss / d raw. The cosine gradient vanishes when the denominator is under
// the guard (same convention as the loss).
inline Vec loss_grad_on_raw(const Vec& raw, const Vec& target, double lambda,
                            double eps = 1e-12) {
  Vec grad = 2.0 * lambda * (raw - target);
  const double rn = raw.norm();
  const double tn = target.norm();
  if (rn * tn > eps) {
    const double dot = raw.dot(target);
    grad -= target / (rn * tn);
    grad += (dot / (rn * rn * rn * tn)) * raw;
  }
  return grad;
}

inline double predictor_loss(const ForecastResult& pred, const Vec& target,
                             double lambda = 0.01) {
  if (pred.raw.size() != target.size())
    throw Error::validation("predictor_loss: dimension mismatch");
  return loss_on_raw(pred.raw, target, lambda);
}

// ---------------------------------------------------------------------------
// Hyperparameters shared by the learned predictors.

struct PredictorHyper {
  double ema_beta = 0.5;
  int hidden = 512;       // GRU hidden width
  int attn_hidden = 256;  // attention score width
  double lambda = 0.01;
  double learning_rate = 3e-4;
  int epochs = 15;
  int batch_size = 256;
  std::uint64_t seed = 7;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;

  nlohmann::json to_json() const {
    return {{"ema_beta", ema_beta},       {"hidden", hidden},
            {"attn_hidden", attn_hidden}, {"lambda", lambda},
            {"learning_rate", learning_rate}, {"epochs", epochs},
            {"batch_size", batch_size},   {"seed", seed},
            {"beta1", beta1},             {"beta2", beta2},
            {"adam_eps", adam_eps},       {"weight_decay", weight_decay}};
  }

  static PredictorHyper from_json(const nlohmann::json& j) {
    PredictorHyper h;
    h.ema_beta = j.value("ema_beta", h.ema_beta);
    h.hidden = j.value("hidden", h.hidden);
    h.attn_hidden = j.value("attn_hidden", h.attn_hidden);
    h.lambda = j.value("lambda", h.lambda);
    h.learning_rate = j.value("learning_rate", h.learning_rate);
    h.epochs = j.value("epochs", h.epochs);
    h.batch_size = j.value("batch_size", h.batch_size);
    h.seed = j.value("seed", h.seed);
    h.beta1 = j.value("beta1", h.beta1);
    h.beta2 = j.value("beta2", h.beta2);
    h.adam_eps = j.value("adam_eps", h.adam_eps);
    h.weight_decay = j.value("weight_decay", h.weight_decay);
    return h;
  }
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_cosine = std::numeric_limits<double>::quiet_NaN();
};

struct PredictorModel {
  Arch arch = Arch::P0_last;
  Eigen::Index d = 0;
  PredictorHyper hyper;
  ParamBlock params;  // empty for P0/P1/P2/OLS
  std::vector<EpochLog> log;
  int best_epoch = -1;
};

// ---------------------------------------------------------------------------
// P3: attention pooling.
//   score_t = v_a . tanh(W_h x_t + W_q q + b_a),  q = x_n
//   alpha   = softmax(score)
//   raw     = normalize(W_o [sum_t alpha_t x_t ; q])
// Sections (fan_in in parens): W_h (d), W_q (d), b_a (0), v_a (H), W_o (2d).

class AttentionPredictor {
 public:
  AttentionPredictor(Eigen::Index d, Eigen::Index hidden) : d_(d), h_(hidden) {
    i_wh_ = block_.add("W_h", h_, d_, d_);
    i_wq_ = block_.add("W_q", h_, d_, d_);
    i_ba_ = block_.add("b_a", h_, 1, 0);
    i_va_ = block_.add("v_a", h_, 1, h_);
    i_wo_ = block_.add("W_o", d_, 2 * d_, 2 * d_);
  }

  void init(std::uint64_t seed) { block_.init(seed, "P3"); }

  ParamBlock& params() { return block_; }
  const ParamBlock& params() const { return block_; }

  ForecastResult forward(const Mat& states) const {
    Cache cache;
    Vec y = forward_internal(states, cache);
    return make_result(std::move(y), Arch::P3_attention,
                       static_cast<std::size_t>(states.cols()));
  }

  // Adds d loss / d params into grad (laid out like params().flat); returns
  // the loss. The result raw output is the normalized projection, so the
  // normalization is part of the backward pass.
  double loss_and_grad(const Mat& states, const Vec& target, double lambda,
                       Vec& grad) const {
    Cache c;
    Vec y_hat = forward_internal(states, c);
    const double loss = loss_on_raw(y_hat, target, lambda);

    Vec d_yhat = loss_grad_on_raw(y_hat, target, lambda);
    // y_hat = y / ||y||  =>  d_y = (I - y_hat y_hat^T) d_yhat / ||y||
    Vec d_y = c.y_norm > 1e-12
                  ? Vec(((d_yhat - y_hat * y_hat.dot(d_yhat)) / c.y_norm))
                  : d_yhat;

    auto v_a = block_.vec(i_va_);
    auto W_o = block_.mat(i_wo_);
    auto g_wh = block_.mat_in(grad, i_wh_);
    auto g_wq = block_.mat_in(grad, i_wq_);
    auto g_ba = block_.vec_in(grad, i_ba_);
    auto g_va = block_.vec_in(grad, i_va_);
    auto g_wo = block_.mat_in(grad, i_wo_);

    const auto n = states.cols();
    const Vec q = states.col(n - 1);

    g_wo += d_y * c.z.transpose();
    Vec d_z = W_o.transpose() * d_y;
    Vec d_ctx = d_z.head(d_);
    // (the tail of d_z is the query's direct path; inputs get no gradient)

    Vec d_alpha(n);
    for (Eigen::Index t = 0; t < n; ++t) d_alpha[t] = states.col(t).dot(d_ctx);
    const double mix = c.alpha.dot(d_alpha);
    Vec d_score = c.alpha.array() * (d_alpha.array() - mix);

    for (Eigen::Index t = 0; t < n; ++t) {
      const Vec u_t = c.u.col(t);
      g_va += d_score[t] * u_t;
      Vec d_a = (d_score[t] * v_a.array() * (1.0 - u_t.array().square())).matrix();
      g_wh += d_a * states.col(t).transpose();
      g_wq += d_a * q.transpose();
      g_ba += d_a;
    }
    return loss;
  }

 private:
  struct Cache {
    Mat u;       // h x n, tanh activations
    Vec alpha;   // n
    Vec z;       // 2d, [context; query]
    double y_norm = 0.0;
  };

  Vec forward_internal(const Mat& states, Cache& c) const {
    if (states.rows() != d_)
      throw Error::validation("attention predictor: state dim mismatch");
    if (states.cols() < 1)
      throw Error::validation("attention predictor needs >= 1 state");
    if (!block_.flat.allFinite())
      throw Error::internal("attention predictor params are not finite");
    auto W_h = block_.mat(i_wh_);
    auto W_q = block_.mat(i_wq_);
    auto b_a = block_.vec(i_ba_);
    auto v_a = block_.vec(i_va_);
    auto W_o = block_.mat(i_wo_);

    const auto n = states.cols();
    const Vec q = states.col(n - 1);
    const Vec query_term = W_q * q + b_a;

    c.u.resize(h_, n);
    Vec score(n);
    for (Eigen::Index t = 0; t < n; ++t) {
      c.u.col(t) = (W_h * states.col(t) + query_term).array().tanh();
      score[t] = v_a.dot(c.u.col(t));
    }
    const double m = score.maxCoeff();
    Vec expd = (score.array() - m).exp();
    c.alpha = expd / expd.sum();

    Vec context = Vec::Zero(d_);
    for (Eigen::Index t = 0; t < n; ++t) context += c.alpha[t] * states.col(t);
    c.z.resize(2 * d_);
    c.z << context, q;
    Vec y = W_o * c.z;
    c.y_norm = y.norm();
    if (c.y_norm > 1e-12) y /= c.y_norm;
    return y;
  }

  Eigen::Index d_, h_;
  ParamBlock block_;
  std::size_t i_wh_, i_wq_, i_ba_, i_va_, i_wo_;
};

// ---------------------------------------------------------------------------
// P4: one-layer GRU + linear head. Gates:
//   z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
//   r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
//   c_t = tanh(W_c x_t + U_c (r_t . h_{t-1}) + b_c)
//   h_t = (1 - z_t) . h_{t-1} + z_t . c_t
// raw = W_out h_n + b_out (left unnormalized by design).

class GruPredictor {
 public:
  GruPredictor(Eigen::Index d, Eigen::Index hidden) : d_(d), h_(hidden) {
    i_wz_ = block_.add("W_z", h_, d_, d_);
    i_uz_ = block_.add("U_z", h_, h_, h_);
    i_bz_ = block_.add("b_z", h_, 1, 0);
    i_wr_ = block_.add("W_r", h_, d_, d_);
    i_ur_ = block_.add("U_r", h_, h_, h_);
    i_br_ = block_.add("b_r", h_, 1, 0);
    i_wc_ = block_.add("W_c", h_, d_, d_);
    i_uc_ = block_.add("U_c", h_, h_, h_);
    i_bc_ = block_.add("b_c", h_, 1, 0);
    i_wo_ = block_.add("W_out", d_, h_, h_);
    i_bo_ = block_.add("b_out", d_, 1, 0);
  }

  void init(std::uint64_t seed) { block_.init(seed, "P4"); }

  ParamBlock& params() { return block_; }
  const ParamBlock& params() const { return block_; }

  ForecastResult forward(const Mat& states) const {
    Cache c;
    Vec y = forward_internal(states, c);
    return make_result(std::move(y), Arch::P4_gru,
                       static_cast<std::size_t>(states.cols()));
  }

  double loss_and_grad(const Mat& states, const Vec& target, double lambda,
                       Vec& grad) const {
    Cache c;
    Vec y = forward_internal(states, c);
    const double loss = loss_on_raw(y, target, lambda);
    Vec d_y = loss_grad_on_raw(y, target, lambda);

    auto U_z = block_.mat(i_uz_);
    auto U_r = block_.mat(i_ur_);
    auto U_c = block_.mat(i_uc_);
    auto W_out = block_.mat(i_wo_);
    auto g_wz = block_.mat_in(grad, i_wz_);
    auto g_uz = block_.mat_in(grad, i_uz_);
    auto g_bz = block_.vec_in(grad, i_bz_);
    auto g_wr = block_.mat_in(grad, i_wr_);
    auto g_ur = block_.mat_in(grad, i_ur_);
    auto g_br = block_.vec_in(grad, i_br_);
    auto g_wc = block_.mat_in(grad, i_wc_);
    auto g_uc = block_.mat_in(grad, i_uc_);
    auto g_bc = block_.vec_in(grad, i_bc_);
    auto g_wo = block_.mat_in(grad, i_wo_);
    auto g_bo = block_.vec_in(grad, i_bo_);

    const auto n = states.cols();
    g_wo += d_y * c.h.col(n).transpose();
    g_bo += d_y;
    Vec d_h = W_out.transpose() * d_y;

    for (Eigen::Index t = n - 1; t >= 0; --t) {
      const Vec h_prev = c.h.col(t);
      const Vec z_t = c.z.col(t);
      const Vec r_t = c.r.col(t);
      const Vec c_t = c.cand.col(t);
      const Vec x_t = states.col(t);

      Vec d_z = (d_h.array() * (c_t - h_prev).array()).matrix();
      Vec d_c = (d_h.array() * z_t.array()).matrix();
      Vec d_hprev = (d_h.array() * (1.0 - z_t.array())).matrix();

      Vec d_ac = (d_c.array() * (1.0 - c_t.array().square())).matrix();
      g_wc += d_ac * x_t.transpose();
      g_uc += d_ac * (r_t.array() * h_prev.array()).matrix().transpose();
      g_bc += d_ac;
      Vec back_c = U_c.transpose() * d_ac;
      Vec d_r = (back_c.array() * h_prev.array()).matrix();
      d_hprev += (back_c.array() * r_t.array()).matrix();

      Vec d_az = (d_z.array() * z_t.array() * (1.0 - z_t.array())).matrix();
      g_wz += d_az * x_t.transpose();
      g_uz += d_az * h_prev.transpose();
      g_bz += d_az;
      d_hprev += U_z.transpose() * d_az;

      Vec d_ar = (d_r.array() * r_t.array() * (1.0 - r_t.array())).matrix();
      g_wr += d_ar * x_t.transpose();
      g_ur += d_ar * h_prev.transpose();
      g_br += d_ar;
      d_hprev += U_r.transpose() * d_ar;

      d_h = std::move(d_hprev);
    }
    return loss;
  }

 private:
  struct Cache {
    Mat h;     // hidden states, h.col(t) = h_{t}, col(0) = h_0 = 0; h x (n+1)
    Mat z, r, cand;  // gate activations per step, h x n
  };

  static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

  Vec forward_internal(const Mat& states, Cache& c) const {
    if (states.rows() != d_) throw Error::validation("gru predictor: state dim mismatch");
    if (states.cols() < 1) throw Error::validation("gru predictor needs >= 1 state");
    if (!block_.flat.allFinite())
      throw Error::internal("gru predictor params are not finite");
    auto W_z = block_.mat(i_wz_);
    auto U_z = block_.mat(i_uz_);
    auto b_z = block_.vec(i_bz_);
    auto W_r = block_.mat(i_wr_);
    auto U_r = block_.mat(i_ur_);
    auto b_r = block_.vec(i_br_);
    auto W_c = block_.mat(i_wc_);
    auto U_c = block_.mat(i_uc_);
    auto b_c = block_.vec(i_bc_);
    auto W_out = block_.mat(i_wo_);
    auto b_out = block_.vec(i_bo_);

    const auto n = states.cols();
    c.h = Mat::Zero(h_, n + 1);
    c.z.resize(h_, n);
    c.r.resize(h_, n);
    c.cand.resize(h_, n);

    for (Eigen::Index t = 0; t < n; ++t) {
      const Vec h_prev = c.h.col(t);
      Vec a_z = W_z * states.col(t) + U_z * h_prev + b_z;
      Vec a_r = W_r * states.col(t) + U_r * h_prev + b_r;
      Vec z_t = a_z.unaryExpr([](double v) { return sigmoid(v); });
      Vec r_t = a_r.unaryExpr([](double v) { return sigmoid(v); });
      Vec a_c = W_c * states.col(t) + U_c * (r_t.array() * h_prev.array()).matrix() + b_c;
      Vec c_t = a_c.array().tanh();
      c.z.col(t) = z_t;
      c.r.col(t) = r_t;
      c.cand.col(t) = c_t;
      c.h.col(t + 1) =
          ((1.0 - z_t.array()) * h_prev.array() + z_t.array() * c_t.array()).matrix();
    }
    return W_out * c.h.col(n) + b_out;
  }

  Eigen::Index d_, h_;
  ParamBlock block_;
  std::size_t i_wz_, i_uz_, i_bz_, i_wr_, i_ur_, i_br_, i_wc_, i_uc_, i_bc_, i_wo_, i_bo_;
};

// ---------------------------------------------------------------------------
// Model-level dispatch.

inline AttentionPredictor attention_from(const PredictorModel& model) {
  AttentionPredictor net(model.d, model.hyper.attn_hidden);
  net.params().allocate();
  if (net.params().size() != model.params.size())
    throw Error::validation("P3 param layout mismatch");
  net.params().flat = model.params.flat;
  return net;
}

inline GruPredictor gru_from(const PredictorModel& model) {
  GruPredictor net(model.d, model.hyper.hidden);
  net.params().allocate();
  if (net.params().size() != model.params.size())
    throw Error::validation("P4 param layout mismatch");
  net.params().flat = model.params.flat;
  return net;
}

inline ForecastResult predict_attention(const PredictorModel& model, const Mat& states) {
  if (model.arch != Arch::P3_attention)
    throw Error::validation("predict_attention called with arch " + arch_tag(model.arch));
  return attention_from(model).forward(states);
}

inline ForecastResult predict_gru(const PredictorModel& model, const Mat& states) {
  if (model.arch != Arch::P4_gru)
    throw Error::validation("predict_gru called with arch " + arch_tag(model.arch));
  return gru_from(model).forward(states);
}

inline ForecastResult predict_attention(const PredictorModel& m, const Trajectory& t) {
  return predict_attention(m, state_matrix(t));
}
inline ForecastResult predict_gru(const PredictorModel& m, const Trajectory& t) {
  return predict_gru(m, state_matrix(t));
}

inline ForecastResult predict(const PredictorModel& model, const Mat& states) {
  switch (model.arch) {
    case Arch::P0_last: return predict_last(states);
    case Arch::P1_trend: return predict_linear_trend(states);
    case Arch::P2_ema: return predict_ema(states, model.hyper.ema_beta);
    case Arch::P3_attention: return predict_attention(model, states);
    case Arch::P4_gru: return predict_gru(model, states);
    case Arch::OLS: return predict_ols(states);
  }
  throw Error::internal("unreachable arch");
}

// ---------------------------------------------------------------------------
// Training.

struct StatePair {
  Mat prefix;  // d x L, L >= min_states
  Vec target;  // unit vector
};

namespace detail {

// Evaluates one example through whichever learned net is active.
template <typename Net>
double pair_loss_and_grad(const Net& net, const StatePair& pair, double lambda,
                          Vec& grad) {
  return net.loss_and_grad(pair.prefix, pair.target, lambda, grad);
}

template <typename Net>
void eval_pairs(const Net& net, const std::vector<StatePair>& pairs, double lambda,
                double& mean_loss, double& mean_cosine) {
  double loss_sum = 0.0;
  double cos_sum = 0.0;
  for (const auto& pair : pairs) {
    ForecastResult r = net.forward(pair.prefix);
    loss_sum += loss_on_raw(r.raw, pair.target, lambda);
    cos_sum += cosine(r.normalized, pair.target);
  }
  const double n = static_cast<double>(pairs.size());
  mean_loss = pairs.empty() ? std::numeric_limits<double>::quiet_NaN() : loss_sum / n;
  mean_cosine = pairs.empty() ? std::numeric_limits<double>::quiet_NaN() : cos_sum / n;
}

template <typename Net>
PredictorModel train_net(Net& net, Arch arch, Eigen::Index d,
                         const std::vector<StatePair>& train,
                         const std::vector<StatePair>& val,
                         const PredictorHyper& hyper) {
  net.init(hyper.seed);
  AdamW opt(net.params().size(),
            AdamWConfig{hyper.learning_rate, hyper.beta1, hyper.beta2, hyper.adam_eps,
                        hyper.weight_decay});
  Rng order_rng(hyper.seed, stream_of("batch-order"));

  PredictorModel model;
  model.arch = arch;
  model.d = d;
  model.hyper = hyper;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  // Per-batch gradients are accumulated over a fixed chunk grid so the sum is
  // identical for any LATTE_THREADS value.
  constexpr std::size_t kChunks = 8;
  std::vector<Vec> chunk_grad(kChunks);
  std::vector<double> chunk_loss(kChunks);

  Vec best_params = net.params().flat;
  double best_val = std::numeric_limits<double>::infinity();

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss_sum = 0.0;

    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(hyper.batch_size)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(hyper.batch_size));
      const std::size_t batch_n = end - begin;
      const std::size_t per_chunk = (batch_n + kChunks - 1) / kChunks;

      for (std::size_t ci = 0; ci < kChunks; ++ci) {
        chunk_grad[ci] = Vec::Zero(net.params().size());
        chunk_loss[ci] = 0.0;
      }
      parallel_for(kChunks, [&](std::size_t ci) {
        const std::size_t lo = begin + ci * per_chunk;
        const std::size_t hi = std::min(end, lo + per_chunk);
        for (std::size_t k = lo; k < hi && k < end; ++k)
          chunk_loss[ci] +=
              pair_loss_and_grad(net, train[order[k]], hyper.lambda, chunk_grad[ci]);
      });

      Vec grad = Vec::Zero(net.params().size());
      double batch_loss = 0.0;
      for (std::size_t ci = 0; ci < kChunks; ++ci) {
        grad += chunk_grad[ci];
        batch_loss += chunk_loss[ci];
      }
      grad /= static_cast<double>(batch_n);
      epoch_loss_sum += batch_loss;

      if (!std::isfinite(batch_loss) || !grad.allFinite())
        throw Error::internal(
            "non-finite loss/gradient during predictor training (arch " +
            arch_tag(arch) + ", epoch " + std::to_string(epoch) + ", batch at " +
            std::to_string(begin) + ", batch loss " + std::to_string(batch_loss) + ")");
      opt.step(net.params().flat, grad);
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = epoch_loss_sum / static_cast<double>(train.size());
    eval_pairs(net, val, hyper.lambda, log.val_loss, log.val_cosine);
    model.log.push_back(log);

    const double score = val.empty() ? log.train_loss : log.val_loss;
    if (score < best_val) {
      best_val = score;
      best_params = net.params().flat;
      model.best_epoch = epoch;
    }
  }

  net.params().flat = best_params;
  model.params = net.params();
  return model;
}

}  // namespace detail

inline PredictorModel train_predictor(const std::vector<StatePair>& train,
                                      const std::vector<StatePair>& val, Arch arch,
                                      Eigen::Index d, const PredictorHyper& hyper) {
  if (train.empty()) throw Error::validation("train_predictor: empty dataset");
  for (const auto& p : train)
    if (p.prefix.rows() != d || p.target.size() != d)
      throw Error::validation("train_predictor: pair dim mismatch");
  if (arch == Arch::P3_attention) {
    AttentionPredictor net(d, hyper.attn_hidden);
    return detail::train_net(net, arch, d, train, val, hyper);
  }
  if (arch == Arch::P4_gru) {
    GruPredictor net(d, hyper.hidden);
    return detail::train_net(net, arch, d, train, val, hyper);
  }
  throw Error::validation("train_predictor supports P3 and P4 only, got " + arch_tag(arch));
}

// ---------------------------------------------------------------------------
// Finite-difference gradient validation on a small random instance.

inline double gradient_check(Arch arch, std::uint64_t seed, double eps = 1e-4) {
  const Eigen::Index d = 8;
  const Eigen::Index hidden = 8;
  const Eigen::Index len = 4;
  const double lambda = 0.01;

  Rng rng(seed, stream_of("gradient-check"));
  Mat states(d, len);
  for (Eigen::Index t = 0; t < len; ++t) states.col(t) = rng.unit_vec(d);
  const Vec target = rng.unit_vec(d);

  auto run = [&](auto& net) {
    net.init(seed);
    Vec analytic = Vec::Zero(net.params().size());
    net.loss_and_grad(states, target, lambda, analytic);

    double max_rel = 0.0;
    Vec& theta = net.params().flat;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      const double keep = theta[i];
      theta[i] = keep + eps;
      Vec scratch = Vec::Zero(theta.size());
      const double up = net.loss_and_grad(states, target, lambda, scratch);
      theta[i] = keep - eps;
      scratch.setZero();
      const double down = net.loss_and_grad(states, target, lambda, scratch);
      theta[i] = keep;
      const double fd = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(fd), 1e-6});
      max_rel = std::max(max_rel, std::abs(analytic[i] - fd) / denom);
    }
    return max_rel;
  };

  if (arch == Arch::P3_attention) {
    AttentionPredictor net(d, hidden);
    return run(net);
  }
  if (arch == Arch::P4_gru) {
    GruPredictor net(d, hidden);
    return run(net);
  }
  throw Error::validation("gradient_check supports P3 and P4 only");
}

// ---------------------------------------------------------------------------
// Latent-profile baselines.

inline UnitVec static_profile(const std::vector<Vec>& embeddings) {
  if (embeddings.empty()) throw Error::validation("static_profile: empty history");
  Vec sum = Vec::Zero(embeddings.front().size());
  for (const auto& e : embeddings) sum += e;
  return normalized(sum / static_cast<double>(embeddings.size()));
}

inline UnitVec recent_profile(const std::vector<Vec>& embeddings, std::size_t k = 8) {
  if (embeddings.empty()) throw Error::validation("recent_profile: empty history");
  if (k == 0) throw Error::validation("recent_profile: k must be positive");
  const std::size_t take = std::min(k, embeddings.size());
  Vec sum = Vec::Zero(embeddings.front().size());
  for (std::size_t i = embeddings.size() - take; i < embeddings.size(); ++i)
    sum += embeddings[i];
  return normalized(sum / static_cast<double>(take));
}

inline UnitVec time_decayed_profile(const std::vector<Vec>& embeddings,
                                    const std::vector<std::int64_t>& timestamps,
                                    double half_life_seconds) {
  if (embeddings.empty()) throw Error::validation("time_decayed_profile: empty history");
  if (embeddings.size() != timestamps.size())
    throw Error::validation("time_decayed_profile: length mismatch");
  if (!(half_life_seconds > 0.0))
    throw Error::validation("time_decayed_profile: half life must be positive");
  const std::int64_t latest = *std::max_element(timestamps.begin(), timestamps.end());
  Vec sum = Vec::Zero(embeddings.front().size());
  double weight_sum = 0.0;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    const double age = static_cast<double>(latest - timestamps[i]);
    const double w = std::exp2(-age / half_life_seconds);
    sum += w * embeddings[i];
    weight_sum += w;
  }
  return normalized(sum / weight_sum);
}

inline UnitVec dep_style_profile(const Trajectory& traj) {
  if (traj.empty()) throw Error::validation("dep_style_profile: empty trajectory");
  Vec sum = Vec::Zero(traj.states.front().vector.size());
  for (const auto& s : traj.states) sum += s.vector;
  return normalized(sum / static_cast<double>(traj.states.size()));
}

// ---------------------------------------------------------------------------
// Checkpoint round-trip.

inline void save_predictor(const PredictorModel& model, const std::string& path) {
  nlohmann::json hyper = model.hyper.to_json();
  hyper["d"] = model.d;
  hyper["best_epoch"] = model.best_epoch;
  save_model(path, arch_tag(model.arch), hyper.dump(), model.params);
}

inline PredictorModel load_predictor(const std::string& path) {
  LoadedModel raw = load_model(path);
  PredictorModel model;
  model.arch = parse_arch(raw.arch_tag);
  nlohmann::json hyper;
  try {
    hyper = nlohmann::json::parse(raw.hyper_json);
  } catch (const nlohmann::json::exception& e) {
    throw Error::validation(std::string("bad hyper block in checkpoint: ") + e.what());
  }
  model.hyper = PredictorHyper::from_json(hyper);
  model.d = hyper.at("d").get<Eigen::Index>();
  model.best_epoch = hyper.value("best_epoch", -1);

  if (model.arch == Arch::P3_attention) {
    AttentionPredictor net(model.d, model.hyper.attn_hidden);
    adopt_payload(net.params(), raw);
    model.params = net.params();
  } else if (model.arch == Arch::P4_gru) {
    GruPredictor net(model.d, model.hyper.hidden);
    adopt_payload(net.params(), raw);
    model.params = net.params();
  } else if (!raw.sections.empty()) {
    throw Error::validation("closed-form arch " + raw.arch_tag +
                            " must not carry parameters");
  }
  return model;
}

}  // namespace latte
