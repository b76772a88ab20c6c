#pragma once

// State-to-Token bridge: maps one d-dim forecast state to one h-dim token
// embedding through an undercomplete sigmoid bottleneck.
//
//   b = sigmoid(W_f s + b_f)                    filter, d -> bottleneck
//   e = W_2 tanh(W_1 b + b_1) + b_2             projector, bottleneck -> h
//   x = W_d b + b_d                             aux decoder (training only)
//
// Training objective over a micro-batch B:
//   mean provider(e_i) + alpha * ( mean ||x_i - s_i||^2 / d
//                                  + sparsity_weight * KL(rho || mean_i b_i) )
// where the KL is the elementwise Bernoulli form over batch-mean activations.
// The provider stands in for a generation loss: it returns a scalar and its
// gradient with respect to the emitted token embedding.
//
// With `use_filter` off the projector consumes the state directly (d -> h)
// and there is no bottleneck, decoder, or sparsity term.

#include "latte/core.hpp"
#include "latte/io_util.hpp"
#include "latte/optim.hpp"
#include "latte/params.hpp"
#include "latte/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

namespace latte {

struct BridgeConfig {
  int d = 1024;
  int bottleneck = 512;
  int proj_hidden = 1024;
  int h = 4096;
  bool use_filter = true;
  double rho = 0.05;
  double alpha = 0.01;
  double sparsity_weight = 1e-3;
  int epochs = 6;
  int batch = 32;
  int accumulation = 4;
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 7;

  nlohmann::json to_json() const {
    return {{"d", d},
            {"bottleneck", bottleneck},
            {"proj_hidden", proj_hidden},
            {"h", h},
            {"use_filter", use_filter},
            {"rho", rho},
            {"alpha", alpha},
            {"sparsity_weight", sparsity_weight},
            {"epochs", epochs},
            {"batch", batch},
            {"accumulation", accumulation},
            {"learning_rate", learning_rate},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_eps", adam_eps},
            {"seed", seed}};
  }

  static BridgeConfig from_json(const nlohmann::json& j) {
    BridgeConfig c;
    c.d = j.value("d", c.d);
    c.bottleneck = j.value("bottleneck", c.bottleneck);
    c.proj_hidden = j.value("proj_hidden", c.proj_hidden);
    c.h = j.value("h", c.h);
    c.use_filter = j.value("use_filter", c.use_filter);
    c.rho = j.value("rho", c.rho);
    c.alpha = j.value("alpha", c.alpha);
    c.sparsity_weight = j.value("sparsity_weight", c.sparsity_weight);
    c.epochs = j.value("epochs", c.epochs);
    c.batch = j.value("batch", c.batch);
    c.accumulation = j.value("accumulation", c.accumulation);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

struct TokenEmbedding {
  Vec vector;                        // h floats
  std::uint64_t source_state_hash = 0;
  std::uint64_t model_version = 0;
};

// Batch-mean Bernoulli KL. `activations` is bottleneck x batch; each unit's
// mean activation is clamped to [1e-7, 1-1e-7] before the logs.
inline double kl_sparsity(const Mat& activations, double rho = 0.05) {
  if (activations.cols() < 1) throw Error::validation("kl_sparsity: empty batch");
  double total = 0.0;
  for (Eigen::Index j = 0; j < activations.rows(); ++j) {
    const double mean = activations.row(j).mean();
    const double p = std::clamp(mean, 1e-7, 1.0 - 1e-7);
    total += rho * std::log(rho / p) + (1.0 - rho) * std::log((1.0 - rho) / (1.0 - p));
  }
  return total;
}

class BridgeModel {
 public:
  explicit BridgeModel(const BridgeConfig& cfg) : cfg_(cfg) {
    if (cfg.use_filter && cfg.bottleneck >= cfg.d)
      throw Error::validation("bridge bottleneck must be narrower than d");
    const Eigen::Index d = cfg.d;
    const Eigen::Index b = cfg.use_filter ? cfg.bottleneck : cfg.d;
    const Eigen::Index p = cfg.proj_hidden;
    const Eigen::Index h = cfg.h;
    if (cfg.use_filter) {
      i_wf_ = block_.add("W_f", b, d, d);
      i_bf_ = block_.add("b_f", b, 1, 0);
    }
    i_w1_ = block_.add("W_1", p, b, b);
    i_b1_ = block_.add("b_1", p, 1, 0);
    i_w2_ = block_.add("W_2", h, p, p);
    i_b2_ = block_.add("b_2", h, 1, 0);
    if (cfg.use_filter) {
      i_wd_ = block_.add("W_d", d, b, b);
      i_bd_ = block_.add("b_d", d, 1, 0);
    }
  }

  void init() { block_.init(cfg_.seed, "STB"); refresh_version(); }

  const BridgeConfig& config() const { return cfg_; }
  ParamBlock& params() { return block_; }
  const ParamBlock& params() const { return block_; }

  // FNV hash over the parameter bytes; call after any external mutation.
  void refresh_version() {
    version_ = fnv1a(block_.flat.data(),
                     static_cast<std::size_t>(block_.flat.size()) * sizeof(double));
  }
  std::uint64_t version() const { return version_; }

  Vec filter_activations(const Vec& state) const {
    check_state(state);
    if (!cfg_.use_filter) return state;
    return ((block_.mat(i_wf_) * state + block_.vec(i_bf_)).array().logistic()).matrix();
  }

  TokenEmbedding forward(const Vec& state) const {
    const Vec b = filter_activations(state);
    Vec t = (block_.mat(i_w1_) * b + block_.vec(i_b1_)).array().tanh();
    TokenEmbedding out;
    out.vector = block_.mat(i_w2_) * t + block_.vec(i_b2_);
    if (!out.vector.allFinite())
      throw Error::internal("bridge produced non-finite token embedding (model corruption)");
    out.source_state_hash = hash_state(state);
    out.model_version = version_;
    return out;
  }

  // Aux reconstruction; loss is per-coordinate MSE against the input state.
  std::pair<Vec, double> reconstruct(const Vec& state) const {
    if (!cfg_.use_filter)
      throw Error::validation("bridge without filter has no reconstruction path");
    const Vec b = filter_activations(state);
    Vec x = block_.mat(i_wd_) * b + block_.vec(i_bd_);
    const double loss = (x - state).squaredNorm() / static_cast<double>(cfg_.d);
    return {std::move(x), loss};
  }

  static std::uint64_t hash_state(const Vec& state) {
    return fnv1a(state.data(), static_cast<std::size_t>(state.size()) * sizeof(double));
  }

  struct SectionIds {
    std::size_t wf, bf, w1, b1, w2, b2, wd, bd;
    bool has_filter;
  };
  SectionIds section_ids() const {
    return {i_wf_, i_bf_, i_w1_, i_b1_, i_w2_, i_b2_, i_wd_, i_bd_, cfg_.use_filter};
  }

 private:
  void check_state(const Vec& state) const {
    if (state.size() != cfg_.d)
      throw Error::validation("bridge: state dim " + std::to_string(state.size()) +
                              " != configured d " + std::to_string(cfg_.d));
  }

  BridgeConfig cfg_;
  ParamBlock block_;
  std::size_t i_wf_ = 0, i_bf_ = 0, i_w1_ = 0, i_b1_ = 0, i_w2_ = 0, i_b2_ = 0,
              i_wd_ = 0, i_bd_ = 0;
  std::uint64_t version_ = 0;
};

inline TokenEmbedding bridge_forward(const BridgeModel& model, const Vec& state) {
  return model.forward(state);
}

inline std::pair<Vec, double> bridge_reconstruct(const BridgeModel& model, const Vec& state) {
  return model.reconstruct(state);
}

// ---------------------------------------------------------------------------
// Loss providers. A provider scores a token embedding for example `index` and
// fills the gradient with respect to that embedding. The real generation NLL
// would be an external provider honoring this same contract.

class LossProvider {
 public:
  virtual ~LossProvider() = default;
  virtual std::size_t size() const = 0;
  virtual double loss_and_grad(std::size_t index, const Vec& token, Vec& grad) const = 0;
};

// 0.5 * ||e - y_i||^2 against fixed random targets.
class QuadraticAlignProvider : public LossProvider {
 public:
  QuadraticAlignProvider(Mat targets) : targets_(std::move(targets)) {}

  static QuadraticAlignProvider random(Eigen::Index h, std::size_t n, std::uint64_t seed) {
    Rng rng(seed, stream_of("quadratic-provider"));
    Mat t(h, static_cast<Eigen::Index>(n));
    for (Eigen::Index c = 0; c < t.cols(); ++c) t.col(c) = rng.normal_vec(h);
    return QuadraticAlignProvider(std::move(t));
  }

  std::size_t size() const override { return static_cast<std::size_t>(targets_.cols()); }

  double loss_and_grad(std::size_t index, const Vec& token, Vec& grad) const override {
    if (index >= size()) throw Error::internal("provider index out of range");
    Vec diff = token - targets_.col(static_cast<Eigen::Index>(index));
    grad = diff;
    return 0.5 * diff.squaredNorm();
  }

  const Mat& targets() const { return targets_; }

 private:
  Mat targets_;
};

// 1 - cos(e, y_i) against fixed random unit targets.
class CosineAlignProvider : public LossProvider {
 public:
  CosineAlignProvider(Mat targets) : targets_(std::move(targets)) {}

  static CosineAlignProvider random(Eigen::Index h, std::size_t n, std::uint64_t seed) {
    Rng rng(seed, stream_of("cosine-provider"));
    Mat t(h, static_cast<Eigen::Index>(n));
    for (Eigen::Index c = 0; c < t.cols(); ++c) t.col(c) = rng.unit_vec(h);
    return CosineAlignProvider(std::move(t));
  }

  std::size_t size() const override { return static_cast<std::size_t>(targets_.cols()); }

  double loss_and_grad(std::size_t index, const Vec& token, Vec& grad) const override {
    if (index >= size()) throw Error::internal("provider index out of range");
    const Vec y = targets_.col(static_cast<Eigen::Index>(index));
    const double tn = token.norm();
    if (tn < 1e-12) {
      grad = Vec::Zero(token.size());
      return 1.0;
    }
    const double dot = token.dot(y);
    grad = -y / tn + (dot / (tn * tn * tn)) * token;
    return 1.0 - dot / tn;
  }

 private:
  Mat targets_;
};

// ---------------------------------------------------------------------------
// Training.

struct BridgeEpochLog {
  int epoch = 0;
  double train_total = 0.0;
  double train_provider = 0.0;
  double val_total = std::numeric_limits<double>::quiet_NaN();
  double val_provider = std::numeric_limits<double>::quiet_NaN();
  double val_mean_activation = std::numeric_limits<double>::quiet_NaN();
};

struct BridgeTrainResult {
  BridgeModel model;
  std::vector<BridgeEpochLog> log;
  int best_epoch = -1;

  BridgeTrainResult(const BridgeConfig& cfg) : model(cfg) {}
};

namespace detail {

// Forward/backward over one micro-batch; adds parameter gradients (already
// divided by the batch size) into `grad` and returns (total, provider) loss.
struct MicroBatchEval {
  double total = 0.0;
  double provider = 0.0;
};

inline MicroBatchEval bridge_micro_batch(const BridgeModel& model,
                                         const std::vector<Vec>& states,
                                         const std::vector<std::size_t>& indices,
                                         std::size_t lo, std::size_t hi,
                                         const LossProvider& provider, Vec* grad) {
  const auto& cfg = model.config();
  const auto ids = model.section_ids();
  const auto& P = model.params();
  const auto n = static_cast<Eigen::Index>(hi - lo);
  if (n <= 0) throw Error::internal("empty micro-batch");
  const double inv_n = 1.0 / static_cast<double>(n);
  const Eigen::Index bdim = ids.has_filter ? cfg.bottleneck : cfg.d;

  // Forward, keeping per-example activations.
  Mat B(bdim, n);          // filter (or raw state) activations
  Mat T(cfg.proj_hidden, n);  // tanh activations
  MicroBatchEval eval;
  Mat d_token(cfg.h, n);
  Mat d_b_from_recon;  // filled by the aux path
  Vec kl_grad;         // d KL / d rho_hat, per unit

  for (Eigen::Index k = 0; k < n; ++k) {
    const Vec& s = states[indices[lo + static_cast<std::size_t>(k)]];
    B.col(k) = model.filter_activations(s);
    T.col(k) = (P.mat(ids.w1) * B.col(k) + P.vec(ids.b1)).array().tanh();
    Vec token = P.mat(ids.w2) * T.col(k) + P.vec(ids.b2);
    Vec g(cfg.h);
    const double pl =
        provider.loss_and_grad(indices[lo + static_cast<std::size_t>(k)], token, g);
    if (!std::isfinite(pl))
      throw Error::internal("provider returned non-finite loss for example " +
                            std::to_string(indices[lo + static_cast<std::size_t>(k)]));
    eval.provider += pl * inv_n;
    d_token.col(k) = g * inv_n;
  }
  eval.total = eval.provider;

  const bool aux = ids.has_filter && cfg.alpha != 0.0;
  if (aux) {
    // Reconstruction (per-coordinate MSE, averaged over the micro-batch).
    d_b_from_recon = Mat::Zero(bdim, n);
    double recon_loss = 0.0;
    auto W_d = P.mat(ids.wd);
    for (Eigen::Index k = 0; k < n; ++k) {
      const Vec& s = states[indices[lo + static_cast<std::size_t>(k)]];
      Vec x = W_d * B.col(k) + P.vec(ids.bd);
      Vec diff = x - s;
      recon_loss += diff.squaredNorm() / static_cast<double>(cfg.d) * inv_n;
      if (grad != nullptr) {
        const Vec d_x = (2.0 * cfg.alpha * inv_n / static_cast<double>(cfg.d)) * diff;
        model.params().mat_in(*grad, ids.wd) += d_x * B.col(k).transpose();
        model.params().vec_in(*grad, ids.bd) += d_x;
        d_b_from_recon.col(k) = W_d.transpose() * d_x;
      }
    }
    // Sparsity on this micro-batch's own mean activations.
    const double kl = kl_sparsity(B, cfg.rho);
    kl_grad = Vec::Zero(bdim);
    for (Eigen::Index j = 0; j < bdim; ++j) {
      const double mean = B.row(j).mean();
      if (mean <= 1e-7 || mean >= 1.0 - 1e-7) continue;  // clamped: flat
      kl_grad[j] = cfg.alpha * cfg.sparsity_weight * inv_n *
                   (-cfg.rho / mean + (1.0 - cfg.rho) / (1.0 - mean));
    }
    eval.total += cfg.alpha * (recon_loss + cfg.sparsity_weight * kl);
  }

  if (grad == nullptr) return eval;

  auto g_w1 = model.params().mat_in(*grad, ids.w1);
  auto g_b1 = model.params().vec_in(*grad, ids.b1);
  auto g_w2 = model.params().mat_in(*grad, ids.w2);
  auto g_b2 = model.params().vec_in(*grad, ids.b2);
  auto W_1 = P.mat(ids.w1);
  auto W_2 = P.mat(ids.w2);

  for (Eigen::Index k = 0; k < n; ++k) {
    const Vec& s = states[indices[lo + static_cast<std::size_t>(k)]];
    g_w2 += d_token.col(k) * T.col(k).transpose();
    g_b2 += d_token.col(k);
    Vec d_t = W_2.transpose() * d_token.col(k);
    Vec d_a1 = (d_t.array() * (1.0 - T.col(k).array().square())).matrix();
    g_w1 += d_a1 * B.col(k).transpose();
    g_b1 += d_a1;

    if (ids.has_filter) {
      Vec d_b = W_1.transpose() * d_a1;
      if (aux) d_b += d_b_from_recon.col(k) + kl_grad;
      Vec d_a0 =
          (d_b.array() * B.col(k).array() * (1.0 - B.col(k).array())).matrix();
      model.params().mat_in(*grad, ids.wf) += d_a0 * s.transpose();
      model.params().vec_in(*grad, ids.bf) += d_a0;
    }
  }
  return eval;
}

}  // namespace detail

// Objective over a whole set, KL taken over the set's mean activations.
inline BridgeEpochLog bridge_eval(const BridgeModel& model, const std::vector<Vec>& states,
                                  const LossProvider& provider) {
  BridgeEpochLog out;
  if (states.empty()) return out;
  std::vector<std::size_t> all(states.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto eval =
      detail::bridge_micro_batch(model, states, all, 0, states.size(), provider, nullptr);
  out.val_total = eval.total;
  out.val_provider = eval.provider;
  double act = 0.0;
  if (model.config().use_filter) {
    for (const auto& s : states) act += model.filter_activations(s).mean();
    out.val_mean_activation = act / static_cast<double>(states.size());
  }
  return out;
}

inline BridgeTrainResult train_bridge(const std::vector<Vec>& train_states,
                                      const std::vector<Vec>& val_states,
                                      const LossProvider& provider,
                                      const LossProvider& val_provider,
                                      const BridgeConfig& cfg) {
  if (train_states.empty()) throw Error::validation("train_bridge: no training states");
  if (provider.size() < train_states.size())
    throw Error::validation("train_bridge: provider smaller than training set");
  for (const auto& s : train_states)
    if (s.size() != cfg.d) throw Error::validation("train_bridge: state dim mismatch");

  BridgeTrainResult result(cfg);
  BridgeModel& model = result.model;
  model.init();

  AdamW opt(model.params().size(),
            AdamWConfig{cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps,
                        /*weight_decay=*/0.0});
  Rng order_rng(cfg.seed, stream_of("bridge-order"));

  std::vector<std::size_t> order(train_states.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  Vec best_params = model.params().flat;
  double best_val = std::numeric_limits<double>::infinity();

  const std::size_t micro = static_cast<std::size_t>(cfg.batch);
  const std::size_t step_span = micro * static_cast<std::size_t>(cfg.accumulation);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double total_sum = 0.0;
    double provider_sum = 0.0;
    std::size_t batches = 0;

    for (std::size_t begin = 0; begin < order.size(); begin += step_span) {
      Vec grad = Vec::Zero(model.params().size());
      int micro_count = 0;
      for (std::size_t mb = begin; mb < std::min(order.size(), begin + step_span);
           mb += micro) {
        const std::size_t hi = std::min(order.size(), mb + micro);
        const auto eval =
            detail::bridge_micro_batch(model, train_states, order, mb, hi, provider, &grad);
        total_sum += eval.total;
        provider_sum += eval.provider;
        ++batches;
        ++micro_count;
      }
      grad /= static_cast<double>(micro_count);  // mean over accumulated micro-batches
      if (!grad.allFinite())
        throw Error::internal("non-finite bridge gradient (epoch " +
                              std::to_string(epoch) + ")");
      opt.step(model.params().flat, grad);
    }

    model.refresh_version();
    BridgeEpochLog log = bridge_eval(model, val_states, val_provider);
    log.epoch = epoch;
    log.train_total = total_sum / static_cast<double>(batches);
    log.train_provider = provider_sum / static_cast<double>(batches);
    result.log.push_back(log);

    const double score = val_states.empty() ? log.train_total : log.val_total;
    if (score < best_val) {
      best_val = score;
      best_params = model.params().flat;
      result.best_epoch = epoch;
    }
  }

  model.params().flat = best_params;
  model.refresh_version();
  return result;
}

// Finite-difference check of the full micro-batch objective (provider +
// reconstruction + sparsity) on a small instance.
inline double bridge_gradient_check(std::uint64_t seed, double eps = 1e-4) {
  BridgeConfig cfg;
  cfg.d = 16;
  cfg.bottleneck = 8;
  cfg.proj_hidden = 12;
  cfg.h = 12;
  cfg.alpha = 0.01;
  cfg.sparsity_weight = 1e-3;
  cfg.seed = seed;

  BridgeModel model(cfg);
  model.init();

  Rng rng(seed, stream_of("bridge-check"));
  std::vector<Vec> states;
  for (int i = 0; i < 3; ++i) states.push_back(rng.unit_vec(cfg.d));
  auto provider = QuadraticAlignProvider::random(cfg.h, states.size(), seed);
  std::vector<std::size_t> idx = {0, 1, 2};

  Vec analytic = Vec::Zero(model.params().size());
  detail::bridge_micro_batch(model, states, idx, 0, idx.size(), provider, &analytic);

  double max_rel = 0.0;
  Vec& theta = model.params().flat;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double keep = theta[i];
    theta[i] = keep + eps;
    const double up =
        detail::bridge_micro_batch(model, states, idx, 0, idx.size(), provider, nullptr)
            .total;
    theta[i] = keep - eps;
    const double down =
        detail::bridge_micro_batch(model, states, idx, 0, idx.size(), provider, nullptr)
            .total;
    theta[i] = keep;
    const double fd = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(fd), 1e-6});
    max_rel = std::max(max_rel, std::abs(analytic[i] - fd) / denom);
  }
  return max_rel;
}

// ---------------------------------------------------------------------------
// Prompt assembly and the injection bundle.

struct AssembledPrompt {
  std::string text;
  std::size_t marker_offset = 0;  // byte offset of the marker token
  bool collision_escaped = false;
};

// Emits the fixed prompt template with the title/description substituted and
// exactly one occurrence of the marker token. If the item text itself
// contains the marker, a backslash is inserted after '<' so the collision
// cannot masquerade as the injection site.
inline AssembledPrompt assemble_prompt(const std::string& title,
                                       const std::string& description,
                                       const std::string& marker = "<PREF_TOKEN>") {
  if (title.empty() || description.empty())
    throw Error::validation("assemble_prompt: title and description must be non-empty");

  auto escape = [&](std::string text, bool* hit) {
    std::size_t at = 0;
    while ((at = text.find(marker, at)) != std::string::npos) {
      text.insert(at + 1, "\\");
      at += marker.size() + 1;
      *hit = true;
    }
    return text;
  };

  AssembledPrompt out;
  const std::string safe_title = escape(title, &out.collision_escaped);
  const std::string safe_desc = escape(description, &out.collision_escaped);

  std::string text;
  text += "[System]\n";
  text +=
      "You are a personalized writing assistant that produces reviews in the "
      "user's individual style.\n";
  text += "\n[User context]\n";
  text +=
      "The user has interacted with this platform across many sessions. A compact "
      "latent representation of their current preference follows.\n";
  text += "\nBased on this user's preference trajectory, their current preference "
          "is represented as: ";
  out.marker_offset = text.size();
  text += marker;
  text += "\n";
  text += "\n[Target item]\n";
  text += "Title: " + safe_title + "\n";
  text += "Description: " + safe_desc + "\n";
  text += "\n[Task]\n";
  text += "Write a review for this item in the user's current style. Output only "
          "the review text.\n";
  out.text = std::move(text);
  return out;
}

struct InjectionBundle {
  std::string prompt;
  std::size_t marker_offset = 0;
  int h = 0;
  std::uint64_t model_version = 0;
  std::uint64_t source_state_hash = 0;
  Vec vector;
};

// JSON header at `path`, f32 vector in `path` + ".vec".
inline void emit_injection_bundle(const std::string& prompt, std::size_t marker_offset,
                                  const TokenEmbedding& token, const std::string& path) {
  nlohmann::json header{{"prompt", prompt},
                        {"marker_offset", marker_offset},
                        {"h", token.vector.size()},
                        {"model_version", hex64(token.model_version)},
                        {"source_state_hash", hex64(token.source_state_hash)},
                        {"vector_file", std::filesystem::path(path + ".vec").filename().string()}};
  write_file(path, header.dump(2) + "\n");
  auto out = open_out(path + ".vec");
  for (Eigen::Index i = 0; i < token.vector.size(); ++i)
    write_pod<float>(out, static_cast<float>(token.vector[i]));
  if (!out) throw Error::internal("write failed: " + path + ".vec");
}

inline InjectionBundle load_injection_bundle(const std::string& path) {
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error::validation(std::string("bad injection bundle header: ") + e.what());
  }
  InjectionBundle bundle;
  bundle.prompt = header.at("prompt").get<std::string>();
  bundle.marker_offset = header.at("marker_offset").get<std::size_t>();
  bundle.h = header.at("h").get<int>();
  bundle.model_version = std::stoull(header.at("model_version").get<std::string>(), nullptr, 16);
  bundle.source_state_hash =
      std::stoull(header.at("source_state_hash").get<std::string>(), nullptr, 16);

  const std::string vec_path =
      (std::filesystem::path(path).parent_path() /
       header.at("vector_file").get<std::string>())
          .string();
  auto in = open_in(vec_path);
  bundle.vector.resize(bundle.h);
  for (int i = 0; i < bundle.h; ++i)
    bundle.vector[i] = static_cast<double>(read_pod<float>(in, "bundle vector"));
  char extra;
  if (in.read(&extra, 1).gcount() != 0)
    throw Error::validation("bundle vector file longer than header h: " + vec_path);
  return bundle;
}

// ---------------------------------------------------------------------------
// Checkpoint round-trip (shared LATTEMDL container, arch tag "STB").

inline void save_bridge(const BridgeModel& model, const std::string& path) {
  save_model(path, "STB", model.config().to_json().dump(), model.params());
}

inline BridgeModel load_bridge(const std::string& path) {
  LoadedModel raw = load_model(path);
  if (raw.arch_tag != "STB")
    throw Error::validation("expected STB checkpoint, found arch '" + raw.arch_tag + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(raw.hyper_json);
  } catch (const nlohmann::json::exception& e) {
    throw Error::validation(std::string("bad bridge hyper block: ") + e.what());
  }
  BridgeModel model(BridgeConfig::from_json(j));
  adopt_payload(model.params(), raw);
  model.refresh_version();
  return model;
}

}  // namespace latte
