#pragma once

// Stage orchestration behind the CLI: run configuration (one JSON file,
// unknown keys rejected, defaults = library defaults), artifact layout,
// dependency and staleness checks via content hashes, an output-directory
// lock, and the eight pipeline stages.
//
// Holdout masking is structural: stages that query peers or profiles operate
// on a store with every split user's validation and test sessions removed, so
// held-out rows cannot influence baselines no matter the timestamps. The
// access audit then verifies the same property empirically; a violation is an
// internal error, never a warning.
//
// Era contract per split user with positions 0..T-1 (test=T-1, val=T-2,
// bridge=T-3): build-states and train-predictor touch embeddings of positions
// <= T-3 only; forecast builds the val-position target state for evaluation
// (val rows allowed, test rows still masked); test rows are reserved and no
// stage reads them.

#include "latte/anchor.hpp"
#include "latte/audit.hpp"
#include "latte/bridge.hpp"
#include "latte/core.hpp"
#include "latte/diagnostics.hpp"
#include "latte/driftlab.hpp"
#include "latte/embedding.hpp"
#include "latte/filter.hpp"
#include "latte/forecast.hpp"
#include "latte/io_util.hpp"
#include "latte/peer.hpp"
#include "latte/rng.hpp"
#include "latte/session.hpp"
#include "latte/split.hpp"
#include "latte/trajectory_io.hpp"

#include <nlohmann/json.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace latte {

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j,
                                std::initializer_list<const char*> allowed,
                                const std::string& context) {
  if (!j.is_object())
    throw Error::validation("config: '" + context + "' must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool known = false;
    for (const char* a : allowed)
      if (key == a) {
        known = true;
        break;
      }
    if (!known)
      throw Error::validation("config: unknown key '" + key + "' in " + context);
  }
}

}  // namespace detail

struct RunConfig {
  // paths
  std::string sessions_path;
  std::string embeddings_path;
  std::string out_dir;
  // anchoring
  TrajectoryParams anchor;
  FilterParams filter;
  SplitParams split;
  // predictor
  Arch arch = Arch::P4_gru;
  PredictorHyper hyper;
  bool predictor_seed_explicit = false;
  // forecast
  std::string forecast_mode;  // empty: arch of the trained checkpoint
  std::size_t recent_k = 8;
  double half_life = 100000.0;
  // bridge
  BridgeConfig bridge;
  std::string bridge_provider = "quadratic";  // or "cosine"
  double bridge_val_fraction = 0.2;
  bool bridge_seed_explicit = false;
  // emit
  std::string emit_title = "Sample Item";
  std::string emit_description = "A short catalog description used for smoke runs.";
  std::string emit_marker = "<PREF_TOKEN>";
  std::size_t emit_limit = 0;  // 0 = all
  // diagnostics
  std::size_t diag_vectors = 1000;
  std::size_t diag_users = 100;
  std::size_t diag_pairs = 1000;
  bool diag_leakage_probe = false;
  std::size_t diag_probe_sessions = 8;
  // simulate
  AdditiveModelConfig sim_anchor;
  double sim_g_norm = 0.1;
  double sim_base_norm = 1.0;
  int sim_T = 10;
  int sim_d = 4;
  double sim_sigma2 = 0.04;
  std::uint64_t sim_mc_trials = 10000;
  std::vector<double> sim_sweep_g = {0.0, 0.05, 0.1, 0.2, 0.4};
  std::vector<double> sim_sweep_sigma = {0.05, 0.1, 0.2, 0.4, 0.8};
  std::uint64_t sim_sweep_trials = 10000;
  bool sim_seed_explicit = false;

  std::uint64_t seed = 1;

  // Master-seed propagation: sub-seeds follow the master unless the config
  // set them explicitly. The CLI --seed flag re-applies this after parsing.
  void apply_master_seed(std::uint64_t master) {
    seed = master;
    if (!predictor_seed_explicit) hyper.seed = master;
    if (!bridge_seed_explicit) bridge.seed = master;
    if (!sim_seed_explicit) sim_anchor.seed = master;
  }
};

inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::reject_unknown_keys(j,
                              {"paths", "anchor", "filter", "split", "predictor",
                               "forecast", "bridge", "emit", "diagnostics", "simulate",
                               "seed"},
                              "top level");
  RunConfig cfg;
  cfg.seed = j.value("seed", cfg.seed);

  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    detail::reject_unknown_keys(p, {"sessions", "embeddings", "out_dir"}, "paths");
    cfg.sessions_path = p.value("sessions", cfg.sessions_path);
    cfg.embeddings_path = p.value("embeddings", cfg.embeddings_path);
    cfg.out_dir = p.value("out_dir", cfg.out_dir);
  }

  if (j.contains("anchor")) {
    const auto& a = j.at("anchor");
    detail::reject_unknown_keys(
        a, {"m", "gamma", "eps", "min_peer_history", "overflow", "overflow_seed"},
        "anchor");
    cfg.anchor.peer.m = a.value("m", cfg.anchor.peer.m);
    cfg.anchor.gamma = a.value("gamma", cfg.anchor.gamma);
    cfg.anchor.eps = a.value("eps", cfg.anchor.eps);
    cfg.anchor.peer.min_peer_history =
        a.value("min_peer_history", cfg.anchor.peer.min_peer_history);
    const std::string overflow = a.value("overflow", std::string("most_recent"));
    if (overflow == "most_recent")
      cfg.anchor.peer.overflow = PeerOverflow::most_recent;
    else if (overflow == "random_seeded")
      cfg.anchor.peer.overflow = PeerOverflow::random_seeded;
    else
      throw Error::validation("config: anchor.overflow must be most_recent or "
                              "random_seeded, got '" + overflow + "'");
    cfg.anchor.peer.seed = a.value("overflow_seed", cfg.anchor.peer.seed);
  }

  if (j.contains("filter")) {
    const auto& f = j.at("filter");
    detail::reject_unknown_keys(
        f, {"min_history", "min_valid_peers", "min_chars", "chars_on_history"}, "filter");
    cfg.filter.min_history = f.value("min_history", cfg.filter.min_history);
    cfg.filter.min_valid_peers = f.value("min_valid_peers", cfg.filter.min_valid_peers);
    cfg.filter.min_chars = f.value("min_chars", cfg.filter.min_chars);
    cfg.filter.chars_on_history =
        f.value("chars_on_history", cfg.filter.chars_on_history);
  }

  if (j.contains("split")) {
    const auto& s = j.at("split");
    detail::reject_unknown_keys(s, {"min_sessions", "min_states"}, "split");
    cfg.split.min_sessions = s.value("min_sessions", cfg.split.min_sessions);
    cfg.split.min_states = s.value("min_states", cfg.split.min_states);
  }
  cfg.split.peer = cfg.anchor.peer;  // one peer-query contract across stages

  if (j.contains("predictor")) {
    const auto& p = j.at("predictor");
    detail::reject_unknown_keys(p,
                                {"arch", "ema_beta", "hidden", "attn_hidden", "lambda",
                                 "learning_rate", "epochs", "batch_size", "seed",
                                 "beta1", "beta2", "adam_eps", "weight_decay"},
                                "predictor");
    cfg.arch = parse_arch(p.value("arch", arch_tag(cfg.arch)));
    cfg.hyper = PredictorHyper::from_json(p);
    cfg.predictor_seed_explicit = p.contains("seed");
  }

  if (j.contains("forecast")) {
    const auto& f = j.at("forecast");
    detail::reject_unknown_keys(f, {"mode", "recent_k", "half_life"}, "forecast");
    cfg.forecast_mode = f.value("mode", cfg.forecast_mode);
    cfg.recent_k = f.value("recent_k", cfg.recent_k);
    cfg.half_life = f.value("half_life", cfg.half_life);
    if (cfg.half_life <= 0.0)
      throw Error::validation("config: forecast.half_life must be positive");
  }

  if (j.contains("bridge")) {
    const auto& b = j.at("bridge");
    detail::reject_unknown_keys(b,
                                {"d", "bottleneck", "proj_hidden", "h", "use_filter",
                                 "rho", "alpha", "sparsity_weight", "epochs", "batch",
                                 "accumulation", "learning_rate", "beta1", "beta2",
                                 "adam_eps", "seed", "provider", "val_fraction"},
                                "bridge");
    nlohmann::json core = b;
    core.erase("provider");
    core.erase("val_fraction");
    cfg.bridge = BridgeConfig::from_json(core);
    cfg.bridge_provider = b.value("provider", cfg.bridge_provider);
    if (cfg.bridge_provider != "quadratic" && cfg.bridge_provider != "cosine")
      throw Error::validation("config: bridge.provider must be quadratic or cosine, got '" +
                              cfg.bridge_provider + "'");
    cfg.bridge_val_fraction = b.value("val_fraction", cfg.bridge_val_fraction);
    if (cfg.bridge_val_fraction < 0.0 || cfg.bridge_val_fraction >= 1.0)
      throw Error::validation("config: bridge.val_fraction must be in [0, 1)");
    cfg.bridge_seed_explicit = b.contains("seed");
  }

  if (j.contains("emit")) {
    const auto& e = j.at("emit");
    detail::reject_unknown_keys(e, {"title", "description", "marker", "limit"}, "emit");
    cfg.emit_title = e.value("title", cfg.emit_title);
    cfg.emit_description = e.value("description", cfg.emit_description);
    cfg.emit_marker = e.value("marker", cfg.emit_marker);
    cfg.emit_limit = e.value("limit", cfg.emit_limit);
  }

  if (j.contains("diagnostics")) {
    const auto& d = j.at("diagnostics");
    detail::reject_unknown_keys(
        d, {"vectors", "users", "pairs", "leakage_probe", "probe_sessions"},
        "diagnostics");
    cfg.diag_vectors = d.value("vectors", cfg.diag_vectors);
    cfg.diag_users = d.value("users", cfg.diag_users);
    cfg.diag_pairs = d.value("pairs", cfg.diag_pairs);
    cfg.diag_leakage_probe = d.value("leakage_probe", cfg.diag_leakage_probe);
    cfg.diag_probe_sessions = d.value("probe_sessions", cfg.diag_probe_sessions);
  }

  if (j.contains("simulate")) {
    const auto& s = j.at("simulate");
    detail::reject_unknown_keys(s, {"anchor", "drift", "sweep"}, "simulate");
    if (s.contains("anchor")) {
      const auto& a = s.at("anchor");
      detail::reject_unknown_keys(
          a, {"d", "peers", "item_scale", "noise_var", "weights", "trials", "seed"},
          "simulate.anchor");
      cfg.sim_anchor.d = a.value("d", cfg.sim_anchor.d);
      cfg.sim_anchor.peers = a.value("peers", cfg.sim_anchor.peers);
      cfg.sim_anchor.item_scale = a.value("item_scale", cfg.sim_anchor.item_scale);
      cfg.sim_anchor.noise_var = a.value("noise_var", cfg.sim_anchor.noise_var);
      const std::string w = a.value("weights", std::string("random_simplex"));
      if (w == "random_simplex")
        cfg.sim_anchor.weights = WeightSpec::random_simplex;
      else if (w == "uniform")
        cfg.sim_anchor.weights = WeightSpec::uniform;
      else
        throw Error::validation("config: simulate.anchor.weights must be "
                                "random_simplex or uniform");
      cfg.sim_anchor.trials = a.value("trials", cfg.sim_anchor.trials);
      cfg.sim_seed_explicit = a.contains("seed");
      cfg.sim_anchor.seed = a.value("seed", cfg.sim_anchor.seed);
    }
    if (s.contains("drift")) {
      const auto& dj = s.at("drift");
      detail::reject_unknown_keys(
          dj, {"d", "T", "sigma2", "g_norm", "base_norm", "trials"}, "simulate.drift");
      cfg.sim_d = dj.value("d", cfg.sim_d);
      cfg.sim_T = dj.value("T", cfg.sim_T);
      cfg.sim_sigma2 = dj.value("sigma2", cfg.sim_sigma2);
      cfg.sim_g_norm = dj.value("g_norm", cfg.sim_g_norm);
      cfg.sim_base_norm = dj.value("base_norm", cfg.sim_base_norm);
      cfg.sim_mc_trials = dj.value("trials", cfg.sim_mc_trials);
    }
    if (s.contains("sweep")) {
      const auto& sw = s.at("sweep");
      detail::reject_unknown_keys(sw, {"g_norms", "sigmas", "trials"}, "simulate.sweep");
      if (sw.contains("g_norms"))
        cfg.sim_sweep_g = sw.at("g_norms").get<std::vector<double>>();
      if (sw.contains("sigmas"))
        cfg.sim_sweep_sigma = sw.at("sigmas").get<std::vector<double>>();
      cfg.sim_sweep_trials = sw.value("trials", cfg.sim_sweep_trials);
    }
  }

  // Propagate the master seed into sub-seeds that were not explicitly set.
  const std::uint64_t master = cfg.seed;
  const std::uint64_t explicit_hyper = cfg.hyper.seed;
  const std::uint64_t explicit_bridge = cfg.bridge.seed;
  const std::uint64_t explicit_sim = cfg.sim_anchor.seed;
  cfg.apply_master_seed(master);
  if (cfg.predictor_seed_explicit) cfg.hyper.seed = explicit_hyper;
  if (cfg.bridge_seed_explicit) cfg.bridge.seed = explicit_bridge;
  if (cfg.sim_seed_explicit) cfg.sim_anchor.seed = explicit_sim;
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error::validation("config " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

// ---------------------------------------------------------------------------
// Artifact layout.

struct Artifacts {
  std::string dir;
  explicit Artifacts(std::string out_dir) : dir(std::move(out_dir)) {}
  std::string store() const { return dir + "/store.jsonl"; }
  std::string split() const { return dir + "/split.json"; }
  std::string trajectories() const { return dir + "/trajectories.bin"; }
  std::string predictor() const { return dir + "/predictor.bin"; }
  std::string forecasts() const { return dir + "/forecasts.bin"; }
  std::string bridge() const { return dir + "/bridge.bin"; }
  std::string bundles() const { return dir + "/bundles"; }
  std::string sweep_csv() const { return dir + "/sweep.csv"; }
  std::string diagnostics_txt() const { return dir + "/diagnostics.txt"; }
  std::string summary(const std::string& stage) const { return dir + "/" + stage + ".json"; }
  std::string lock() const { return dir + "/.lock"; }
};

// Exclusive lock on the output directory: no concurrent writers.
class DirLock {
 public:
  explicit DirLock(const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    path_ = Artifacts(out_dir).lock();
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0)
      throw Error::validation("output directory is locked by another run (" + path_ +
                              " exists); remove it if that run is dead");
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;
  ~DirLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(path_.c_str());
    }
  }

 private:
  std::string path_;
  int fd_ = -1;
};

// ---------------------------------------------------------------------------
// Stage summaries, dependencies, staleness.

inline nlohmann::json hash_inputs(const std::vector<std::string>& paths) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& p : paths) out[p] = hex64(hash_file(p));
  return out;
}

inline void write_summary(const Artifacts& a, const std::string& stage,
                          const nlohmann::json& summary) {
  write_file(a.summary(stage), summary.dump(2) + "\n");
}

// Loads the summary a prerequisite stage wrote, failing with remediation
// hints when it is missing or its recorded inputs have changed on disk.
inline nlohmann::json require_stage(const Artifacts& a, const std::string& stage) {
  const std::string path = a.summary(stage);
  if (!std::filesystem::exists(path))
    throw Error::dependency("stage '" + stage + "' has not run (missing " + path +
                            "); run `latte " + stage + "` first");
  nlohmann::json summary;
  try {
    summary = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error::dependency("corrupt summary " + path + ": " + e.what() +
                            "; re-run `latte " + stage + "`");
  }
  if (summary.contains("inputs"))
    for (const auto& [input, recorded] : summary.at("inputs").items()) {
      if (!std::filesystem::exists(input))
        throw Error::dependency("input " + input + " of stage '" + stage +
                                "' is gone; re-run `latte " + stage + "`");
      if (hex64(hash_file(input)) != recorded.get<std::string>())
        throw Error::dependency("input " + input + " changed after stage '" + stage +
                                "' ran (stale artifacts); re-run `latte " + stage +
                                "`");
    }
  return summary;
}

// ---------------------------------------------------------------------------
// Holdout masking.

// Embedding rows of split users' val/test (or test only) sessions.
inline std::set<std::uint64_t> holdout_embedding_rows(const SessionStore& store,
                                                      const SplitAssignment& split,
                                                      bool include_val) {
  std::set<std::uint64_t> rows;
  for (const auto& [user, us] : split.users) {
    const auto& list = store.user_sessions(user);
    rows.insert(store.session(list[us.test_pos]).embedding_index);
    if (include_val) rows.insert(store.session(list[us.val_pos]).embedding_index);
  }
  return rows;
}

// Store with split users' val/test sessions removed: the peer universe for
// every model-era stage. Removing trailing sessions leaves earlier positions
// unchanged.
inline SessionStore masked_store(const SessionStore& store, const SplitAssignment& split,
                                 bool include_val) {
  std::set<std::size_t> drop;
  for (const auto& [user, us] : split.users) {
    const auto& list = store.user_sessions(user);
    drop.insert(list[us.test_pos]);
    if (include_val) drop.insert(list[us.val_pos]);
  }
  std::vector<Session> kept;
  kept.reserve(store.size() - drop.size());
  for (std::size_t i = 0; i < store.size(); ++i)
    if (!drop.count(i)) kept.push_back(store.session(i));
  return SessionStore(std::move(kept), store.meta());
}

// ---------------------------------------------------------------------------
// Stages. Each returns the summary it wrote (or would write under dry_run).

inline nlohmann::json run_ingest(const RunConfig& cfg, bool dry_run = false) {
  Artifacts a(cfg.out_dir);
  if (cfg.sessions_path.empty() || cfg.embeddings_path.empty() || cfg.out_dir.empty())
    throw Error::validation("config: paths.sessions, paths.embeddings, and "
                            "paths.out_dir are required");
  if (dry_run)
    return {{"stage", "ingest"},
            {"dry_run", true},
            {"would_read", {cfg.sessions_path, cfg.embeddings_path}},
            {"would_write", {a.store(), a.split(), a.summary("ingest")}}};

  std::filesystem::create_directories(cfg.out_dir);
  SessionStore store = load_sessions(cfg.sessions_path);
  EmbeddingStore embeddings = load_embeddings(cfg.embeddings_path);
  for (std::size_t i = 0; i < store.size(); ++i)
    if (store.session(i).embedding_index >= embeddings.count())
      throw Error::validation("session " + std::to_string(i) + " (user " +
                              store.session(i).user_id + ") references embedding row " +
                              std::to_string(store.session(i).embedding_index) +
                              " beyond count " + std::to_string(embeddings.count()));

  PeerIndex index = build_peer_index(store);
  auto [filtered, freport] = apply_filters(store, index, cfg.filter);
  // Split eligibility must see the same peer universe anchoring will use:
  // the full store, time-strict. The filtered store only decides WHO is
  // modeled, never who can serve as a peer.
  SplitAssignment split = chronological_split(filtered, index, cfg.split);

  save_sessions(store, a.store());
  split.save(a.split());

  nlohmann::json excluded = nlohmann::json::object();
  for (const auto& [user, reason] : split.excluded) excluded[user] = reason;
  nlohmann::json summary{
      {"stage", "ingest"},
      {"seed", cfg.seed},
      {"sessions", store.size()},
      {"lines_parsed", store.meta().lines_parsed},
      {"timestamp_ties", store.meta().timestamp_ties},
      {"embedding_rows", embeddings.count()},
      {"embedding_dim", embeddings.dim()},
      {"filter",
       {{"users_before", freport.users_before},
        {"users_after", freport.users_after},
        {"sessions_after", freport.sessions_after},
        {"retention", freport.retention}}},
      {"split_users", split.users.size()},
      {"split_excluded", excluded},
      {"inputs", hash_inputs({cfg.sessions_path, cfg.embeddings_path})},
      {"outputs", {a.store(), a.split()}}};
  write_summary(a, "ingest", summary);
  return summary;
}

inline nlohmann::json run_build_states(const RunConfig& cfg, bool dry_run = false) {
  Artifacts a(cfg.out_dir);
  if (dry_run)
    return {{"stage", "build-states"},
            {"dry_run", true},
            {"would_read", {a.store(), a.split(), cfg.embeddings_path}},
            {"would_write", {a.trajectories(), a.summary("build-states")}}};
  require_stage(a, "ingest");

  SessionStore store = load_sessions(a.store());
  EmbeddingStore embeddings = load_embeddings(cfg.embeddings_path);
  SplitAssignment split = SplitAssignment::load(a.split());

  // Peer universe excludes all held-out sessions; the audit double-checks.
  SessionStore masked = masked_store(store, split, /*include_val=*/true);
  PeerIndex index = build_peer_index(masked);
  AccessAudit audit;
  audit.set_stage("build-states");

  std::vector<Trajectory> trajectories;
  TrajectoryBuildStats total;
  for (const auto& [user, us] : split.users) {
    auto [traj, stats] =
        build_trajectory(user, masked, index, embeddings, cfg.anchor, us.bridge_pos + 1,
                         &audit);
    total.sessions_seen += stats.sessions_seen;
    total.skipped_no_peers += stats.skipped_no_peers;
    total.skipped_degenerate += stats.skipped_degenerate;
    trajectories.push_back(std::move(traj));
  }

  const auto forbidden = holdout_embedding_rows(store, split, /*include_val=*/true);
  const auto violations = audit.violations("build-states", forbidden);
  if (!violations.empty())
    throw Error::internal("holdout embedding rows touched during state construction: " +
                          std::to_string(violations.size()) + " distinct rows");

  save_trajectories(trajectories, embeddings.dim(), a.trajectories());

  std::size_t states = 0;
  for (const auto& t : trajectories) states += t.states.size();
  nlohmann::json summary{
      {"stage", "build-states"},
      {"seed", cfg.seed},
      {"users", trajectories.size()},
      {"states", states},
      {"sessions_seen", total.sessions_seen},
      {"skipped_no_peers", total.skipped_no_peers},
      {"skipped_degenerate", total.skipped_degenerate},
      {"audit",
       {{"stage", "build-states"},
        {"embedding_reads", audit.touched("build-states").size()},
        {"holdout_rows", forbidden.size()},
        {"violations", violations.size()}}},
      {"inputs", hash_inputs({a.store(), a.split(), cfg.embeddings_path})},
      {"outputs", {a.trajectories()}}};
  write_summary(a, "build-states", summary);
  return summary;
}

namespace detail {

// Rolling (prefix -> target) pairs from cached train-era states. Pairs whose
// target state was skipped at build time, or whose prefix came up short, are
// dropped and counted.
struct PairSets {
  std::vector<StatePair> train;
  std::vector<StatePair> val;  // targets at the bridge position
  std::size_t dropped = 0;
};

inline PairSets assemble_pairs(const std::vector<Trajectory>& trajectories,
                               const SplitAssignment& split, int min_states) {
  PairSets sets;
  std::map<std::string, const Trajectory*> by_user;
  for (const auto& t : trajectories) by_user[t.user_id] = &t;
  for (const auto& [user, us] : split.users) {
    auto it = by_user.find(user);
    if (it == by_user.end()) continue;
    const Trajectory& traj = *it->second;
    std::map<std::size_t, const RelativeState*> by_pos;
    for (const auto& s : traj.states) by_pos[s.session_pos] = &s;
    for (const auto& [prefix_end, target] : us.pairs) {
      auto target_it = by_pos.find(target);
      std::vector<const RelativeState*> prefix;
      for (const auto& [pos, state] : by_pos) {
        if (pos > prefix_end) break;
        prefix.push_back(state);
      }
      if (target_it == by_pos.end() ||
          prefix.size() < static_cast<std::size_t>(min_states)) {
        ++sets.dropped;
        continue;
      }
      StatePair pair;
      pair.prefix.resize(prefix.front()->vector.size(),
                         static_cast<Eigen::Index>(prefix.size()));
      for (std::size_t i = 0; i < prefix.size(); ++i)
        pair.prefix.col(static_cast<Eigen::Index>(i)) = prefix[i]->vector;
      pair.target = target_it->second->vector;
      (target == us.bridge_pos ? sets.val : sets.train).push_back(std::move(pair));
    }
  }
  return sets;
}

}  // namespace detail

inline nlohmann::json run_train_predictor(const RunConfig& cfg, bool dry_run = false) {
  Artifacts a(cfg.out_dir);
  if (dry_run)
    return {{"stage", "train-predictor"},
            {"dry_run", true},
            {"would_read", {a.trajectories(), a.split()}},
            {"would_write", {a.predictor(), a.summary("train-predictor")}}};
  require_stage(a, "build-states");

  std::uint32_t d32 = 0;
  std::vector<Trajectory> trajectories = load_trajectories(a.trajectories(), &d32);
  const Eigen::Index d = static_cast<Eigen::Index>(d32);
  SplitAssignment split = SplitAssignment::load(a.split());
  detail::PairSets pairs = detail::assemble_pairs(trajectories, split, cfg.split.min_states);

  PredictorModel model;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_cosine = std::numeric_limits<double>::quiet_NaN();
  if (cfg.arch == Arch::P3_attention || cfg.arch == Arch::P4_gru) {
    model = train_predictor(pairs.train, pairs.val, cfg.arch, d, cfg.hyper);
    if (!model.log.empty() && model.best_epoch >= 0) {
      val_loss = model.log[static_cast<std::size_t>(model.best_epoch)].val_loss;
      val_cosine = model.log[static_cast<std::size_t>(model.best_epoch)].val_cosine;
    }
  } else {
    // Closed-form predictors have nothing to fit; the checkpoint records the
    // arch and hyperparameters so forecast can reconstruct them.
    model.arch = cfg.arch;
    model.d = d;
    model.hyper = cfg.hyper;
    if (!pairs.val.empty()) {
      double loss_sum = 0.0, cos_sum = 0.0;
      for (const auto& p : pairs.val) {
        const ForecastResult r = predict(model, p.prefix);
        loss_sum += loss_on_raw(r.raw, p.target, cfg.hyper.lambda);
        cos_sum += cosine(r.normalized, p.target);
      }
      val_loss = loss_sum / static_cast<double>(pairs.val.size());
      val_cosine = cos_sum / static_cast<double>(pairs.val.size());
    }
  }
  save_predictor(model, a.predictor());

  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : model.log)
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_loss", e.val_loss},
                      {"val_cosine", e.val_cosine}});
  nlohmann::json summary{{"stage", "train-predictor"},
                         {"seed", cfg.seed},
                         {"arch", arch_tag(cfg.arch)},
                         {"train_pairs", pairs.train.size()},
                         {"val_pairs", pairs.val.size()},
                         {"dropped_pairs", pairs.dropped},
                         {"best_epoch", model.best_epoch},
                         {"val_loss", val_loss},
                         {"val_cosine", val_cosine},
                         {"epochs", epochs},
                         {"embedding_reads", 0},  // stage works from the cache only
                         {"inputs", hash_inputs({a.trajectories(), a.split()})},
                         {"outputs", {a.predictor()}}};
  write_summary(a, "train-predictor", summary);
  return summary;
}

inline nlohmann::json run_forecast(const RunConfig& cfg, bool dry_run = false) {
  Artifacts a(cfg.out_dir);
  const std::string mode = cfg.forecast_mode;
  const bool needs_checkpoint =
      mode.empty() || mode == "P3" || mode == "P4";  // learned weights required
  if (dry_run) {
    nlohmann::json reads = {a.trajectories(), a.split(), a.store(), cfg.embeddings_path};
    if (needs_checkpoint) reads.push_back(a.predictor());
    return {{"stage", "forecast"},
            {"dry_run", true},
            {"would_read", reads},
            {"would_write", {a.forecasts(), a.summary("forecast")}}};
  }
  require_stage(a, "build-states");

  std::uint32_t d32 = 0;
  std::vector<Trajectory> trajectories = load_trajectories(a.trajectories(), &d32);
  const Eigen::Index d = static_cast<Eigen::Index>(d32);
  SplitAssignment split = SplitAssignment::load(a.split());
  SessionStore store = load_sessions(a.store());
  EmbeddingStore embeddings = load_embeddings(cfg.embeddings_path);

  std::optional<PredictorModel> model;
  const bool is_baseline = mode == "static" || mode == "recent" || mode == "decay" ||
                           mode == "dep" || mode == "oracle";
  if (needs_checkpoint) {
    require_stage(a, "train-predictor");
    model = load_predictor(a.predictor());
    if (!mode.empty() && arch_tag(model->arch) != mode)
      throw Error::dependency("checkpoint holds arch " + arch_tag(model->arch) +
                              " but forecast.mode wants " + mode +
                              "; re-run `latte train-predictor`");
  } else if (!is_baseline) {
    // Closed-form arch requested directly; no checkpoint needed.
    PredictorModel closed;
    closed.arch = parse_arch(mode);
    closed.d = d;
    closed.hyper = cfg.hyper;
    model = closed;
  }
  const std::string effective_mode = mode.empty() ? arch_tag(model->arch) : mode;

  // Test rows stay masked during evaluation; val rows are this stage's
  // legitimate targets.
  SessionStore masked = masked_store(store, split, /*include_val=*/false);
  PeerIndex index = build_peer_index(masked);
  AccessAudit audit;
  audit.set_stage("forecast");

  std::map<std::string, const Trajectory*> by_user;
  for (const auto& t : trajectories) by_user[t.user_id] = &t;

  std::vector<Trajectory> forecasts;
  nlohmann::json per_user = nlohmann::json::object();
  double cos_sum = 0.0;
  std::size_t forecast_count = 0;
  std::map<std::string, std::size_t> skipped;

  for (const auto& [user, us] : split.users) {
    auto it = by_user.find(user);
    if (it == by_user.end() || it->second->states.empty()) {
      ++skipped["no_states"];
      continue;
    }
    const Trajectory& traj = *it->second;
    const auto& list = store.user_sessions(user);
    const Session& val_session = store.session(list[us.val_pos]);

    // Ground-truth target: the anchored state at the val position.
    auto [val_state, skip] = relative_state_for_session(
        user, val_session.item_id, val_session.timestamp, val_session.embedding_index,
        masked, index, embeddings, cfg.anchor, &audit);
    if (skip != StateSkip::none) {
      ++skipped[skip == StateSkip::no_peers ? "target_no_peers" : "target_degenerate"];
      continue;
    }

    Vec forecast;
    double raw_norm = 1.0;
    if (model) {
      const Mat prefix = state_matrix(traj);
      if (prefix.cols() < 2 &&
          (model->arch == Arch::P1_trend || model->arch == Arch::OLS)) {
        ++skipped["short_prefix"];
        continue;
      }
      const ForecastResult r = predict(*model, prefix);
      if (r.degenerate) {
        ++skipped["degenerate_forecast"];
        continue;
      }
      forecast = r.normalized;
      raw_norm = r.raw.norm();
    } else if (effective_mode == "dep") {
      const UnitVec u = dep_style_profile(traj);
      if (u.degenerate) {
        ++skipped["degenerate_forecast"];
        continue;
      }
      forecast = u.v;
    } else if (effective_mode == "oracle") {
      forecast = val_state->vector;
      raw_norm = val_state->residual_norm;
    } else {
      // Latent profile baselines over train-era response embeddings.
      std::vector<Vec> embs;
      std::vector<std::int64_t> times;
      for (std::size_t pos = 0; pos <= us.bridge_pos; ++pos) {
        const Session& s = store.session(list[pos]);
        embs.push_back(embeddings.row(s.embedding_index, &audit));
        times.push_back(s.timestamp);
      }
      UnitVec u;
      if (effective_mode == "static")
        u = static_profile(embs);
      else if (effective_mode == "recent")
        u = recent_profile(embs, cfg.recent_k);
      else if (effective_mode == "decay")
        u = time_decayed_profile(embs, times, cfg.half_life);
      else
        throw Error::validation("unknown forecast.mode '" + effective_mode + "'");
      if (u.degenerate) {
        ++skipped["degenerate_forecast"];
        continue;
      }
      forecast = u.v;
    }

    const double cos = cosine(forecast, val_state->vector);
    cos_sum += cos;
    ++forecast_count;
    per_user[user] = cos;

    Trajectory out;
    out.user_id = user;
    RelativeState state;
    state.vector = forecast;
    state.residual_norm = raw_norm;
    state.peer_count = 0;
    state.weight_entropy = 0.0;
    state.session_pos = us.val_pos;
    state.timestamp = val_session.timestamp;
    out.states.push_back(std::move(state));
    forecasts.push_back(std::move(out));
  }

  if (forecast_count == 0)
    throw Error::validation("forecast produced no usable predictions");

  const auto forbidden = holdout_embedding_rows(store, split, /*include_val=*/false);
  const auto violations = audit.violations("forecast", forbidden);
  if (!violations.empty())
    throw Error::internal("test embedding rows touched during forecast evaluation: " +
                          std::to_string(violations.size()) + " distinct rows");

  save_trajectories(forecasts, static_cast<std::uint32_t>(d), a.forecasts());

  nlohmann::json skipped_j = nlohmann::json::object();
  for (const auto& [k, v] : skipped) skipped_j[k] = v;
  std::vector<std::string> inputs = {a.trajectories(), a.split(), a.store(),
                                     cfg.embeddings_path};
  if (needs_checkpoint) inputs.push_back(a.predictor());
  nlohmann::json summary{{"stage", "forecast"},
                         {"seed", cfg.seed},
                         {"mode", effective_mode},
                         {"users_forecast", forecast_count},
                         {"mean_cosine", cos_sum / static_cast<double>(forecast_count)},
                         {"skipped", skipped_j},
                         {"per_user_cosine", per_user},
                         {"audit",
                          {{"stage", "forecast"},
                           {"test_rows", forbidden.size()},
                           {"violations", violations.size()}}},
                         {"inputs", hash_inputs(inputs)},
                         {"outputs", {a.forecasts()}}};
  write_summary(a, "forecast", summary);
  return summary;
}

inline nlohmann::json run_train_bridge(const RunConfig& cfg, bool dry_run = false) {
  Artifacts a(cfg.out_dir);
  if (dry_run)
    return {{"stage", "train-bridge"},
            {"dry_run", true},
            {"would_read", {a.trajectories(), a.split()}},
            {"would_write", {a.bridge(), a.summary("train-bridge")}}};
  require_stage(a, "build-states");

  std::uint32_t d32 = 0;
  std::vector<Trajectory> trajectories = load_trajectories(a.trajectories(), &d32);
  const Eigen::Index d = static_cast<Eigen::Index>(d32);
  SplitAssignment split = SplitAssignment::load(a.split());

  // Bridge inputs: each user's state at the bridge position (their last
  // train-era state).
  std::map<std::string, const Trajectory*> by_user;
  for (const auto& t : trajectories) by_user[t.user_id] = &t;
  std::vector<Vec> states;
  std::size_t skipped = 0;
  for (const auto& [user, us] : split.users) {
    auto it = by_user.find(user);
    const RelativeState* at_bridge = nullptr;
    if (it != by_user.end())
      for (const auto& s : it->second->states)
        if (s.session_pos == us.bridge_pos) at_bridge = &s;
    if (at_bridge)
      states.push_back(at_bridge->vector);
    else
      ++skipped;
  }
  if (states.empty())
    throw Error::validation("train-bridge: no bridge-position states available");

  BridgeConfig bcfg = cfg.bridge;
  if (bcfg.d != static_cast<int>(d)) bcfg.d = static_cast<int>(d);

  // Deterministic train/val split of the state list.
  std::vector<std::size_t> order(states.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(cfg.seed, stream_of("bridge-val-split"));
  rng.shuffle(order);
  const std::size_t val_n =
      static_cast<std::size_t>(cfg.bridge_val_fraction * static_cast<double>(states.size()));
  std::set<std::size_t> val_set(order.begin(),
                                order.begin() + static_cast<std::ptrdiff_t>(val_n));
  std::vector<Vec> train_states, val_states;
  for (std::size_t i = 0; i < states.size(); ++i)
    (val_set.count(i) ? val_states : train_states).push_back(states[i]);
  if (train_states.empty())
    throw Error::validation("train-bridge: validation fraction leaves no training states");

  BridgeTrainResult result = [&] {
    if (cfg.bridge_provider == "cosine") {
      const auto train_p = CosineAlignProvider::random(bcfg.h, train_states.size(), cfg.seed);
      const auto val_p = CosineAlignProvider::random(bcfg.h, std::max<std::size_t>(val_states.size(), 1), cfg.seed ^ 1);
      return train_bridge(train_states, val_states, train_p, val_p, bcfg);
    }
    const auto train_p = QuadraticAlignProvider::random(bcfg.h, train_states.size(), cfg.seed);
    const auto val_p = QuadraticAlignProvider::random(bcfg.h, std::max<std::size_t>(val_states.size(), 1), cfg.seed ^ 1);
    return train_bridge(train_states, val_states, train_p, val_p, bcfg);
  }();

  save_bridge(result.model, a.bridge());

  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : result.log)
    epochs.push_back({{"epoch", e.epoch},
                      {"train_total", e.train_total},
                      {"train_provider", e.train_provider},
                      {"val_total", e.val_total},
                      {"val_provider", e.val_provider},
                      {"val_mean_activation", e.val_mean_activation}});
  nlohmann::json summary{{"stage", "train-bridge"},
                         {"seed", cfg.seed},
                         {"provider", cfg.bridge_provider},
                         {"train_states", train_states.size()},
                         {"val_states", val_states.size()},
                         {"skipped_users", skipped},
                         {"best_epoch", result.best_epoch},
                         {"epochs", epochs},
                         {"model_version", hex64(result.model.version())},
                         {"inputs", hash_inputs({a.trajectories(), a.split()})},
                         {"outputs", {a.bridge()}}};
  write_summary(a, "train-bridge", summary);
  return summary;
}

inline nlohmann::json run_emit(const RunConfig& cfg, bool dry_run = false) {
  Artifacts a(cfg.out_dir);
  if (dry_run)
    return {{"stage", "emit"},
            {"dry_run", true},
            {"would_read", {a.bridge(), a.forecasts()}},
            {"would_write", {a.bundles() + "/<user>.json", a.summary("emit")}}};
  require_stage(a, "train-bridge");
  require_stage(a, "forecast");

  BridgeModel model = load_bridge(a.bridge());
  std::uint32_t d32 = 0;
  std::vector<Trajectory> forecasts = load_trajectories(a.forecasts(), &d32);
  if (model.config().d != static_cast<int>(d32))
    throw Error::dependency("bridge expects d=" + std::to_string(model.config().d) +
                            " but forecasts carry d=" + std::to_string(d32) +
                            "; re-run `latte train-bridge`");

  const AssembledPrompt prompt =
      assemble_prompt(cfg.emit_title, cfg.emit_description, cfg.emit_marker);
  std::filesystem::create_directories(a.bundles());

  auto safe_name = [](const std::string& user) {
    std::string out;
    for (char c : user)
      out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ||
              c == '.')
                 ? c
                 : '_';
    return out;
  };

  std::size_t emitted = 0;
  nlohmann::json bundles = nlohmann::json::array();
  for (const auto& traj : forecasts) {
    if (cfg.emit_limit > 0 && emitted >= cfg.emit_limit) break;
    if (traj.states.empty()) continue;
    const TokenEmbedding token = model.forward(traj.states.front().vector);
    const std::string path = a.bundles() + "/" + safe_name(traj.user_id) + ".json";
    emit_injection_bundle(prompt.text, prompt.marker_offset, token, path);
    bundles.push_back(path);
    ++emitted;
  }
  if (emitted == 0) throw Error::validation("emit: no forecasts to emit");

  nlohmann::json summary{{"stage", "emit"},
                         {"seed", cfg.seed},
                         {"emitted", emitted},
                         {"marker_offset", prompt.marker_offset},
                         {"marker_collisions_escaped", prompt.collision_escaped},
                         {"model_version", hex64(model.version())},
                         {"token_dim", model.config().h},
                         {"bundles", bundles},
                         {"inputs", hash_inputs({a.bridge(), a.forecasts()})},
                         {"outputs", {a.bundles()}}};
  write_summary(a, "emit", summary);
  return summary;
}

inline nlohmann::json run_diagnose(const RunConfig& cfg, bool dry_run = false) {
  Artifacts a(cfg.out_dir);
  if (dry_run)
    return {{"stage", "diagnose"},
            {"dry_run", true},
            {"would_read",
             {a.store(), cfg.embeddings_path, a.trajectories(), a.forecasts(), a.split()}},
            {"would_write", {a.summary("diagnose"), a.diagnostics_txt()}}};
  require_stage(a, "build-states");
  require_stage(a, "forecast");

  SessionStore store = load_sessions(a.store());
  EmbeddingStore embeddings = load_embeddings(cfg.embeddings_path);
  std::uint32_t d32 = 0;
  std::vector<Trajectory> trajectories = load_trajectories(a.trajectories(), &d32);
  const Eigen::Index d = static_cast<Eigen::Index>(d32);
  std::vector<Trajectory> forecasts = load_trajectories(a.forecasts());
  SplitAssignment split = SplitAssignment::load(a.split());
  PeerIndex index = build_peer_index(store);

  DiagnosticsReport report;

  // Collapse metrics over predicted vectors.
  std::vector<const Trajectory*> with_state;
  for (const auto& t : forecasts)
    if (!t.states.empty()) with_state.push_back(&t);
  if (with_state.size() < 2)
    throw Error::validation("diagnose: need at least 2 forecasts for collapse metrics");
  std::vector<std::size_t> order(with_state.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(cfg.seed, stream_of("diagnose-sampling"));
  rng.shuffle(order);

  const std::size_t n_rank = std::min(cfg.diag_vectors, with_state.size());
  Mat rank_vecs(d, static_cast<Eigen::Index>(n_rank));
  for (std::size_t i = 0; i < n_rank; ++i)
    rank_vecs.col(static_cast<Eigen::Index>(i)) =
        with_state[order[i]]->states.front().vector;
  report.effective_rank = effective_rank(rank_vecs);
  report.vectors_sampled = n_rank;

  const std::size_t n_users = std::min(cfg.diag_users, with_state.size());
  Mat user_vecs(d, static_cast<Eigen::Index>(n_users));
  for (std::size_t i = 0; i < n_users; ++i)
    user_vecs.col(static_cast<Eigen::Index>(i)) =
        with_state[order[i]]->states.front().vector;
  std::tie(report.pairwise_cosine_mean, report.pairwise_cosine_std) =
      pairwise_cosine_stats(user_vecs);
  report.users_sampled = n_users;

  // Temporal smoothness over cached trajectories.
  report.adjacent_user_cosine =
      adjacent_user_cosine(trajectories, cfg.diag_pairs, cfg.seed);
  std::size_t adjacent_total = 0;
  for (const auto& t : trajectories)
    if (t.states.size() > 1) adjacent_total += t.states.size() - 1;
  report.adjacent_pairs_sampled = std::min(cfg.diag_pairs, adjacent_total);

  // Item-content leakage on raw embeddings, time-masked.
  auto [peer_cos, peer_pairs] = same_item_peer_cosine(
      store, index,
      [&](std::size_t si) {
        return std::optional<Vec>(embeddings.row(store.session(si).embedding_index));
      },
      cfg.diag_pairs, cfg.seed, cfg.anchor.peer);
  report.same_item_peer_cosine = peer_cos;
  report.peer_pairs_sampled = peer_pairs;

  report.config_echo = {{"vectors", cfg.diag_vectors},
                        {"users", cfg.diag_users},
                        {"pairs", cfg.diag_pairs},
                        {"seed", cfg.seed}};

  nlohmann::json summary{{"stage", "diagnose"},
                         {"seed", cfg.seed},
                         {"report", report.to_json()},
                         {"inputs", hash_inputs({a.store(), cfg.embeddings_path,
                                                 a.trajectories(), a.forecasts(),
                                                 a.split()})},
                         {"outputs", {a.diagnostics_txt()}}};

  std::string text = report.table();
  if (cfg.diag_leakage_probe) {
    // Demonstration-only mode: unmasked retrieval must never feed a model.
    std::vector<std::size_t> probes;
    for (const auto& [user, us] : split.users) {
      if (probes.size() >= cfg.diag_probe_sessions) break;
      probes.push_back(store.user_sessions(user)[us.test_pos]);
    }
    const LeakageProbe probe = leakage_probe(store, index, embeddings, probes,
                                             cfg.anchor.peer);
    summary["leakage_probe"] = probe.to_json();
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "%-24s %10.4f %8zu\n%-24s %10.4f %8zu\n%-24s %10.4f\n%-24s %10.4f\n",
                  "masked_peer_cosine", probe.masked_mean_cosine, probe.masked_pairs,
                  "unmasked_peer_cosine", probe.unmasked_mean_cosine,
                  probe.unmasked_pairs, "masked_copy_rate", probe.masked_copy_rate,
                  "unmasked_copy_rate", probe.unmasked_copy_rate);
    text += buf;
  }
  write_file(a.diagnostics_txt(), text);
  write_summary(a, "diagnose", summary);
  return summary;
}

inline nlohmann::json run_simulate(const RunConfig& cfg, bool dry_run = false) {
  Artifacts a(cfg.out_dir);
  if (dry_run)
    return {{"stage", "simulate"},
            {"dry_run", true},
            {"would_read", nlohmann::json::array()},
            {"would_write", {a.summary("simulate"), a.sweep_csv()}}};
  std::filesystem::create_directories(cfg.out_dir);

  const OracleReport anchor_rep = verify_anchoring(cfg.sim_anchor);
  const OracleReport anchor_uncond = verify_anchoring(cfg.sim_anchor, false);

  DriftModelConfig drift;
  drift.d = cfg.sim_d;
  drift.T = cfg.sim_T;
  drift.sigma2 = cfg.sim_sigma2;
  drift.a = directed_vec(cfg.sim_d, cfg.sim_base_norm, cfg.seed, "sim-base");
  drift.g = directed_vec(cfg.sim_d, cfg.sim_g_norm, cfg.seed, "sim-drift");
  nlohmann::json mc = nlohmann::json::array();
  bool all_pass = anchor_rep.pass;
  for (auto est : {DriftEstimator::static_average, DriftEstimator::last_state,
                   DriftEstimator::ols}) {
    const OracleReport rep = monte_carlo_mse(est, drift, cfg.sim_mc_trials, cfg.seed);
    all_pass = all_pass && rep.pass;
    mc.push_back(rep.to_json());
  }

  const SweepResult sweep =
      crossover_sweep(cfg.sim_sweep_g, cfg.sim_sweep_sigma, cfg.sim_T, cfg.sim_d,
                      cfg.sim_sweep_trials, cfg.seed);
  const bool sweep_pass = sweep.agreement >= 0.95;
  all_pass = all_pass && sweep_pass;
  write_file(a.sweep_csv(), sweep.csv());

  nlohmann::json summary{{"stage", "simulate"},
                         {"seed", cfg.seed},
                         {"anchoring", anchor_rep.to_json()},
                         {"anchoring_unconditioned", anchor_uncond.to_json()},
                         {"drift_estimators", mc},
                         {"sweep_agreement", sweep.agreement},
                         {"sweep_cells", sweep.cells.size()},
                         {"sweep_pass", sweep_pass},
                         {"all_pass", all_pass},
                         {"outputs", {a.sweep_csv()}}};
  write_summary(a, "simulate", summary);
  return summary;
}

}  // namespace latte
