// Generates a synthetic corpus fixture (sessions.jsonl + embeddings.bin +
// truth.jsonl) from the additive response model, for tests and demos.
//
//   latte-genfix --out data/fixtures/default
//   latte-genfix --out /tmp/fix --users 32 --iid --copycats 4 --seed 9

#include "latte/synthcorpus.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"synthetic corpus generator"};
  latte::SyntheticCorpusSpec spec;
  std::string out_dir;
  bool iid = false;

  app.add_option("--out", out_dir, "output directory")->required();
  app.add_option("--dim", spec.d, "embedding dimension");
  app.add_option("--users", spec.target_users, "modeled users");
  app.add_option("--peers", spec.peer_users, "peer-only users");
  app.add_option("--items", spec.items, "catalog items");
  app.add_option("--sessions", spec.sessions_per_user, "sessions per modeled user");
  app.add_option("--reviews", spec.peer_reviews_per_item,
                 "peer reviews per item per round");
  app.add_option("--walk-step", spec.walk_step, "drift step magnitude");
  app.add_option("--noise-sd", spec.noise_sd, "response noise stddev");
  app.add_option("--item-scale", spec.item_scale, "item offset magnitude");
  app.add_option("--copycats", spec.copycats,
                 "near-duplicate 'future' users for leakage probes");
  app.add_option("--seed", spec.seed, "generator seed");
  app.add_flag("--iid", iid, "jitter around a fixed base instead of drifting");

  CLI11_PARSE(app, argc, argv);
  spec.random_walk = !iid;

  try {
    const latte::SyntheticCorpus corpus = latte::gen_additive(spec);
    latte::write_corpus(corpus, out_dir);
    std::printf("%s: %zu sessions, %zu users, %zu embedding rows (d=%d)\n",
                out_dir.c_str(), corpus.store.size(), corpus.store.users().size(),
                static_cast<std::size_t>(corpus.embeddings.count()),
                static_cast<int>(spec.d));
    return 0;
  } catch (const latte::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == latte::Error::Kind::validation ? 2 : 1;
  }
}
