// Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any fails.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <copyattack/cli.hpp>
#include <copyattack/harness.hpp>
#include <copyattack/synthetic.hpp>

#include "../tests/support.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>

using namespace copyattack;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and limits.
constexpr double kClipSeconds = 0.001;
constexpr int kTreePairs = 200;
constexpr double kTreeSeconds = 30;
constexpr int kSoftmaxCases = 10000;
constexpr double kSoftmaxTol = 1e-9;
constexpr double kSoftmaxSeconds = 5;
constexpr int kFactorPaths = 1000;
constexpr double kFactorTol = 1e-9;
constexpr int kUniformDraws = 100000;
constexpr int kUniformArms = 4;
constexpr double kSigmas = 3.0;
constexpr double kSamplingSeconds = 60;
constexpr double kGradientTol = 1e-4;
constexpr double kGradientSeconds = 60;
constexpr int kMetricMaxLength = 8;
constexpr double kMetricSeconds = 5;
constexpr int kBanditEpisodes = 500;
constexpr double kBanditProbability = 0.9;
constexpr double kBanditSeconds = 60;
constexpr double kWinRate = 0.70;
constexpr double kRandomBand = 0.02;  // |mean HR@20(random) - mean HR@20(no_attack)|
constexpr double kTrendSeconds = 15 * 60;
constexpr int kSpeedLeaves = 100000;
constexpr int kSpeedActions = 1000;
constexpr double kSpeedup = 10.0;
constexpr double kSpeedSeconds = 120;
constexpr double kDeterminismSeconds = 20 * 60;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... xs) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, xs...);
  return buf;
}

std::vector<UserId> iota_users(int n) {
  std::vector<UserId> u(static_cast<std::size_t>(n));
  std::iota(u.begin(), u.end(), 0);
  return u;
}

MatrixXd random_points(int n, int e, Rng& rng) {
  return MatrixXd::NullaryExpr(n, e, [&] { return standard_normal(rng); });
}

// ---------------------------------------------------------------------------

Outcome clip_example() {
  const Profile raw{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  const auto t0 = Clock::now();
  const auto out = craft_profile(raw, 5, 0.5);
  const double s = seconds_since(t0);
  const bool ok = out == Profile{3, 4, 5, 6, 7};
  std::string got;
  for (ItemId i : out) got += "v" + std::to_string(i) + " ";
  return {ok && s < kClipSeconds, fmt("got %s(%.1f us)", got.c_str(), s * 1e6)};
}

Outcome tree_structure() {
  const auto t0 = Clock::now();
  Rng rng(20240);
  std::vector<std::pair<int, int>> pairs;
  // Exact powers, where the internal-node formula must hold.
  for (int c = 2; c <= 8; ++c) {
    for (long long n = c; n <= 10000; n *= c) pairs.emplace_back(static_cast<int>(n), c);
  }
  while (static_cast<int>(pairs.size()) < kTreePairs) {
    const int c = 2 + static_cast<int>(uniform_index(rng, 7));
    // log-uniform n in [c, 1e4]
    const double lo = std::log(c), hi = std::log(10000.0);
    const int n = std::clamp(static_cast<int>(std::exp(lo + uniform01(rng) * (hi - lo))), c, 10000);
    pairs.emplace_back(n, c);
  }
  int bad = 0, powers = 0;
  std::string first;
  for (auto [n, c] : pairs) {
    const auto users = iota_users(n);
    const auto t = build_tree(random_points(n, 4, rng), users, c, rng());
    const int d = static_cast<int>(std::ceil(std::log(n) / std::log(c) - 1e-12));
    bool ok = t.depth() == d;
    for (int id : t.internal_nodes()) {
      int lo = INT32_MAX, hi = 0;
      for (int ch : t.node(id).children) {
        lo = std::min(lo, t.subtree_leaves(ch));
        hi = std::max(hi, t.subtree_leaves(ch));
      }
      ok = ok && hi - lo <= 1;
    }
    long long full = 1;
    for (int i = 0; i < d; ++i) full *= c;
    if (full == n) {
      ++powers;
      ok = ok && t.internal_count() == (full - 1) / (c - 1);
    }
    std::vector<UserId> leaves;
    for (int id : t.leaves()) leaves.push_back(t.node(id).user);
    std::sort(leaves.begin(), leaves.end());
    ok = ok && leaves == users;
    if (!ok && bad++ == 0) first = fmt(" first failure n=%d c=%d", n, c);
  }
  const double s = seconds_since(t0);
  return {bad == 0 && s < kTreeSeconds,
          fmt("%zu pairs (%d exact powers), %d violations%s (%.1f s)", pairs.size(), powers, bad, first.c_str(), s)};
}

Outcome masked_softmax_cases() {
  const auto t0 = Clock::now();
  Rng rng(31);
  double worst = 0.0;
  int leaks = 0;
  for (int i = 0; i < kSoftmaxCases; ++i) {
    const int n = 1 + static_cast<int>(uniform_index(rng, 64));
    const double scale = std::pow(10.0, -2.0 + 5.0 * uniform01(rng));  // up to 1e3
    const VectorXd logits = VectorXd::NullaryExpr(n, [&] { return scale * standard_normal(rng); });
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n));
    for (auto& m : mask) m = uniform01(rng) < 0.5;
    mask[uniform_index(rng, static_cast<std::uint64_t>(n))] = 1;
    const VectorXd p = masked_softmax(logits, mask);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      if (mask[static_cast<std::size_t>(j)]) {
        sum += p[j];
      } else if (p[j] != 0.0) {
        ++leaks;
      }
    }
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  bool all_masked_errors = false;
  try {
    const std::vector<std::uint8_t> none(5, 0);
    masked_softmax(VectorXd::Zero(5), none);
  } catch (const ConfigError&) {
    all_masked_errors = true;
  }
  const double s = seconds_since(t0);
  return {worst <= kSoftmaxTol && leaks == 0 && all_masked_errors && s < kSoftmaxSeconds,
          fmt("max |sum-1| = %.2e, nonzero masked entries %d, all-masked error %s (%.2f s)", worst, leaks,
              all_masked_errors ? "raised" : "MISSING", s)};
}

Outcome path_sampling() {
  const auto t0 = Clock::now();
  Rng rng(41);
  // Factorization on a depth-3 tree with a random mask.
  const int n = 200, e = 6;
  const MatrixXd emb = random_points(n, e, rng);
  const auto tree = build_tree(emb, iota_users(n), 6, 3);
  PolicyConfig pc;
  pc.embedding_dim = pc.state_dim = e;
  pc.init_stddev = 0.5;
  const auto bundle = PolicyBundle::create(tree, pc, 5);
  std::vector<Profile> profiles(static_cast<std::size_t>(n));
  std::set<UserId> holders;
  for (UserId u = 0; u < n; ++u) {
    profiles[static_cast<std::size_t>(u)] = {1};
    if (uniform01(rng) < 0.3) {
      profiles[static_cast<std::size_t>(u)].push_back(7);
      holders.insert(u);
    }
  }
  const auto mask = apply_mask(tree, 7, profiles);
  double worst = 0.0;
  int masked_draws = 0;
  for (int i = 0; i < kFactorPaths; ++i) {
    const VectorXd q = VectorXd::NullaryExpr(e, [&] { return standard_normal(rng); });
    const VectorXd x = VectorXd::NullaryExpr(e, [&] { return standard_normal(rng); });
    const auto s = select_path(tree, mask, bundle, q, x, rng);
    if (!holders.count(s.user)) ++masked_draws;
    double sum = 0.0;
    for (const auto& st : s.steps) {
      const auto& m = bundle.node_policies[static_cast<std::size_t>(tree.internal_index(st.node))];
      sum += std::log(masked_softmax(m.forward(selection_input(q, x)), st.eligible)[st.branch]);
    }
    worst = std::max(worst, std::abs(s.log_prob - sum));
    worst = std::max(worst, std::abs(path_log_prob(tree, bundle, q, x, s.steps) - sum));
  }
  // Uniform depth-1 tree: zero parameters give equal logits.
  const auto flat = ClusterTree::flat(iota_users(kUniformArms));
  auto uniform = PolicyBundle::create(flat, pc, 1).zeros_like();
  std::vector<int> hits(kUniformArms, 0);
  std::vector<Profile> half(kUniformArms, Profile{1});
  half[1] = {2};  // user 1 lacks item 1 under the second mask
  const auto masked = apply_mask(flat, 1, half);
  int masked_hits = 0;
  const VectorXd zq = VectorXd::Zero(e);
  for (int i = 0; i < kUniformDraws; ++i) {
    ++hits[static_cast<std::size_t>(select_path(flat, TreeMask::all(flat), uniform, zq, zq, rng).user)];
    masked_hits += select_path(flat, masked, uniform, zq, zq, rng).user == 1;
  }
  const double p = 1.0 / kUniformArms;
  const double sigma = std::sqrt(kUniformDraws * p * (1 - p));
  double worst_z = 0.0;
  for (int h : hits) worst_z = std::max(worst_z, std::abs(h - kUniformDraws * p) / sigma);
  const double s = seconds_since(t0);
  masked_draws += masked_hits;
  return {worst <= kFactorTol && worst_z <= kSigmas && masked_draws == 0 && s < kSamplingSeconds,
          fmt("max log-prob gap %.2e over %d paths, worst leaf |z| %.2f over %d draws, masked draws %d (%.1f s)",
              worst, kFactorPaths, worst_z, kUniformDraws, masked_draws, s)};
}

Outcome gradient_check() {
  const auto t0 = Clock::now();
  const int n = 8, e = 4;
  Rng rng(21);
  const MatrixXd emb = random_points(n, e, rng);
  const auto tree = build_tree(emb, iota_users(n), 3, 21);
  PolicyConfig pc;
  pc.embedding_dim = pc.state_dim = e;
  double worst = 0.0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto b = PolicyBundle::create(tree, pc, seed);
    Rng r(seed * 31);
    auto traj = testing::synthetic_trajectory(tree, TreeMask::all(tree), b, emb, 6, r);
    traj.steps[0].path.clear();
    std::vector<double> adv;
    for (std::size_t t = 0; t < traj.steps.size(); ++t) adv.push_back(standard_normal(r));
    worst = std::max(worst, testing::max_gradient_error(b, tree, traj, adv));
  }
  const double s = seconds_since(t0);
  return {tree.depth() == 2 && tree.leaf_count() == 8 && worst <= kGradientTol && s < kGradientSeconds,
          fmt("depth %d, %d leaves, max relative error %.2e (%.2f s)", tree.depth(), tree.leaf_count(), worst, s)};
}

Outcome metric_oracles() {
  const auto t0 = Clock::now();
  const auto r = testing::exhaustive_metric_check(kMetricMaxLength);
  const double spot = ndcg_at(3, 20);
  const double s = seconds_since(t0);
  return {r.mismatches == 0 && spot == 0.5 && s < kMetricSeconds,
          fmt("%lld cases, %lld mismatches, NDCG at rank 3 = %.17g (%.2f s)", r.cases, r.mismatches, spot, s)};
}

Outcome bandit() {
  const auto t0 = Clock::now();
  const ItemId target = 0;
  std::vector<Profile> profiles;
  for (int u = 0; u < 4; ++u) profiles.push_back({target, 100 + u});
  const std::vector<ItemId> items{target};
  const auto emb = testing::toy_embeddings(4, items, 4, 3);
  SourceView source{profiles, &emb};
  const auto tree = ClusterTree::flat(iota_users(4));
  PolicyConfig pc;
  pc.embedding_dim = pc.state_dim = 4;
  EpisodeConfig cfg;
  cfg.budget = 1;
  cfg.query_interval = 1;
  cfg.random_first_action = false;
  cfg.crafting = CraftMode::fixed;
  int converged = 0;
  std::string probs;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto b = PolicyBundle::create(tree, pc, seed);
    testing::ArmEnvironment env(target, 102);
    LearnerState st;
    Rng rng(seed);
    train_agent(env, tree, b, st, source, items, kBanditEpisodes, cfg, rng);
    const VectorXd p =
        masked_softmax(b.node_policies[0].forward(selection_input(emb.item(target), VectorXd::Zero(4))));
    const double paying = p[tree.leaf_of(2) - 1];
    converged += paying > kBanditProbability;
    probs += fmt("%.3f ", paying);
  }
  const double s = seconds_since(t0);
  return {converged == 3 && s < kBanditSeconds,
          fmt("paying-arm probability %sover 3 seeds (%.1f s)", probs.c_str(), s)};
}

// ---------------------------------------------------------------------------

/// Desk-scale synthetic benchmark shared by the trend and ablation criteria.
struct Benchmark {
  std::map<std::string, std::vector<double>> uplift;  // HR@20 after - before, per (seed, item)
  std::map<std::string, double> avg_items;
  double seconds = 0.0;
  int items = 0, seeds = 0;

  double mean(const std::string& m) const {
    const auto& v = uplift.at(m);
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  }
  double win(const std::string& a, const std::string& b) const { return pairwise_win_rate(uplift.at(a), uplift.at(b)); }
};

const Benchmark& benchmark() {
  static std::optional<Benchmark> cached;
  if (cached) return *cached;
  const auto t0 = Clock::now();
  Benchmark out;
  const auto bench = generate_synthetic(SyntheticConfig{});
  const auto mapping = align_items(bench.target_catalog, bench.source_catalog, AlignKey::name);
  PrepareConfig pc;
  pc.target_items = 10;
  pc.seed = 3;
  pc.split.rng_seed = 3;
  const auto prep = prepare_data(bench.target_log, bench.source_log, mapping, pc);
  auto model = fit_target(prep.train_profiles(), prep.data.item_count(), TargetConfig{});
  MfConfig mc;
  mc.epochs = 50;
  mc.rng_seed = 5;
  auto emb = pretrain_source_embeddings(prep.data, mc);
  const int n = prep.data.source.user_count();
  auto tree = build_source_tree(emb, n, branching_for_depth(n, 3), 9);
  const auto ctx = make_attack_context(prep, std::move(model), std::move(emb), std::move(tree), 50, 5, 4, 9);
  ExperimentConfig ec;
  ec.episodes_per_item = 100;
  ec.policy.learning_rate = 0.01;
  ec.seeds = {1, 2, 3};
  ec.episode.budget = 30;
  out.items = static_cast<int>(ctx.target_items.size());
  out.seeds = static_cast<int>(ec.seeds.size());
  for (const std::string m : {"no_attack", "random", "target100", "copyattack", "no_craft", "no_mask"}) {
    double items = 0.0;
    int count = 0;
    for (auto seed : ec.seeds) {
      for (const auto& r : run_method(ctx, m, ctx.target_items, ctx.tree, ec, seed)) {
        const auto at20 = std::find_if(r.uplift.begin(), r.uplift.end(), [](const UpliftRow& u) { return u.k == 20; });
        out.uplift[m].push_back(at20->hr_after - at20->hr_before);
        items += r.avg_items();
        ++count;
      }
    }
    out.avg_items[m] = items / count;
    std::printf("  %-10s mean HR@20 uplift %.4f  avg items %.1f  (t=%.0f s)\n", m.c_str(), out.mean(m), out.avg_items[m],
                seconds_since(t0));
    std::fflush(stdout);
  }
  out.seconds = seconds_since(t0);
  cached = out;
  return *cached;
}

Outcome attack_trend() {
  const auto& b = benchmark();
  const double w1 = b.win("copyattack", "target100");
  const double w2 = b.win("target100", "random");
  const double gap = std::abs(b.mean("random") - b.mean("no_attack"));
  const bool ok = b.items >= 10 && b.seeds == 3 && b.mean("copyattack") > b.mean("target100") &&
                  b.mean("target100") > b.mean("random") && w1 >= kWinRate && w2 >= kWinRate && gap <= kRandomBand &&
                  b.seconds < kTrendSeconds;
  return {ok, fmt("%d items x %d seeds; copyattack %.4f > target100 %.4f (win %.2f) > random %.4f (win %.2f); "
                  "|random - no_attack| = %.4f (%.0f s)",
                  b.items, b.seeds, b.mean("copyattack"), b.mean("target100"), w1, b.mean("random"), w2, gap,
                  b.seconds)};
}

Outcome ablation() {
  const auto& b = benchmark();
  const bool ok = b.mean("copyattack") >= b.mean("no_mask") && b.mean("copyattack") >= b.mean("no_craft") &&
                  b.avg_items.at("no_craft") > b.avg_items.at("copyattack") && b.seconds < kTrendSeconds;
  return {ok, fmt("copyattack %.4f vs no_mask %.4f (win %.2f), no_craft %.4f (win %.2f); avg items no_craft %.1f > "
                  "copyattack %.1f (%.0f s with the trend run)",
                  b.mean("copyattack"), b.mean("no_mask"), b.win("copyattack", "no_mask"), b.mean("no_craft"),
                  b.win("copyattack", "no_craft"), b.avg_items.at("no_craft"), b.avg_items.at("copyattack"),
                  b.seconds)};
}

Outcome speedup() {
  const auto t0 = Clock::now();
  Rng rng(51);
  const int e = 8;
  const MatrixXd emb = random_points(kSpeedLeaves, e, rng);
  const auto users = iota_users(kSpeedLeaves);
  const auto tree = build_tree(emb, users, branching_for_depth(kSpeedLeaves, 3), 7, 10);
  const auto flat = ClusterTree::flat(users);
  PolicyConfig pc;
  pc.embedding_dim = pc.state_dim = e;
  auto time_actions = [&](const ClusterTree& t) {
    const auto b = PolicyBundle::create(t, pc, 3);
    const auto mask = TreeMask::all(t);
    Rng r(9);
    const VectorXd q = VectorXd::NullaryExpr(e, [&] { return standard_normal(r); });
    const VectorXd x = VectorXd::NullaryExpr(e, [&] { return standard_normal(r); });
    long long sink = 0;
    const auto s0 = Clock::now();
    for (int i = 0; i < kSpeedActions; ++i) sink += select_path(t, mask, b, q, x, r).user;
    const double per = seconds_since(s0) / kSpeedActions;
    if (sink < 0) std::puts("");
    return per;
  };
  const double tree_s = time_actions(tree);
  const double flat_s = time_actions(flat);
  const double ratio = flat_s / tree_s;
  const double s = seconds_since(t0);
  return {ratio >= kSpeedup && s < kSpeedSeconds,
          fmt("tree (c=%d, d=%d) %.1f us/action, flat %.1f us/action, speedup %.0fx (%.1f s)", tree.branching(),
              tree.depth(), tree_s * 1e6, flat_s * 1e6, ratio, s)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Every stage of the command-line pipeline into `root`; returns the run directory.
fs::path run_pipeline(const fs::path& root, std::string& error) {
  fs::remove_all(root);
  std::ostringstream out, err;
  if (run_cli({"synth", "--out", (root / "data").string()}, out, err) != 0) {
    error = err.str();
    return {};
  }
  const fs::path conf = root / "run.conf";
  // Same output_dir string for both runs so the config hash matches.
  std::ofstream(conf) << slurp(root / "data" / "pipeline.conf") << "output_dir=" << (root / "runs").string() << "\n"
                      << "seed=11\nattack_items=2\nepisodes_per_item=5\nseeds=1,2\norganic_users=200\n";
  const std::vector<std::vector<std::string>> stages{{"prepare"},
                                                     {"train-target"},
                                                     {"pretrain-embeddings"},
                                                     {"build-tree"},
                                                     {"attack", "--method", "copyattack"},
                                                     {"report", "--suite", "comparison"}};
  for (auto args : stages) {
    args.insert(args.begin() + 1, {"--config", conf.string()});
    if (run_cli(args, out, err) != 0) {
      error = args[0] + ": " + err.str();
      return {};
    }
  }
  return *fs::directory_iterator(root / "runs");
}

Outcome determinism() {
  const auto t0 = Clock::now();
  const auto base = fs::temp_directory_path() / "copyattack_acceptance";
  std::string error;
  // Run into the same path twice, keeping the first run's CSVs aside.
  const auto first = run_pipeline(base / "run", error);
  if (first.empty()) return {false, "pipeline failed: " + error};
  std::map<std::string, std::string> csvs;
  for (const auto& f : fs::directory_iterator(first)) {
    if (f.path().extension() == ".csv") csvs[f.path().filename().string()] = slurp(f.path());
  }
  const auto second = run_pipeline(base / "run", error);
  if (second.empty()) return {false, "second pipeline failed: " + error};
  int differ = 0;
  std::string names;
  for (const auto& [name, text] : csvs) {
    names += name + " ";
    differ += slurp(second / name) != text;
  }
  const bool same_dir = first.filename() == second.filename();
  fs::remove_all(base);
  const double s = seconds_since(t0);
  return {csvs.size() >= 4 && differ == 0 && same_dir && s < kDeterminismSeconds,
          fmt("%zu CSVs compared (%s), %d differ, run directory %s (%.0f s)", csvs.size(), names.c_str(), differ,
              same_dir ? "stable" : "CHANGED", s)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"clip worked example", clip_example},
      {"tree structure", tree_structure},
      {"masked softmax", masked_softmax_cases},
      {"path factorization and sampling", path_sampling},
      {"policy gradient check", gradient_check},
      {"metric oracles", metric_oracles},
      {"bandit convergence", bandit},
      {"attack effectiveness trend", attack_trend},
      {"ablation trend", ablation},
      {"hierarchical speedup", speedup},
      {"pipeline determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    try {
      only.insert(std::stoi(argv[i]));
    } catch (const std::exception&) {
      std::fprintf(stderr, "usage: acceptance [criterion numbers 1-%zu]\n", criteria.size());
      return 2;
    }
  }
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
