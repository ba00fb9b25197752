#include <copyattack/harness.hpp>

#include <copyattack/checkpoint.hpp>
#include <copyattack/hash.hpp>
#include <copyattack/metrics.hpp>
#include <copyattack/random.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

namespace copyattack {

using nlohmann::json;

std::vector<Profile> PreparedData::train_profiles() const {
  return group_by_user(split.train, data.target.user_count());
}

namespace {

void hash_ints(Fnv1a& h, std::span<const int> values) {
  h.update(std::to_string(values.size()));
  h.update(":");
  for (int v : values) {
    h.update(std::to_string(v));
    h.update(",");
  }
  h.update(";");
}

std::uint64_t name_tag(const std::string& name) {
  Fnv1a h;
  h.update(name);
  return h.value();
}

void hash_interactions(Fnv1a& h, std::span<const Interaction> xs) {
  h.update(std::to_string(xs.size()));
  h.update("|");
  for (const auto& x : xs) {
    h.update(std::to_string(x.user));
    h.update(" ");
    h.update(std::to_string(x.item));
    h.update(",");
  }
}

}  // namespace

std::string dataset_fingerprint(const CrossDomainDataset& data, const DatasetSplit& split,
                                std::span<const ItemId> target_items) {
  Fnv1a h;
  for (const auto& name : data.items.names()) {
    h.update(name);
    h.update("\n");
  }
  for (const auto* domain : {&data.target, &data.source}) {
    h.update("domain");
    for (const auto& p : domain->profiles) hash_ints(h, p);
  }
  hash_ints(h, data.overlap);
  hash_interactions(h, split.train);
  hash_interactions(h, split.validation);
  hash_interactions(h, split.test);
  hash_ints(h, target_items);
  return h.hex();
}

PreparedData prepare_data(std::span<const InteractionRecord> target_log,
                          std::span<const InteractionRecord> source_log,
                          const OverlapMapping& mapping, const PrepareConfig& config) {
  const auto target_kept = filter_by_rating(target_log, config.min_rating);
  const auto source_kept = filter_by_rating(source_log, config.min_rating);
  if (target_kept.empty() || source_kept.empty()) {
    throw DataError("no interaction survives the rating filter (min_rating " +
                    std::to_string(config.min_rating) + ")");
  }
  PreparedData out;
  out.data = make_cross_domain(build_profiles(target_kept), build_profiles(source_kept), mapping);
  out.split = split_dataset(out.data, config.split);
  out.target_items = select_target_items(out.data, out.split.train, config.target_items,
                                         config.max_target_degree, derive_seed(config.seed, 11));
  out.dataset_hash = dataset_fingerprint(out.data, out.split, out.target_items);
  return out;
}

namespace {

json domain_json(const Domain& d) { return {{"users", d.users.names()}, {"profiles", d.profiles}}; }

Domain domain_from(const json& j) {
  Domain d;
  for (const auto& name : j.at("users")) d.users.intern(name.get<std::string>());
  d.profiles = j.at("profiles").get<std::vector<Profile>>();
  if (static_cast<int>(d.profiles.size()) != d.users.size()) throw IntegrityError("prepared bundle: profile count mismatch");
  return d;
}

json interactions_json(std::span<const Interaction> xs) {
  json a = json::array();
  for (const auto& x : xs) a.push_back({x.user, x.item});
  return a;
}

std::vector<Interaction> interactions_from(const json& j) {
  std::vector<Interaction> xs;
  xs.reserve(j.size());
  for (const auto& p : j) xs.push_back({p.at(0).get<int>(), p.at(1).get<int>()});
  return xs;
}

}  // namespace

void save_prepared(const PreparedData& prepared, const std::filesystem::path& path) {
  const auto& d = prepared.data;
  json body = {{"items", d.items.names()},
               {"target", domain_json(d.target)},
               {"source", domain_json(d.source)},
               {"overlap", d.overlap},
               {"overlap_source_keys", d.overlap_source_keys},
               {"train", interactions_json(prepared.split.train)},
               {"validation", interactions_json(prepared.split.validation)},
               {"test", interactions_json(prepared.split.test)},
               {"cold_users", prepared.split.cold_users},
               {"target_items", prepared.target_items},
               {"dataset_hash", prepared.dataset_hash}};
  write_json_file(path, seal(std::move(body), "copyattack.prepared"));
}

PreparedData load_prepared(const std::filesystem::path& path) {
  const json body = unseal(read_json_file(path), "copyattack.prepared");
  PreparedData out;
  try {
    for (const auto& name : body.at("items")) out.data.items.intern(name.get<std::string>());
    out.data.target = domain_from(body.at("target"));
    out.data.source = domain_from(body.at("source"));
    out.data.overlap = body.at("overlap").get<std::vector<ItemId>>();
    out.data.overlap_source_keys = body.at("overlap_source_keys").get<std::vector<std::string>>();
    out.split.train = interactions_from(body.at("train"));
    out.split.validation = interactions_from(body.at("validation"));
    out.split.test = interactions_from(body.at("test"));
    out.split.cold_users = body.at("cold_users").get<std::vector<UserId>>();
    out.target_items = body.at("target_items").get<std::vector<ItemId>>();
    out.dataset_hash = body.at("dataset_hash").get<std::string>();
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("prepared bundle: ") + e.what());
  }
  if (dataset_fingerprint(out.data, out.split, out.target_items) != out.dataset_hash) {
    throw IntegrityError("prepared bundle: dataset hash mismatch in " + path.string());
  }
  return out;
}

EmbeddingTable pretrain_source_embeddings(const CrossDomainDataset& data, const MfConfig& config) {
  const auto xs = flatten(data.source.profiles);
  return train_mf(xs, config);
}

int branching_for_depth(int n, int depth) {
  if (n < 2 || depth < 1) throw ConfigError("branching_for_depth needs n >= 2 and depth >= 1");
  auto reaches = [&](long long c) {
    long long p = 1;
    for (int i = 0; i < depth; ++i) {
      p *= c;
      if (p >= n) return true;
    }
    return p >= n;
  };
  long long c = std::max(2LL, std::llround(std::pow(static_cast<double>(n), 1.0 / depth)));
  while (!reaches(c)) ++c;
  while (c > 2 && reaches(c - 1)) --c;
  return static_cast<int>(std::min<long long>(c, n));
}

ClusterTree build_source_tree(const EmbeddingTable& embeddings, int source_users, int branching,
                              std::uint64_t seed) {
  std::vector<UserId> users(static_cast<std::size_t>(source_users));
  std::iota(users.begin(), users.end(), 0);
  MatrixXd points(source_users, embeddings.dim());
  for (UserId u = 0; u < source_users; ++u) {
    if (!embeddings.user_row(u)) {
      throw DataError("source user " + std::to_string(u) + " has no embedding");
    }
    points.row(u) = embeddings.user(u).transpose();
  }
  return build_tree(points, users, branching, seed);
}

// ---------------------------------------------------------------------------

std::vector<UserId> sample_organic_users(const TargetModel& model, int organic_count, ItemId target,
                                         int count, std::uint64_t seed) {
  std::vector<UserId> pool;
  for (UserId u = 0; u < std::min(organic_count, model.user_count()); ++u) {
    const auto& p = model.profile(u);
    if (!p.empty() && std::find(p.begin(), p.end(), target) == p.end()) pool.push_back(u);
  }
  Rng rng(seed);
  shuffle(pool, rng);
  if (pool.size() > static_cast<std::size_t>(std::max(count, 0))) pool.resize(static_cast<std::size_t>(std::max(count, 0)));
  std::sort(pool.begin(), pool.end());
  return pool;
}

UpliftResult promotion_uplift(const TargetModel& before, const TargetModel& after, ItemId target,
                              std::span<const UserId> users, const UpliftConfig& config) {
  if (users.empty()) throw DataError("promotion_uplift: empty organic user sample");
  const std::size_t nk = config.k_values.size();
  std::vector<double> hb(nk, 0), ha(nk, 0), nb(nk, 0), na(nk, 0);
  const std::uint64_t candidate_seed = derive_seed(config.seed, static_cast<std::uint64_t>(target));
  for (UserId u : users) {
    const ItemId exclude[] = {target};
    auto candidates = sample_negatives(before, u, config.negatives, exclude, candidate_seed);
    candidates.push_back(target);
    const std::size_t pb = *rank_position(before.rank(u, candidates), target);
    const std::size_t pa = *rank_position(after.rank(u, candidates), target);
    for (std::size_t k = 0; k < nk; ++k) {
      const int kk = config.k_values[k];
      hb[k] += hit_at(pb, kk);
      ha[k] += hit_at(pa, kk);
      nb[k] += ndcg_at(pb, kk);
      na[k] += ndcg_at(pa, kk);
    }
  }
  UpliftResult out;
  out.users.assign(users.begin(), users.end());
  const double n = static_cast<double>(users.size());
  out.saturated = nk > 0;
  for (std::size_t k = 0; k < nk; ++k) {
    out.rows.push_back({config.k_values[k], hb[k] / n, ha[k] / n, nb[k] / n, na[k] / n});
    out.saturated = out.saturated && hb[k] == n;
  }
  return out;
}

// ---------------------------------------------------------------------------

json ExperimentConfig::to_json() const {
  return {
      {"policy",
       {{"embedding_dim", policy.embedding_dim},
        {"state_dim", policy.state_dim},
        {"hidden_dim", policy.hidden_dim},
        {"init_stddev", policy.init_stddev},
        {"discount", policy.discount},
        {"learning_rate", policy.learning_rate},
        {"optimizer", to_string(policy.optimizer)},
        {"baseline_decay", policy.baseline_decay}}},
      {"episode",
       {{"budget", episode.budget},
        {"query_interval", episode.query_interval},
        {"k", episode.k},
        {"success_threshold", episode.success_threshold},
        {"random_first_action", episode.random_first_action},
        {"goal", episode.goal == AttackGoal::promote ? "promote" : "demote"}}},
      {"episodes_per_item", episodes_per_item},
      {"uplift",
       {{"k_values", uplift.k_values},
        {"organic_users", uplift.organic_users},
        {"negatives", uplift.negatives},
        {"seed", uplift.seed}}},
      {"seeds", seeds},
      {"branching", branching},
      {"depths", depths},
      {"budgets", budgets},
      {"items_per_decile", items_per_decile},
  };
}

std::string ExperimentConfig::hash() const { return fnv1a_hex(to_json().dump()); }

std::string to_string(Suite suite) {
  switch (suite) {
    case Suite::comparison: return "comparison";
    case Suite::depth_sweep: return "depth_sweep";
    case Suite::budget_sweep: return "budget_sweep";
    case Suite::popularity: return "popularity";
  }
  return "?";
}

Suite parse_suite(const std::string& name) {
  for (auto s : {Suite::comparison, Suite::depth_sweep, Suite::budget_sweep, Suite::popularity}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown suite '" + name +
                    "' (valid: comparison, depth_sweep, budget_sweep, popularity)");
}

std::vector<std::string> comparison_methods() {
  std::vector<std::string> out{"no_attack"};
  for (auto m : all_attack_methods()) out.push_back(to_string(m));
  return out;
}

std::vector<AttackReport> run_method(const AttackContext& context, const std::string& method,
                                     std::span<const ItemId> items, const ClusterTree& tree,
                                     const ExperimentConfig& config, std::uint64_t seed) {
  RecommenderEnvironment env(context.checkpoint, context.pretend);
  const SourceView source = context.source();
  Rng rng(derive_seed(seed, name_tag(method)));

  auto finish = [&](ItemId item, EpisodeResult episode) {
    AttackReport r;
    r.method = method;
    r.target_item = item;
    r.budget = config.episode.budget;
    r.seed = seed;
    r.episode = std::move(episode);
    env.model().synchronize();
    UpliftConfig u = config.uplift;
    u.seed = derive_seed(seed, 0x5eed0000ULL + static_cast<std::uint64_t>(item));
    const auto users = sample_organic_users(*context.checkpoint, context.organic_count, item,
                                            u.organic_users, derive_seed(u.seed, 1));
    const auto up = promotion_uplift(*context.checkpoint, env.model(), item, users, u);
    r.uplift = up.rows;
    r.saturated = up.saturated;
    return r;
  };

  std::vector<AttackReport> reports;
  if (method == "no_attack") {
    for (ItemId item : items) {
      env.reset();
      EpisodeResult empty;
      empty.termination = "budget";
      reports.push_back(finish(item, std::move(empty)));
    }
    return reports;
  }

  const AttackMethod m = parse_attack_method(method);
  if (!is_learned(m)) {
    for (ItemId item : items) {
      auto ep = baseline_attack(m, env, tree, source, item, config.episode, rng);
      reports.push_back(finish(item, std::move(ep)));
    }
    return reports;
  }

  std::vector<UserId> all_users(context.source_profiles.size());
  std::iota(all_users.begin(), all_users.end(), 0);
  const ClusterTree flat = uses_flat_tree(m) ? ClusterTree::flat(all_users) : ClusterTree{};
  const ClusterTree& t = uses_flat_tree(m) ? flat : tree;
  const EpisodeConfig ep = method_episode_config(m, config.episode);
  PolicyBundle bundle = PolicyBundle::create(t, config.policy, derive_seed(seed, 0xb0));
  LearnerState learner;
  train_agent(env, t, bundle, learner, source, items, config.episodes_per_item, ep, rng);
  for (ItemId item : items) {
    const TreeMask mask = ep.use_mask ? apply_mask(t, item, source.profiles) : TreeMask::all(t);
    auto result = run_episode(env, t, mask, &bundle, source, item, ep, rng);
    reports.push_back(finish(item, std::move(result)));
  }
  return reports;
}

// ---------------------------------------------------------------------------

namespace {

const UpliftRow* row_for(const std::vector<UpliftRow>& rows, int k) {
  for (const auto& r : rows) {
    if (r.k == k) return &r;
  }
  return nullptr;
}

std::string fmt(double x) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

}  // namespace

std::vector<double> ExperimentGrid::hr_after(const std::string& method, int k,
                                             const std::string& sweep_value) const {
  std::vector<double> out;
  for (const auto& c : cells) {
    if (c.method != method || (!sweep_value.empty() && c.sweep_value != sweep_value)) continue;
    const auto* r = row_for(c.uplift, k);
    if (!r) throw ConfigError("K=" + std::to_string(k) + " was not evaluated");
    out.push_back(r->hr_after);
  }
  return out;
}

double ExperimentGrid::mean_hr(const std::string& method, int k, const std::string& sweep_value) const {
  const auto v = hr_after(method, k, sweep_value);
  if (v.empty()) throw ConfigError("no cells for method " + method);
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<MetricRow> aggregate_cells(std::span<const GridCell> cells, std::span<const int> k_values) {
  // (method, sweep value) in first-appearance order, then seeds in appearance order.
  std::vector<std::pair<std::string, std::string>> groups;
  std::map<std::pair<std::string, std::string>, std::vector<std::uint64_t>> seeds;
  for (const auto& c : cells) {
    const auto key = std::make_pair(c.method, c.sweep_value);
    if (!seeds.contains(key)) groups.push_back(key);
    auto& s = seeds[key];
    if (std::find(s.begin(), s.end(), c.seed) == s.end()) s.push_back(c.seed);
  }
  std::vector<MetricRow> rows;
  for (const auto& key : groups) {
    for (int k : k_values) {
      MetricRow mean{key.first, key.second, k, 0, 0, 0, "mean", 0, 0};
      for (std::uint64_t seed : seeds[key]) {
        MetricRow r{key.first, key.second, k, 0, 0, 0, std::to_string(seed), 0, 1};
        for (const auto& c : cells) {
          if (c.method != key.first || c.sweep_value != key.second || c.seed != seed) continue;
          const auto* u = row_for(c.uplift, k);
          if (!u) throw ConfigError("K=" + std::to_string(k) + " was not evaluated");
          r.hr += u->hr_after;
          r.ndcg += u->ndcg_after;
          r.avg_items += c.avg_items;
          ++r.n_items;
        }
        if (r.n_items > 0) {
          r.hr /= r.n_items;
          r.ndcg /= r.n_items;
          r.avg_items /= r.n_items;
        }
        mean.hr += r.hr;
        mean.ndcg += r.ndcg;
        mean.avg_items += r.avg_items;
        mean.n_items = r.n_items;
        ++mean.n_seeds;
        rows.push_back(r);
      }
      if (mean.n_seeds > 0) {
        mean.hr /= mean.n_seeds;
        mean.ndcg /= mean.n_seeds;
        mean.avg_items /= mean.n_seeds;
      }
      rows.push_back(mean);
    }
  }
  return rows;
}

ExperimentGrid run_suite(Suite suite, const AttackContext& context, const ExperimentConfig& config) {
  ExperimentGrid grid;
  grid.suite = suite;

  auto run_cells = [&](const std::string& method, const std::string& sweep_value,
                       std::span<const ItemId> items, const ClusterTree& tree,
                       const ExperimentConfig& cfg) {
    for (std::uint64_t seed : cfg.seeds) {
      const auto start = std::chrono::steady_clock::now();
      const auto reports = run_method(context, method, items, tree, cfg, seed);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      grid.timings.push_back({method, sweep_value, seed, secs});
      for (const auto& r : reports) {
        grid.cells.push_back({method, sweep_value, seed, r.target_item, r.uplift, r.saturated,
                              static_cast<int>(r.episode.injections.size()), r.avg_items()});
      }
    }
  };

  switch (suite) {
    case Suite::comparison:
      grid.sweep_var = "none";
      for (const auto& m : comparison_methods()) run_cells(m, "-", context.target_items, context.tree, config);
      break;
    case Suite::depth_sweep: {
      grid.sweep_var = "depth";
      const int n = static_cast<int>(context.source_profiles.size());
      for (int d : config.depths) {
        const int c = branching_for_depth(n, d);
        const auto tree = build_source_tree(context.source_embeddings, n, c, context.tree_seed);
        run_cells("copyattack", std::to_string(tree.depth()), context.target_items, tree, config);
      }
      break;
    }
    case Suite::budget_sweep:
      grid.sweep_var = "budget";
      for (int b : config.budgets) {
        ExperimentConfig cfg = config;
        cfg.episode.budget = b;
        for (const char* m : {"random", "target100", "copyattack"}) {
          run_cells(m, std::to_string(b), context.target_items, context.tree, cfg);
        }
      }
      break;
    case Suite::popularity: {
      grid.sweep_var = "popularity_decile";
      std::set<ItemId> blocked;
      for (const auto& p : context.pretend.profiles) blocked.insert(p.begin(), p.end());
      std::vector<ItemId> universe;
      for (ItemId item : context.overlap) {
        if (!blocked.contains(item)) universe.push_back(item);
      }
      const auto deciles = popularity_deciles(universe, context.item_degree);
      for (std::size_t g = 0; g < deciles.size(); ++g) {
        std::vector<ItemId> pick = deciles[g];
        Rng rng(derive_seed(context.tree_seed, 0xdec0 + g));
        shuffle(pick, rng);
        pick.resize(std::min(pick.size(), static_cast<std::size_t>(config.items_per_decile)));
        std::sort(pick.begin(), pick.end());
        for (const char* m : {"no_attack", "copyattack"}) {
          run_cells(m, std::to_string(g + 1), pick, context.tree, config);
        }
      }
      break;
    }
  }
  grid.rows = aggregate_cells(grid.cells, config.uplift.k_values);
  return grid;
}

void write_grid_csv(const ExperimentGrid& grid, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "suite,method,sweep_var,sweep_value,K,HR,NDCG,avg_items,seed\n";
  for (const auto& r : grid.rows) {
    out << to_string(grid.suite) << ',' << r.method << ',' << grid.sweep_var << ',' << r.sweep_value
        << ',' << r.k << ',' << fmt(r.hr) << ',' << fmt(r.ndcg) << ',' << fmt(r.avg_items) << ','
        << r.seed << '\n';
  }
}

void write_cells_csv(const ExperimentGrid& grid, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "suite,method,sweep_var,sweep_value,seed,item,K,HR_before,HR_after,NDCG_before,NDCG_after,"
         "injections,avg_items,saturated\n";
  for (const auto& c : grid.cells) {
    for (const auto& u : c.uplift) {
      out << to_string(grid.suite) << ',' << c.method << ',' << grid.sweep_var << ',' << c.sweep_value
          << ',' << c.seed << ',' << c.item << ',' << u.k << ',' << fmt(u.hr_before) << ','
          << fmt(u.hr_after) << ',' << fmt(u.ndcg_before) << ',' << fmt(u.ndcg_after) << ','
          << c.injections << ',' << fmt(c.avg_items) << ',' << (c.saturated ? 1 : 0) << '\n';
    }
  }
}

json grid_manifest(const ExperimentGrid& grid, const ExperimentConfig& config,
                   const std::string& dataset_hash) {
  json cells = json::array();
  double total = 0.0;
  for (const auto& t : grid.timings) {
    cells.push_back({{"method", t.method}, {"sweep_value", t.sweep_value}, {"seed", t.seed}, {"seconds", t.seconds}});
    total += t.seconds;
  }
  return {{"suite", to_string(grid.suite)},
          {"sweep_var", grid.sweep_var},
          {"config_hash", config.hash()},
          {"config", config.to_json()},
          {"dataset_hash", dataset_hash},
          {"revision", build_revision()},
          {"cells", std::move(cells)},
          {"total_seconds", total}};
}

double pairwise_win_rate(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) {
    throw ConfigError("pairwise_win_rate needs two non-empty samples of equal size");
  }
  double wins = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) wins += a[i] > b[i] ? 1.0 : a[i] == b[i] ? 0.5 : 0.0;
  return wins / static_cast<double>(a.size());
}

std::string build_revision() {
#ifdef COPYATTACK_REVISION
  return COPYATTACK_REVISION;
#else
  return "unknown";
#endif
}

AttackContext make_attack_context(const PreparedData& prepared, std::unique_ptr<TargetModel> model,
                                  EmbeddingTable embeddings, ClusterTree tree, int pretend_users,
                                  int pretend_length, std::uint64_t seed, std::uint64_t tree_seed) {
  AttackContext ctx;
  ctx.organic_count = model->user_count();
  ctx.pretend = create_pretend_users(*model, pretend_users, pretend_length, prepared.target_items, seed);
  ctx.checkpoint = std::shared_ptr<const TargetModel>(std::move(model));
  ctx.source_profiles = prepared.data.source.profiles;
  ctx.source_embeddings = std::move(embeddings);
  ctx.tree = std::move(tree);
  ctx.tree_seed = tree_seed;
  ctx.target_items = prepared.target_items;
  ctx.overlap = prepared.data.overlap;
  ctx.item_degree = item_degrees(prepared.split.train, prepared.data.item_count());
  ctx.dataset_hash = prepared.dataset_hash;
  return ctx;
}

}  // namespace copyattack
