#include <copyattack/cli.hpp>

#include <copyattack/checkpoint.hpp>
#include <copyattack/cluster_tree.hpp>
#include <copyattack/hash.hpp>
#include <copyattack/mf.hpp>
#include <copyattack/policy.hpp>
#include <copyattack/random.hpp>

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

namespace copyattack {

using nlohmann::json;
namespace fs = std::filesystem;

std::vector<int> parse_int_list(const std::string& text, const std::string& what) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto b = tok.find_first_not_of(" \t");
    const auto e = tok.find_last_not_of(" \t");
    if (b == std::string::npos) throw ConfigError(what + ": empty entry in '" + text + "'");
    tok = tok.substr(b, e - b + 1);
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size()) throw ConfigError(what + ": '" + tok + "' is not an integer");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(what + " is empty");
  return out;
}

std::vector<std::string> config_file_arguments(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::vector<std::string> args;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    auto trim = [](std::string s) {
      const auto f = s.find_first_not_of(" \t\r");
      if (f == std::string::npos) return std::string();
      return s.substr(f, s.find_last_not_of(" \t\r") - f + 1);
    };
    std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": empty key");
    std::replace(key.begin(), key.end(), '_', '-');
    args.push_back("--" + key);
    args.push_back(value);
  }
  return args;
}

// ---------------------------------------------------------------------------

json RunConfig::to_json() const {
  return {{"target_data", target_data},
          {"source_data", source_data},
          {"alignment", alignment},
          {"output_dir", output_dir},
          {"data_format", data_format},
          {"has_header", has_header},
          {"min_rating", min_rating},
          {"train_fraction", train_fraction},
          {"validation_fraction", validation_fraction},
          {"test_fraction", test_fraction},
          {"target_items", target_items},
          {"max_target_degree", max_target_degree},
          {"target_model", target_model},
          {"knn_neighbors", knn_neighbors},
          {"knn_length_weighting", knn_length_weighting},
          {"knn_scoring", knn_scoring},
          {"target_mf_epochs", target_mf_epochs},
          {"target_mf_learning_rate", target_mf_learning_rate},
          {"fold_in_l2", fold_in_l2},
          {"refresh_every", refresh_every},
          {"embedding_dim", embedding_dim},
          {"mf_learning_rate", mf_learning_rate},
          {"mf_epochs", mf_epochs},
          {"mf_negatives", mf_negatives},
          {"mf_l2", mf_l2},
          {"branching", branching},
          {"depth", depth},
          {"learning_rate", learning_rate},
          {"discount", discount},
          {"state_dim", state_dim},
          {"hidden_dim", hidden_dim},
          {"optimizer", optimizer},
          {"baseline_decay", baseline_decay},
          {"episodes_per_item", episodes_per_item},
          {"budget", budget},
          {"pretend_users", pretend_users},
          {"pretend_length", pretend_length},
          {"query_interval", query_interval},
          {"k", k},
          {"success_threshold", success_threshold},
          {"k_values", k_values},
          {"negatives", negatives},
          {"organic_users", organic_users},
          {"seeds", seeds},
          {"depths", depths},
          {"budgets", budgets},
          {"items_per_decile", items_per_decile},
          {"attack_items", attack_items},
          {"seed", seed}};
}

std::string RunConfig::hash() const { return fnv1a_hex(to_json().dump()); }

fs::path RunConfig::run_directory() const { return fs::path(output_dir) / ("run-" + hash()); }

void RunConfig::validate() const {
  if (data_format != "tsv" && data_format != "csv") throw ConfigError("data_format must be tsv or csv");
  parse_target_kind(target_model);
  parse_knn_scoring(knn_scoring);
  parse_optimizer(optimizer);
  if (branching < 0 || (branching == 1)) throw ConfigError("branching must be 0 or >= 2");
  if (branching == 0 && depth < 1) throw ConfigError("depth must be >= 1 when branching is 0");
  if (attack_items < 0) throw ConfigError("attack_items must be >= 0");
  if (pretend_users < 1 || pretend_length < 1) throw ConfigError("pretend_users and pretend_length must be >= 1");
  if (episodes_per_item < 0) throw ConfigError("episodes_per_item must be >= 0");
  prepare_config().split.validate();
  mf_config().validate();
  const auto e = experiment_config();
  e.policy.validate();
  e.episode.validate();
  for (int kv : e.uplift.k_values) {
    if (kv < 1) throw ConfigError("k_values must be positive");
  }
  if (negatives < 1 || organic_users < 1) throw ConfigError("negatives and organic_users must be >= 1");
}

PrepareConfig RunConfig::prepare_config() const {
  PrepareConfig p;
  p.min_rating = min_rating;
  p.split.train_fraction = train_fraction;
  p.split.validation_fraction = validation_fraction;
  p.split.test_fraction = test_fraction;
  p.split.rng_seed = derive_seed(seed, 1);
  p.target_items = target_items;
  p.max_target_degree = max_target_degree;
  p.seed = derive_seed(seed, 2);
  return p;
}

TargetConfig RunConfig::target_config() const {
  TargetConfig t;
  t.kind = parse_target_kind(target_model);
  t.mf.dim = embedding_dim;
  t.mf.epochs = target_mf_epochs;
  t.mf.learning_rate = target_mf_learning_rate;
  t.mf.rng_seed = derive_seed(seed, 3);
  t.fold_in_l2 = fold_in_l2;
  t.refresh_every = refresh_every;
  t.knn_length_weighting = knn_length_weighting;
  t.knn_neighbors = knn_neighbors;
  t.knn_scoring = parse_knn_scoring(knn_scoring);
  return t;
}

MfConfig RunConfig::mf_config() const {
  MfConfig m;
  m.dim = embedding_dim;
  m.learning_rate = mf_learning_rate;
  m.epochs = mf_epochs;
  m.negatives_per_positive = mf_negatives;
  m.l2 = mf_l2;
  m.rng_seed = derive_seed(seed, 4);
  return m;
}

ExperimentConfig RunConfig::experiment_config() const {
  ExperimentConfig e;
  e.policy.embedding_dim = embedding_dim;
  e.policy.state_dim = state_dim;
  e.policy.hidden_dim = hidden_dim;
  e.policy.discount = discount;
  e.policy.learning_rate = learning_rate;
  e.policy.optimizer = parse_optimizer(optimizer);
  e.policy.baseline_decay = baseline_decay;
  e.episode.budget = budget;
  e.episode.query_interval = query_interval;
  e.episode.k = k;
  e.episode.success_threshold = success_threshold;
  e.episodes_per_item = episodes_per_item;
  e.uplift.k_values = parse_int_list(k_values, "k_values");
  e.uplift.organic_users = organic_users;
  e.uplift.negatives = negatives;
  e.uplift.seed = derive_seed(seed, 6);
  e.seeds.clear();
  for (int s : parse_int_list(seeds, "seeds")) {
    if (s < 0) throw ConfigError("seeds must be non-negative");
    e.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  e.branching = branching;
  e.depths = parse_int_list(depths, "depths");
  e.budgets = parse_int_list(budgets, "budgets");
  e.items_per_decile = items_per_decile;
  return e;
}

// ---------------------------------------------------------------------------

namespace {

struct Stage {
  RunConfig config;
  fs::path dir;
  std::ostream& out;

  fs::path file(const std::string& name) const { return dir / name; }

  fs::path require(const std::string& name, const std::string& producer) const {
    const auto p = file(name);
    if (!fs::exists(p)) throw DataError("missing " + p.string() + " (run '" + producer + "' first)");
    return p;
  }

  void write_manifest(const std::string& stage, const std::string& dataset_hash, json extra) const {
    json m = {{"stage", stage},
              {"config_hash", config.hash()},
              {"dataset_hash", dataset_hash},
              {"revision", build_revision()}};
    for (auto& [k, v] : extra.items()) m[k] = v;
    write_json_file(file(stage + ".manifest.json"), m);
  }

  json manifest(const std::string& stage) const {
    return read_json_file(require(stage + ".manifest.json", stage));
  }

  PreparedData prepared() const { return load_prepared(require("prepared.json", "prepare")); }

  void check_dataset(const std::string& stage, const PreparedData& p) const {
    if (manifest(stage).value("dataset_hash", "") != p.dataset_hash) {
      throw IntegrityError(stage + " checkpoint was built from a different dataset");
    }
  }
};

void write_config(const Stage& s) {
  fs::create_directories(s.dir);
  std::ofstream(s.file("config.json")) << s.config.to_json().dump(2) << '\n';
}

void cmd_prepare(const Stage& s) {
  const auto& c = s.config;
  for (const auto& [what, path] : {std::pair<std::string, std::string>{"target data", c.target_data},
                                   {"source data", c.source_data},
                                   {"alignment file", c.alignment}}) {
    if (path.empty()) throw ConfigError(what + " path not set");
    if (!fs::exists(path)) throw DataError(what + " not found: " + path);
  }
  LoadOptions lo;
  lo.format = c.data_format == "csv" ? TextFormat::csv : TextFormat::tsv;
  lo.has_header = c.has_header;
  const auto target = load_interactions(c.target_data, lo);
  const auto source = load_interactions(c.source_data, lo);
  const auto mapping = load_alignment(c.alignment);
  const auto prepared = prepare_data(target, source, mapping, c.prepare_config());
  write_config(s);
  save_prepared(prepared, s.file("prepared.json"));
  write_json_file(s.file("split_report.json"), split_report(prepared.data, prepared.split));
  s.write_manifest("prepare", prepared.dataset_hash,
                   {{"target_users", prepared.data.target.user_count()},
                    {"source_users", prepared.data.source.user_count()},
                    {"items", prepared.data.item_count()},
                    {"overlap", prepared.data.overlap.size()},
                    {"target_items", prepared.target_items.size()}});
  s.out << "prepared " << s.dir.string() << "\n"
        << "dataset hash " << prepared.dataset_hash << "\n";
}

void cmd_train_target(const Stage& s) {
  const auto prepared = s.prepared();
  const auto model = fit_target(prepared.train_profiles(), prepared.data.item_count(), s.config.target_config());
  save_target(*model, s.file("target.json"));
  const auto exp = s.config.experiment_config();
  const auto table = evaluate_offline(*model, prepared.split.test, exp.uplift.k_values, s.config.negatives,
                                      derive_seed(s.config.seed, 7));
  write_metric_csv(table, s.file("target_metrics.csv"));
  s.write_manifest("train-target", prepared.dataset_hash, {{"kind", s.config.target_model}});
  s.out << "target checkpoint " << s.file("target.json").string() << "\n";
}

void cmd_pretrain(const Stage& s) {
  const auto prepared = s.prepared();
  const auto table = pretrain_source_embeddings(prepared.data, s.config.mf_config());
  save_embeddings(table, s.file("embeddings.json"));
  s.write_manifest("pretrain-embeddings", prepared.dataset_hash,
                   {{"users", table.user_ids.size()}, {"items", table.item_ids.size()}, {"dim", table.dim()}});
  s.out << "embeddings " << s.file("embeddings.json").string() << "\n";
}

int tree_branching(const RunConfig& c, int n) {
  return c.branching > 0 ? c.branching : branching_for_depth(n, c.depth);
}

void cmd_build_tree(const Stage& s) {
  const auto prepared = s.prepared();
  s.check_dataset("pretrain-embeddings", prepared);
  const auto table = load_embeddings(s.require("embeddings.json", "pretrain-embeddings"));
  const int n = prepared.data.source.user_count();
  const int c = tree_branching(s.config, n);
  const auto tree = build_source_tree(table, n, c, derive_seed(s.config.seed, 5));
  save_tree(tree, s.file("tree.json"));
  s.write_manifest("build-tree", prepared.dataset_hash,
                   {{"leaves", n}, {"branching", c}, {"depth", tree.depth()}, {"internal_nodes", tree.internal_count()}});
  s.out << "tree n=" << n << " c=" << c << " d=" << tree.depth() << " I=" << tree.internal_count() << "\n";
}

AttackContext load_context(const Stage& s) {
  const auto prepared = s.prepared();
  for (const char* stage : {"train-target", "pretrain-embeddings", "build-tree"}) s.check_dataset(stage, prepared);
  auto model = load_target(s.require("target.json", "train-target"));
  auto table = load_embeddings(s.require("embeddings.json", "pretrain-embeddings"));
  auto tree = load_tree(s.require("tree.json", "build-tree"));
  if (tree.leaf_count() != prepared.data.source.user_count()) {
    throw IntegrityError("tree leaf count does not match the source domain");
  }
  auto ctx = make_attack_context(prepared, std::move(model), std::move(table), std::move(tree),
                                 s.config.pretend_users, s.config.pretend_length,
                                 derive_seed(s.config.seed, 8), derive_seed(s.config.seed, 5));
  if (s.config.attack_items > 0 && static_cast<std::size_t>(s.config.attack_items) < ctx.target_items.size()) {
    ctx.target_items.resize(static_cast<std::size_t>(s.config.attack_items));
  }
  return ctx;
}

void cmd_attack(const Stage& s, const std::string& method) {
  const auto valid = comparison_methods();
  if (std::find(valid.begin(), valid.end(), method) == valid.end()) {
    std::string list;
    for (const auto& m : valid) list += (list.empty() ? "" : ", ") + m;
    throw ConfigError("unknown attack method '" + method + "' (valid: " + list + ")");
  }
  const auto ctx = load_context(s);
  const auto exp = s.config.experiment_config();
  json reports = json::array();
  const auto csv_path = s.file("attack-" + method + ".csv");
  std::ofstream csv(csv_path);
  if (!csv) throw DataError("cannot write " + csv_path.string());
  csv << "method,item,seed,K,HR_before,HR_after,NDCG_before,NDCG_after,injections,avg_items,termination\n";
  std::ofstream curves(s.file("attack-" + method + "-curves.csv"));
  curves << "item,seed,query,reward\n";
  char buf[256];
  for (auto seed : exp.seeds) {
    for (const auto& r : run_method(ctx, method, ctx.target_items, ctx.tree, exp, seed)) {
      const int item = r.target_item;
      for (const auto& u : r.uplift) {
        std::snprintf(buf, sizeof buf, "%s,%d,%llu,%d,%.6f,%.6f,%.6f,%.6f,%zu,%.6f,%s\n", method.c_str(), item,
                      static_cast<unsigned long long>(seed), u.k, u.hr_before, u.hr_after, u.ndcg_before,
                      u.ndcg_after, r.episode.injections.size(), r.avg_items(), r.episode.termination.c_str());
        csv << buf;
      }
      for (std::size_t q = 0; q < r.episode.reward_curve.size(); ++q) {
        std::snprintf(buf, sizeof buf, "%d,%llu,%zu,%.6f\n", item, static_cast<unsigned long long>(seed), q + 1,
                      r.episode.reward_curve[q]);
        curves << buf;
      }
      reports.push_back(r.to_json());
    }
  }
  write_json_file(s.file("attack-" + method + ".json"), reports);
  s.write_manifest("attack-" + method, ctx.dataset_hash, {{"items", ctx.target_items.size()}});
  s.out << "attack report " << csv_path.string() << "\n";
}

void cmd_report(const Stage& s, const std::string& suite_name) {
  const auto suite = parse_suite(suite_name);
  const auto ctx = load_context(s);
  const auto exp = s.config.experiment_config();
  const auto t0 = std::chrono::steady_clock::now();
  const auto grid = run_suite(suite, ctx, exp);
  const auto csv = s.file("report-" + suite_name + ".csv");
  write_grid_csv(grid, csv);
  write_cells_csv(grid, s.file("report-" + suite_name + "-cells.csv"));
  auto manifest = grid_manifest(grid, exp, ctx.dataset_hash);
  manifest["run_config_hash"] = s.config.hash();
  manifest["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json_file(s.file("report-" + suite_name + ".manifest.json"), manifest);
  s.out << "report " << csv.string() << "\n";
}

// ---------------------------------------------------------------------------

template <typename T>
CLI::Option* add(CLI::App* app, const std::string& name, T& value, const std::string& help) {
  std::string flag = name;
  std::replace(flag.begin(), flag.end(), '_', '-');
  auto* opt = app->add_option("--" + flag, value, help)->capture_default_str();
  if (opt->get_default_str().empty()) opt->default_str("\"\"");
  return opt;
}

void add_run_options(CLI::App* app, RunConfig& c) {
  add(app, "target_data", c.target_data, "target-domain interactions (user, item, rating[, time])");
  add(app, "source_data", c.source_data, "source-domain interactions");
  add(app, "alignment", c.alignment, "item alignment file (source_key, target_key)");
  add(app, "output_dir", c.output_dir, "parent of the run directory");
  add(app, "data_format", c.data_format, "tsv or csv");
  add(app, "has_header", c.has_header, "skip the first line of data files");
  add(app, "min_rating", c.min_rating, "keep interactions rated at least this");
  add(app, "train_fraction", c.train_fraction, "train share of target interactions");
  add(app, "validation_fraction", c.validation_fraction, "validation share");
  add(app, "test_fraction", c.test_fraction, "test share");
  add(app, "target_items", c.target_items, "number of sampled target items");
  add(app, "max_target_degree", c.max_target_degree, "target items have fewer training interactions than this");
  add(app, "target_model", c.target_model, "item-knn or implicit-mf");
  add(app, "knn_neighbors", c.knn_neighbors, "item-knn neighbourhood size (0 = all)");
  add(app, "knn_length_weighting", c.knn_length_weighting, "item-knn: weight co-occurrence by 1/|profile|");
  add(app, "knn_scoring", c.knn_scoring, "item-knn: vote or weighted-average");
  add(app, "target_mf_epochs", c.target_mf_epochs, "implicit-mf epochs");
  add(app, "target_mf_learning_rate", c.target_mf_learning_rate, "implicit-mf learning rate");
  add(app, "fold_in_l2", c.fold_in_l2, "implicit-mf fold-in ridge penalty");
  add(app, "refresh_every", c.refresh_every, "implicit-mf item refresh period (0 = per query)");
  add(app, "embedding_dim", c.embedding_dim, "embedding size e");
  add(app, "mf_learning_rate", c.mf_learning_rate, "source MF learning rate");
  add(app, "mf_epochs", c.mf_epochs, "source MF epochs");
  add(app, "mf_negatives", c.mf_negatives, "source MF negatives per positive");
  add(app, "mf_l2", c.mf_l2, "source MF L2 penalty");
  add(app, "branching", c.branching, "tree branching c (0 = derive from depth)");
  add(app, "depth", c.depth, "tree depth d when branching is 0");
  add(app, "learning_rate", c.learning_rate, "policy learning rate");
  add(app, "discount", c.discount, "discount factor");
  add(app, "state_dim", c.state_dim, "RNN state size");
  add(app, "hidden_dim", c.hidden_dim, "MLP hidden width (0 = 2e)");
  add(app, "optimizer", c.optimizer, "adam or sgd");
  add(app, "baseline_decay", c.baseline_decay, "moving-average reward baseline decay");
  add(app, "episodes_per_item", c.episodes_per_item, "training episodes per target item");
  add(app, "budget", c.budget, "injection budget");
  add(app, "pretend_users", c.pretend_users, "attacker-owned users queried for reward");
  add(app, "pretend_length", c.pretend_length, "items per pretend user");
  add(app, "query_interval", c.query_interval, "injections between queries");
  add(app, "k", c.k, "Top-k used for the reward");
  add(app, "success_threshold", c.success_threshold, "reward that ends an episode early");
  add(app, "k_values", c.k_values, "evaluation cut-offs");
  add(app, "negatives", c.negatives, "sampled negatives per evaluated user");
  add(app, "organic_users", c.organic_users, "organic users sampled for uplift");
  add(app, "seeds", c.seeds, "replicate seeds for attack and report");
  add(app, "depths", c.depths, "depth_sweep values");
  add(app, "budgets", c.budgets, "budget_sweep values");
  add(app, "items_per_decile", c.items_per_decile, "popularity suite items per decile");
  add(app, "attack_items", c.attack_items, "target items attacked (0 = all)");
  add(app, "seed", c.seed, "master seed");
}

void add_synthetic_options(CLI::App* app, SyntheticConfig& c) {
  add(app, "target_users", c.target_users, "target-domain users");
  add(app, "source_users", c.source_users, "source-domain users");
  add(app, "overlap_items", c.overlap_items, "items in both catalogs");
  add(app, "target_only_items", c.target_only_items, "items only in the target catalog");
  add(app, "source_only_items", c.source_only_items, "items only in the source catalog");
  add(app, "genres", c.genres, "planted genres");
  add(app, "favourite_genres", c.favourite_genres, "favourite genres per target user");
  add(app, "favourite_affinity", c.favourite_affinity, "chance a target session uses a favourite genre");
  add(app, "source_favourite_genres", c.source_favourite_genres, "favourite genres per source era");
  add(app, "source_favourite_affinity", c.source_favourite_affinity, "chance a source session uses a favourite genre");
  add(app, "source_eras", c.source_eras, "taste eras per source profile");
  add(app, "target_min_length", c.target_min_length, "shortest target profile");
  add(app, "target_max_length", c.target_max_length, "longest target profile");
  add(app, "source_min_length", c.source_min_length, "shortest source profile");
  add(app, "source_max_length", c.source_max_length, "longest source profile");
  add(app, "session_min", c.session_min, "shortest session");
  add(app, "session_max", c.session_max, "longest session");
  add(app, "zipf_exponent", c.zipf_exponent, "source popularity exponent");
  add(app, "target_zipf_exponent", c.target_zipf_exponent, "target popularity exponent");
  add(app, "cold_items", c.cold_items, "overlap items that are rare in the target domain");
  add(app, "cold_factor", c.cold_factor, "target popularity scale of cold items");
  add(app, "popularity_correlation", c.popularity_correlation, "source/target popularity rank correlation");
  add(app, "top_rating_share", c.top_rating_share, "share of top ratings");
  add(app, "seed", c.seed, "generator seed");
}

void cmd_synth(const SyntheticConfig& c, const std::string& out_dir, std::ostream& out) {
  c.validate();
  const fs::path dir(out_dir);
  write_synthetic(generate_synthetic(c), dir);
  std::ofstream conf(dir / "pipeline.conf");
  conf << "target_data=" << (dir / "target.tsv").string() << "\n"
       << "source_data=" << (dir / "source.tsv").string() << "\n"
       << "alignment=" << (dir / "alignment.tsv").string() << "\n";
  out << "synthetic benchmark written to " << dir.string() << "\n";
}

/// Moves `--config FILE` (or `--config=FILE`) out of `args` and splices the file's
/// arguments in before the remaining flags, so later flags win.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    std::size_t width = 0;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      width = 2;
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      width = 1;
    } else {
      continue;
    }
    args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i + width));
    const auto extra = config_file_arguments(path);
    // Subcommand name stays first.
    const std::size_t at = args.empty() ? 0 : 1;
    args.insert(args.begin() + static_cast<long>(at), extra.begin(), extra.end());
    break;
  }
  return args;
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app("Cross-domain profile-copying attack toolkit", "copyattack");
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  RunConfig config;
  SyntheticConfig synth;
  std::string method = "copyattack";
  std::string suite = "comparison";
  std::string synth_out = "synthetic";
  std::string config_file;  // already spliced in by expand_config

  const std::vector<std::pair<std::string, std::string>> stages = {
      {"prepare", "filter, align and split the data; sample target items"},
      {"train-target", "fit the target recommender checkpoint"},
      {"pretrain-embeddings", "pretrain source-domain MF embeddings"},
      {"build-tree", "cluster source users into the action tree"},
      {"attack", "run one attack method on the target items"},
      {"report", "run an experiment suite and write the CSV report"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : stages) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_file, "key=value config file; flags on the command line override it")
        ->default_str("\"\"");
    add_run_options(sub, config);
    subs[name] = sub;
  }
  add(subs["attack"], "method", method, "attack method (no_attack or an attack method name)");
  add(subs["report"], "suite", suite, "comparison, depth_sweep, budget_sweep or popularity");
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic cross-domain benchmark");
  add(synth_cmd, "out", synth_out, "output directory");
  add_synthetic_options(synth_cmd, synth);

  try {
    auto args = expand_config(raw_args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (synth_cmd->parsed()) {
      cmd_synth(synth, synth_out, out);
      return 0;
    }
    config.validate();
    const Stage stage{config, config.run_directory(), out};
    if (subs["prepare"]->parsed()) {
      cmd_prepare(stage);
    } else {
      if (!fs::exists(stage.dir)) {
        throw DataError("run directory " + stage.dir.string() + " does not exist (run 'prepare' with the same config first)");
      }
      if (subs["train-target"]->parsed()) cmd_train_target(stage);
      if (subs["pretrain-embeddings"]->parsed()) cmd_pretrain(stage);
      if (subs["build-tree"]->parsed()) cmd_build_tree(stage);
      if (subs["attack"]->parsed()) cmd_attack(stage, method);
      if (subs["report"]->parsed()) cmd_report(stage, suite);
    }
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  } catch (const IntegrityError& e) {
    err << "integrity error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace copyattack
