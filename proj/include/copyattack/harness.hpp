#pragma once

#include <copyattack/attack.hpp>
#include <copyattack/cluster_tree.hpp>
#include <copyattack/dataset.hpp>
#include <copyattack/mf.hpp>
#include <copyattack/policy.hpp>
#include <copyattack/recommender.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace copyattack {

// ---------------------------------------------------------------------------
// Pipeline stages shared by the CLI and the acceptance runs.

struct PrepareConfig {
  int min_rating = 5;
  SplitSpec split{};
  int target_items = 50;
  /// Target items have fewer than this many training interactions.
  int max_target_degree = 10;
  std::uint64_t seed = 0;
};

struct PreparedData {
  CrossDomainDataset data;
  DatasetSplit split;
  std::vector<ItemId> target_items;
  std::string dataset_hash;

  std::vector<Profile> train_profiles() const;
};

/// Rating filter, profile building, alignment join, split and target-item sample.
PreparedData prepare_data(std::span<const InteractionRecord> target_log,
                          std::span<const InteractionRecord> source_log,
                          const OverlapMapping& mapping, const PrepareConfig& config);

/// Sealed JSON bundle; load verifies the checksum and the stored dataset hash.
void save_prepared(const PreparedData& prepared, const std::filesystem::path& path);
PreparedData load_prepared(const std::filesystem::path& path);

/// Fingerprint of everything downstream stages read from a prepared bundle.
std::string dataset_fingerprint(const CrossDomainDataset& data, const DatasetSplit& split,
                                std::span<const ItemId> target_items);

/// MF over the source domain; rows for every source user and overlap item it touches.
EmbeddingTable pretrain_source_embeddings(const CrossDomainDataset& data, const MfConfig& config);

/// Branching factor realising `depth` over n leaves: ⌈n^(1/depth)⌉, adjusted for
/// floating-point error so that ⌈log_c n⌉ == depth whenever that is achievable.
int branching_for_depth(int n, int depth);

ClusterTree build_source_tree(const EmbeddingTable& embeddings, int source_users, int branching,
                              std::uint64_t seed);

// ---------------------------------------------------------------------------
// Uplift on organic users.

struct UpliftConfig {
  std::vector<int> k_values{5, 10, 20};
  int organic_users = 500;
  int negatives = 100;
  std::uint64_t seed = 0;
};

struct UpliftResult {
  std::vector<UpliftRow> rows;
  std::vector<UserId> users;
  /// The target was already in every sampled user's Top-k before and after.
  bool saturated = false;
};

/// Up to `count` users among the first `organic_count` ids whose profile lacks `target`.
std::vector<UserId> sample_organic_users(const TargetModel& model, int organic_count,
                                         ItemId target, int count, std::uint64_t seed);

/// HR/NDCG of `target` ranked among `negatives` sampled items for each user, on both
/// models with identical user sample and candidate seed. Throws DataError on an empty
/// user sample.
UpliftResult promotion_uplift(const TargetModel& before, const TargetModel& after, ItemId target,
                              std::span<const UserId> users, const UpliftConfig& config);

// ---------------------------------------------------------------------------
// Experiment suites.

/// Everything a suite needs, built once per run.
struct AttackContext {
  std::shared_ptr<const TargetModel> checkpoint;  // trained target plus pretend users
  PretendUserSet pretend;
  /// Real target users occupy ids [0, organic_count).
  int organic_count = 0;
  std::vector<Profile> source_profiles;
  EmbeddingTable source_embeddings;
  ClusterTree tree;
  std::uint64_t tree_seed = 0;
  std::vector<ItemId> target_items;
  std::vector<ItemId> overlap;
  /// Training-interaction count per item, for popularity deciles.
  std::vector<int> item_degree;
  std::string dataset_hash;

  SourceView source() const { return {source_profiles, &source_embeddings}; }
};

/// Adds `pretend_users` popularity-sampled pretend users (never holding a target item)
/// to `model` and freezes it as the attack checkpoint.
AttackContext make_attack_context(const PreparedData& prepared, std::unique_ptr<TargetModel> model,
                                  EmbeddingTable embeddings, ClusterTree tree, int pretend_users,
                                  int pretend_length, std::uint64_t seed, std::uint64_t tree_seed);

struct ExperimentConfig {
  PolicyConfig policy{};
  EpisodeConfig episode{};
  int episodes_per_item = 40;
  UpliftConfig uplift{};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  /// Tree branching used for the main runs (depth_sweep overrides it).
  int branching = 0;
  std::vector<int> depths{2, 3, 4};
  std::vector<int> budgets{5, 10, 15, 20, 25, 30};
  /// Items drawn per popularity decile in the popularity suite.
  int items_per_decile = 2;

  nlohmann::json to_json() const;
  std::string hash() const;
};

enum class Suite { comparison, depth_sweep, budget_sweep, popularity };
std::string to_string(Suite suite);
Suite parse_suite(const std::string& name);

/// "no_attack" plus every AttackMethod name.
std::vector<std::string> comparison_methods();

/// Runs `method` ("no_attack" or an AttackMethod) on every item for one seed: learned
/// methods train one policy over all items first. Returns one report per item.
std::vector<AttackReport> run_method(const AttackContext& context, const std::string& method,
                                     std::span<const ItemId> items, const ClusterTree& tree,
                                     const ExperimentConfig& config, std::uint64_t seed);

struct GridCell {
  std::string method;
  std::string sweep_value;
  std::uint64_t seed = 0;
  ItemId item = -1;
  std::vector<UpliftRow> uplift;
  bool saturated = false;
  int injections = 0;
  double avg_items = 0.0;
};

struct MetricRow {
  std::string method;
  std::string sweep_value;
  int k = 0;
  double hr = 0.0;
  double ndcg = 0.0;
  double avg_items = 0.0;
  /// Replicate seed, or "mean" for the average over seeds.
  std::string seed;
  int n_items = 0;
  int n_seeds = 0;
};

struct CellTiming {
  std::string method;
  std::string sweep_value;
  std::uint64_t seed = 0;
  double seconds = 0.0;
};

struct ExperimentGrid {
  Suite suite = Suite::comparison;
  std::string sweep_var;
  std::vector<GridCell> cells;
  std::vector<MetricRow> rows;
  std::vector<CellTiming> timings;

  /// HR@k after the attack for every (item, seed) of one method and sweep value, in
  /// cell order.
  std::vector<double> hr_after(const std::string& method, int k, const std::string& sweep_value = "") const;
  double mean_hr(const std::string& method, int k, const std::string& sweep_value = "") const;
};

ExperimentGrid run_suite(Suite suite, const AttackContext& context, const ExperimentConfig& config);

/// Per-(method, sweep value, K) means, one row per seed plus a "mean" row.
std::vector<MetricRow> aggregate_cells(std::span<const GridCell> cells, std::span<const int> k_values);

/// suite,method,sweep_var,sweep_value,K,HR,NDCG,avg_items,seed
void write_grid_csv(const ExperimentGrid& grid, const std::filesystem::path& path);
/// Per-item detail with before/after values.
void write_cells_csv(const ExperimentGrid& grid, const std::filesystem::path& path);
nlohmann::json grid_manifest(const ExperimentGrid& grid, const ExperimentConfig& config,
                             const std::string& dataset_hash);

/// Fraction of paired entries where a > b, ties counting one half.
double pairwise_win_rate(std::span<const double> a, std::span<const double> b);

/// Revision string baked in at configure time.
std::string build_revision();

}  // namespace copyattack
