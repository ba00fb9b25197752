#pragma once

#include <copyattack/harness.hpp>
#include <copyattack/recommender.hpp>
#include <copyattack/synthetic.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace copyattack {

/// Every pipeline setting. Lists are comma separated ("5,10,20").
struct RunConfig {
  // Paths.
  std::string target_data;
  std::string source_data;
  std::string alignment;
  std::string output_dir = "runs";
  std::string data_format = "tsv";
  bool has_header = false;

  // Dataset.
  int min_rating = 5;
  double train_fraction = 0.8;
  double validation_fraction = 0.1;
  double test_fraction = 0.1;
  int target_items = 50;
  int max_target_degree = 10;

  // Target recommender.
  std::string target_model = "item-knn";
  int knn_neighbors = 5;
  bool knn_length_weighting = true;
  std::string knn_scoring = "vote";
  int target_mf_epochs = 50;
  double target_mf_learning_rate = 0.001;
  double fold_in_l2 = 0.1;
  int refresh_every = 0;

  // Source embeddings.
  int embedding_dim = 8;
  double mf_learning_rate = 0.001;
  int mf_epochs = 50;
  int mf_negatives = 4;
  double mf_l2 = 1e-4;

  // Tree: branching wins when positive, else derived from depth.
  int branching = 0;
  int depth = 3;

  // Agent.
  double learning_rate = 0.001;
  double discount = 0.6;
  int state_dim = 8;
  int hidden_dim = 0;
  std::string optimizer = "adam";
  double baseline_decay = 0.9;
  int episodes_per_item = 100;

  // Episode.
  int budget = 30;
  int pretend_users = 50;
  int pretend_length = 5;
  int query_interval = 3;
  int k = 20;
  double success_threshold = 1.0;

  // Evaluation.
  std::string k_values = "5,10,20";
  int negatives = 100;
  int organic_users = 500;
  std::string seeds = "1,2,3";
  std::string depths = "2,3,4";
  std::string budgets = "5,10,15,20,25,30";
  int items_per_decile = 2;
  /// Target items attacked by `attack` and `report`; 0 uses all of them.
  int attack_items = 10;

  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  /// FNV hash of to_json(); names the run directory.
  std::string hash() const;
  std::filesystem::path run_directory() const;

  void validate() const;
  PrepareConfig prepare_config() const;
  TargetConfig target_config() const;
  MfConfig mf_config() const;
  ExperimentConfig experiment_config() const;
};

/// Comma separated integers; throws ConfigError naming `what` on bad input.
std::vector<int> parse_int_list(const std::string& text, const std::string& what);

/// Flat `key=value` lines (blank lines and '#' comments ignored) turned into
/// `--key value` arguments, underscores mapped to dashes.
std::vector<std::string> config_file_arguments(const std::filesystem::path& path);

/// Runs one subcommand; returns the process exit code (0 ok, 1 usage or config,
/// 2 data, 3 numeric).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace copyattack
