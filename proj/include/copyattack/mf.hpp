#pragma once

#include <copyattack/common.hpp>
#include <copyattack/dataset.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace copyattack {

struct MfConfig {
  int dim = 8;
  double learning_rate = 0.001;
  int negatives_per_positive = 4;
  int epochs = 50;
  double l2 = 1e-4;
  double init_stddev = 0.1;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

/// Pretrained factors for the users and items present in the training data.
/// Rows of `user_vectors` / `item_vectors` are parallel to the sorted id lists.
struct EmbeddingTable {
  std::vector<UserId> user_ids;
  std::vector<ItemId> item_ids;
  MatrixXd user_vectors;
  MatrixXd item_vectors;

  int dim() const { return static_cast<int>(user_vectors.cols()); }
  std::optional<Eigen::Index> user_row(UserId id) const;
  std::optional<Eigen::Index> item_row(ItemId id) const;
  /// Throws DataError for ids not covered by the table.
  VectorXd user(UserId id) const;
  VectorXd item(ItemId id) const;

  friend bool operator==(const EmbeddingTable& a, const EmbeddingTable& b);
};

/// Inner-product preference score.
template <typename A, typename B>
double score(const Eigen::MatrixBase<A>& user, const Eigen::MatrixBase<B>& item) {
  if (user.size() != item.size()) {
    throw ConfigError("score: dimension mismatch " + std::to_string(user.size()) + " vs " +
                      std::to_string(item.size()));
  }
  return user.dot(item);
}

/// One term of the logistic objective; `label` is +1 (observed) or -1 (sampled negative).
struct MfSample {
  Eigen::Index user_row = 0;
  Eigen::Index item_row = 0;
  double label = 1.0;
};

/// Σ softplus(-label·<p,q>) + l2/2 (|p|² + |q|²) over the samples.
double mf_objective(const MatrixXd& users, const MatrixXd& items,
                    std::span<const MfSample> samples, double l2);

/// Analytic gradient of mf_objective. Outputs are resized and overwritten.
void mf_gradient(const MatrixXd& users, const MatrixXd& items, std::span<const MfSample> samples,
                 double l2, MatrixXd& grad_users, MatrixXd& grad_items);

/// Plain-SGD logistic matrix factorization with uniformly sampled negatives.
/// Throws NumericError naming the epoch when the loss becomes non-finite.
EmbeddingTable train_mf(std::span<const Interaction> interactions, const MfConfig& config,
                        std::vector<double>* epoch_losses = nullptr);

/// Fraction of (positive, negative) pairs ranked correctly, ties counting 1/2.
double pairwise_auc(std::span<const double> positive_scores,
                    std::span<const double> negative_scores);

/// Brute-force AUC of held-out positives against per-positive sampled negatives drawn
/// from table items the user has not interacted with (neither in `known` nor held out).
double holdout_auc(const EmbeddingTable& table, std::span<const Interaction> held_out,
                   std::span<const Interaction> known, int negatives_per_positive,
                   std::uint64_t rng_seed);

/// Text dump: header `e n_users n_items`, then `id v_1 ... v_e` rows (users first) at
/// 17 significant digits, which round-trips doubles exactly, and a closing
/// `checksum <fnv1a>` line over everything before it.
void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path);
EmbeddingTable load_embeddings(const std::filesystem::path& path);

}  // namespace copyattack
