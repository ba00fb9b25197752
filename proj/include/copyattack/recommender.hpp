#pragma once

#include <copyattack/common.hpp>
#include <copyattack/dataset.hpp>
#include <copyattack/mf.hpp>

#include <json.hpp>

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace copyattack {

enum class TargetKind { implicit_mf, item_knn };

/// item-knn scoring rule. `vote`: each held item j adds sim(i, j) to its neighbours i.
/// `weighted_average`: the share of candidate i's neighbourhood similarity mass that
/// the user holds, Σ_{j in N(i) ∩ P_u} sim(i,j) / Σ_{j in N(i)} sim(i,j).
enum class KnnScoring { vote, weighted_average };

std::string to_string(KnnScoring scoring);
KnnScoring parse_knn_scoring(const std::string& name);

std::string to_string(TargetKind kind);
TargetKind parse_target_kind(const std::string& name);

struct TargetConfig {
  TargetKind kind = TargetKind::item_knn;
  /// Factorization settings for implicit-mf.
  MfConfig mf{};
  /// Ridge penalty used when folding in users and refreshing item factors.
  double fold_in_l2 = 0.1;
  /// Refresh item factors after this many injected profiles; 0 refreshes only when a
  /// query batch starts.
  int refresh_every = 0;
  /// item-knn: each user adds 1/|profile| to the weighted co-occurrence of its item
  /// pairs instead of 1.
  bool knn_length_weighting = true;
  /// item-knn: item j only votes for its `knn_neighbors` most similar items (ties at
  /// the cut included); 0 lets every item vote.
  int knn_neighbors = 5;
  KnnScoring knn_scoring = KnnScoring::vote;
};

/// Which items compete in a Top-k query.
struct CandidateMode {
  bool sampled = false;
  int sample_size = 0;
  std::uint64_t seed = 0;

  static CandidateMode all() { return {}; }
  static CandidateMode sample(int n, std::uint64_t seed) { return {true, n, seed}; }
};

struct TopK {
  std::vector<ItemId> items;
  /// Set when the candidate pool held fewer than k items.
  bool truncated = false;
};

/// A trained recommender answering ranking queries. Holds every user's interactions
/// (organic, pretend and injected alike).
class TargetModel {
 public:
  virtual ~TargetModel() = default;

  virtual TargetKind kind() const = 0;
  virtual std::unique_ptr<TargetModel> clone() const = 0;

  int user_count() const { return static_cast<int>(profiles_.size()); }
  int item_count() const { return item_count_; }
  const Profile& profile(UserId user) const;
  int item_degree(ItemId item) const { return degree_.at(static_cast<std::size_t>(item)); }
  const TargetConfig& config() const { return config_; }

  /// k best non-interacted items by descending score, ties by ascending item id.
  TopK query_topk(UserId user, int k, CandidateMode mode = CandidateMode::all()) const;

  /// Candidates ordered best first under the same ranking rule. Evaluation-side only.
  std::vector<ItemId> rank(UserId user, std::span<const ItemId> candidates) const;

  /// Registers each profile as a new user; returns the assigned ids. Throws DataError
  /// naming the first item outside the catalog.
  std::vector<UserId> inject_profiles(std::span<const Profile> profiles);

  /// Applies any pending lazy update so subsequent queries see every injection.
  void synchronize();

  /// Self-describing container with kind tag, config, parameters and checksum.
  nlohmann::json to_json() const;

 protected:
  TargetModel(int item_count, std::vector<Profile> profiles, TargetConfig config);

  virtual void score_all(UserId user, VectorXd& scores) const = 0;
  virtual void on_inject(UserId first_new, UserId end) = 0;
  virtual void on_synchronize() {}
  virtual nlohmann::json parameters_json() const = 0;

  std::vector<Profile> profiles_;
  std::vector<int> degree_;
  int item_count_ = 0;
  TargetConfig config_;
};

/// Cosine-normalised item co-occurrence: sim(i,j) = W_ij / sqrt(W_ii W_jj), and a user's
/// score for i is Σ_{j in profile, i in N(j)} sim(i, j) where N(j) holds j's
/// knn_neighbors most similar items. W is the raw count matrix, or the length-weighted
/// one when knn_length_weighting is set.
class ItemKnnModel final : public TargetModel {
 public:
  ItemKnnModel(int item_count, std::vector<Profile> profiles, TargetConfig config);

  TargetKind kind() const override { return TargetKind::item_knn; }
  std::unique_ptr<TargetModel> clone() const override;

  int cooccurrence(ItemId a, ItemId b) const { return counts_(a, b); }
  double similarity(ItemId a, ItemId b) const;
  /// Whether `item` is among the neighbours `of` votes for.
  bool is_neighbor(ItemId item, ItemId of) const;

 protected:
  void score_all(UserId user, VectorXd& scores) const override;
  void on_inject(UserId first_new, UserId end) override;
  nlohmann::json parameters_json() const override;

 private:
  void add_profile(const Profile& profile);

  void refresh_neighbors() const;

  Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic> counts_;
  MatrixXd weights_;
  // Column j: sim(., j) on j's neighbours, zero elsewhere. Rebuilt lazily. Transposed
  // for weighted_average, with row sums in mass_.
  mutable MatrixXd votes_;
  mutable VectorXd mass_;
  mutable bool votes_stale_ = true;
};

/// Logistic MF. Injected users are folded in by ridge least squares against frozen item
/// factors; item factors of touched items are refit lazily from their users' vectors.
class ImplicitMfModel final : public TargetModel {
 public:
  ImplicitMfModel(int item_count, std::vector<Profile> profiles, TargetConfig config,
                  MatrixXd user_factors, MatrixXd item_factors);

  TargetKind kind() const override { return TargetKind::implicit_mf; }
  std::unique_ptr<TargetModel> clone() const override;

  const MatrixXd& user_factors() const { return users_; }
  const MatrixXd& item_factors() const { return items_; }

 protected:
  void score_all(UserId user, VectorXd& scores) const override;
  void on_inject(UserId first_new, UserId end) override;
  void on_synchronize() override;
  nlohmann::json parameters_json() const override;

 private:
  VectorXd fold_in(const Profile& profile) const;

  MatrixXd users_;
  MatrixXd items_;
  std::vector<ItemId> pending_;
  int injected_since_refresh_ = 0;
};

/// Trains a target recommender over `item_count` catalog items. `train_profiles[u]` is
/// user u's training interactions.
std::unique_ptr<TargetModel> fit_target(std::span<const Profile> train_profiles, int item_count,
                                        const TargetConfig& config);

std::unique_ptr<TargetModel> target_from_json(const nlohmann::json& j);
void save_target(const TargetModel& model, const std::filesystem::path& path);
std::unique_ptr<TargetModel> load_target(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct PretendUserSet {
  std::vector<UserId> user_ids;
  std::vector<Profile> profiles;
};

/// Adds `count` attacker-owned users whose `profile_length` distinct items are drawn
/// proportionally to item popularity, never from `excluded_items`.
PretendUserSet create_pretend_users(TargetModel& model, int count, int profile_length,
                                    std::span<const ItemId> excluded_items,
                                    std::uint64_t rng_seed);

// ---------------------------------------------------------------------------

struct MetricRowK {
  int k = 0;
  double hr = 0.0;
  double ndcg = 0.0;
  int n_users_evaluated = 0;
};

struct MetricTable {
  std::vector<MetricRowK> rows;
  /// Held-out pairs evaluated / skipped for unknown users.
  int n_pairs = 0;
  int n_skipped = 0;
};

/// Ranks each held-out item among `negatives` sampled items the user never interacted
/// with, and averages HR@K and NDCG@K.
MetricTable evaluate_offline(const TargetModel& model, std::span<const Interaction> test,
                             std::span<const int> k_values, int negatives,
                             std::uint64_t rng_seed);

/// Uniform sample (without replacement) of up to n items outside `exclude`, reproducible
/// per (seed, user).
std::vector<ItemId> sample_negatives(const TargetModel& model, UserId user, int n,
                                     std::span<const ItemId> exclude, std::uint64_t seed);

void write_metric_csv(const MetricTable& table, const std::filesystem::path& path);

// ---------------------------------------------------------------------------

/// The attacker's entire view of the target: reset to the pre-attack state, inject
/// profiles, and read the Top-k lists of its own pretend users.
class BlackBoxTarget {
 public:
  virtual ~BlackBoxTarget() = default;
  virtual void reset() = 0;
  virtual void inject(std::span<const Profile> profiles) = 0;
  virtual std::vector<std::vector<ItemId>> query_pretend_users(int k) = 0;
  virtual int pretend_user_count() const = 0;
};

/// Black box over a trained TargetModel. Every reset restores the checkpoint.
class RecommenderEnvironment final : public BlackBoxTarget {
 public:
  RecommenderEnvironment(std::shared_ptr<const TargetModel> checkpoint, PretendUserSet pretend);

  void reset() override;
  void inject(std::span<const Profile> profiles) override;
  std::vector<std::vector<ItemId>> query_pretend_users(int k) override;
  int pretend_user_count() const override {
    return static_cast<int>(pretend_.user_ids.size());
  }

  const TargetModel& model() const { return *current_; }
  TargetModel& model() { return *current_; }
  const TargetModel& checkpoint() const { return *checkpoint_; }
  const PretendUserSet& pretend_users() const { return pretend_; }

 private:
  std::shared_ptr<const TargetModel> checkpoint_;
  std::unique_ptr<TargetModel> current_;
  PretendUserSet pretend_;
};

}  // namespace copyattack
