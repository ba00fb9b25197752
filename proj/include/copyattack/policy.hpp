#pragma once

#include <copyattack/cluster_tree.hpp>
#include <copyattack/common.hpp>
#include <copyattack/nn.hpp>
#include <copyattack/random.hpp>

#include <json.hpp>

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace copyattack {

/// Clip levels W: fraction of the raw profile kept around the target item.
inline constexpr std::array<double, 10> kClipLevels{0.1, 0.2, 0.3, 0.4, 0.5,
                                                    0.6, 0.7, 0.8, 0.9, 1.0};

enum class OptimizerKind { adam, sgd };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct PolicyConfig {
  int embedding_dim = 8;
  /// RNN state size.
  int state_dim = 8;
  /// Hidden width of node and crafting MLPs; 0 means 2 * embedding_dim.
  int hidden_dim = 0;
  double init_stddev = 0.1;
  double discount = 0.6;
  double learning_rate = 0.001;
  OptimizerKind optimizer = OptimizerKind::adam;
  double baseline_decay = 0.9;

  int mlp_hidden() const { return hidden_dim > 0 ? hidden_dim : 2 * embedding_dim; }
  void validate() const;
};

/// Every trainable piece of the agent: one selection MLP per internal tree node (indexed
/// by ClusterTree::internal_index), the crafting MLP and the RNN state encoder.
struct PolicyBundle {
  PolicyConfig config;
  std::vector<Mlp<double>> node_policies;
  Mlp<double> crafting;
  ElmanRnn<double> encoder;

  static PolicyBundle create(const ClusterTree& tree, const PolicyConfig& config,
                             std::uint64_t rng_seed);
  PolicyBundle zeros_like() const;
  std::size_t parameter_count() const;

  template <typename F>
  void for_each_block(F&& f) {
    for (auto& m : node_policies) m.for_each_block(f);
    crafting.for_each_block(f);
    encoder.for_each_block(f);
  }
  template <typename F>
  void for_each_block(F&& f) const {
    for (const auto& m : node_policies) m.for_each_block(f);
    crafting.for_each_block(f);
    encoder.for_each_block(f);
  }
};

/// [q ⊕ x], the input of every node policy.
VectorXd selection_input(const VectorXd& item_embedding, const VectorXd& state);

/// x = RNN(embeddings of the users selected so far); zero for an empty history.
VectorXd encode_state(const PolicyBundle& bundle, std::span<const VectorXd> selected);

struct PathStep {
  int node = 0;
  int branch = 0;
  /// Child eligibility seen when the branch was drawn.
  std::vector<std::uint8_t> eligible;
  double log_prob = 0.0;
};

struct PathSample {
  int leaf = -1;
  UserId user = -1;
  double log_prob = 0.0;
  std::vector<PathStep> steps;
};

/// Root-to-leaf walk, each branch drawn from the masked softmax of that node's policy.
PathSample select_path(const ClusterTree& tree, const TreeMask& mask, const PolicyBundle& bundle,
                       const VectorXd& item_embedding, const VectorXd& state, Rng& rng);

/// log π of a recorded path under the current parameters.
double path_log_prob(const ClusterTree& tree, const PolicyBundle& bundle,
                     const VectorXd& item_embedding, const VectorXd& state,
                     std::span<const PathStep> steps);

/// Distribution over kClipLevels from the crafting MLP on [p ⊕ q].
VectorXd crafting_probabilities(const PolicyBundle& bundle, const VectorXd& user_embedding,
                                const VectorXd& item_embedding);

// ---------------------------------------------------------------------------

struct TrajectoryStep {
  /// Path drawn by the policy; empty for the random seed action.
  std::vector<PathStep> path;
  UserId user = -1;
  /// Index into kClipLevels; `crafted` is false when the level was forced.
  int clip_index = static_cast<int>(kClipLevels.size()) - 1;
  bool crafted = false;
  double reward = 0.0;
  /// Set on steps followed by a query.
  bool observed = false;
  double ret = 0.0;
};

struct Trajectory {
  ItemId target_item = -1;
  VectorXd item_embedding;
  /// Embedding of the user selected at each step.
  std::vector<VectorXd> user_embeddings;
  std::vector<TrajectoryStep> steps;

  double total_reward() const;
};

/// G_t = r_t + γ G_{t+1}.
void compute_returns(Trajectory& trajectory, double discount);

/// Σ_t A_t (log π_select,t + log π_craft,t) under the current parameters.
double policy_objective(const PolicyBundle& bundle, const ClusterTree& tree,
                        const Trajectory& trajectory, std::span<const double> advantages);

/// Accumulates ∇ policy_objective into `grad` (shaped like the bundle). Throws
/// NumericError naming the step when a contribution is not finite.
void policy_gradient(const PolicyBundle& bundle, const ClusterTree& tree,
                     const Trajectory& trajectory, std::span<const double> advantages,
                     PolicyBundle& grad);

struct LearnerState {
  double baseline = 0.0;
  long long updates = 0;
  /// Adam moments over the flattened parameters (empty until the first Adam step).
  std::vector<double> first_moment;
  std::vector<double> second_moment;
};

struct UpdateStats {
  double mean_return = 0.0;
  double baseline_used = 0.0;
  double gradient_norm = 0.0;
};

/// One ascent step on Σ over trajectories of the objective with A_t = G_t − b, then
/// b ← decay·b + (1 − decay)·mean G. Returns must already be computed.
UpdateStats reinforce_update(PolicyBundle& bundle, const ClusterTree& tree,
                             std::span<const Trajectory> trajectories, LearnerState& state);

// ---------------------------------------------------------------------------

/// Checkpoint holding the bundle, learner state and sampling rng state.
void save_policy(const std::filesystem::path& path, const PolicyBundle& bundle,
                 const LearnerState& state, const Rng& rng);
void load_policy(const std::filesystem::path& path, PolicyBundle& bundle, LearnerState& state,
                 Rng& rng);

nlohmann::json policy_to_json(const PolicyBundle& bundle, const LearnerState& state,
                              const Rng& rng);
void policy_from_json(const nlohmann::json& j, PolicyBundle& bundle, LearnerState& state,
                      Rng& rng);

}  // namespace copyattack
