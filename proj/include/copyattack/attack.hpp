#pragma once

#include <copyattack/cluster_tree.hpp>
#include <copyattack/common.hpp>
#include <copyattack/mf.hpp>
#include <copyattack/policy.hpp>
#include <copyattack/recommender.hpp>

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace copyattack {

/// Keeps max(1, round_half_up(w·l)) items of `raw` in a window centred on `target`:
/// ⌊(kept−1)/2⌋ before it and the rest after, spilling to the other side at the ends.
/// Throws DataError when `target` is not in the profile.
Profile craft_profile(const Profile& raw, ItemId target, double w);

/// Number of items craft_profile keeps from a profile of length `length`.
int clipped_length(int length, double w);

/// Fraction of pretend users whose Top-k list contains `target`.
double compute_reward(std::span<const std::vector<ItemId>> feedback, ItemId target, int k);

/// Everything the attacker knows about the source domain.
struct SourceView {
  /// Profiles by source user id, restricted to overlap items (target ids).
  std::span<const Profile> profiles;
  const EmbeddingTable* embeddings = nullptr;

  VectorXd user_embedding(UserId user) const { return embeddings->user(user); }
  VectorXd item_embedding(ItemId item) const { return embeddings->item(item); }
};

enum class AttackGoal { promote, demote };

enum class SelectionMode { policy, uniform };
enum class CraftMode { policy, fixed };

struct EpisodeConfig {
  int budget = 30;
  int query_interval = 3;
  int k = 20;
  double success_threshold = 1.0;
  /// Seed step 0 with a uniformly drawn eligible leaf.
  bool random_first_action = true;
  SelectionMode selection = SelectionMode::policy;
  bool use_mask = true;
  CraftMode crafting = CraftMode::policy;
  /// kClipLevels index used when crafting is fixed.
  int fixed_clip = static_cast<int>(kClipLevels.size()) - 1;
  AttackGoal goal = AttackGoal::promote;

  void validate() const;
};

struct InjectionRecord {
  UserId source_user = -1;
  double w = 1.0;
  int raw_length = 0;
  int length = 0;
};

struct EpisodeResult {
  Trajectory trajectory;
  std::vector<InjectionRecord> injections;
  std::vector<Profile> crafted;
  /// Reward observed at each query.
  std::vector<double> reward_curve;
  /// "budget", "success" or "exhausted" (no eligible source user left).
  std::string termination = "budget";

  long long item_budget() const;
};

/// Uniform draw among the eligible leaves of `mask`.
int sample_eligible_leaf(const ClusterTree& tree, const TreeMask& mask, Rng& rng);

/// One attack on `target`, starting by resetting the environment. `mask` is the
/// target's mask (ignored when config.use_mask is false); selected leaves are excluded
/// as the episode proceeds so no source user is copied twice. `bundle` may be null
/// when neither selection nor crafting uses the policy.
EpisodeResult run_episode(BlackBoxTarget& env, const ClusterTree& tree, const TreeMask& mask,
                          const PolicyBundle* bundle, const SourceView& source, ItemId target,
                          const EpisodeConfig& config, Rng& rng);

struct TrainingCurve {
  std::vector<ItemId> items;
  /// Sum of step rewards of each episode.
  std::vector<double> episode_rewards;
};

/// Round-robin over `targets`, one REINFORCE update per episode.
TrainingCurve train_agent(BlackBoxTarget& env, const ClusterTree& tree, PolicyBundle& bundle,
                          LearnerState& learner, const SourceView& source,
                          std::span<const ItemId> targets, int episodes_per_item,
                          const EpisodeConfig& config, Rng& rng);

// ---------------------------------------------------------------------------

enum class AttackMethod { copyattack, random, target40, target70, target100, flat_policy, no_mask, no_craft };

std::string to_string(AttackMethod method);
AttackMethod parse_attack_method(const std::string& name);
std::vector<AttackMethod> all_attack_methods();

/// Whether the method trains a policy (and on which tree shape).
bool is_learned(AttackMethod method);
bool uses_flat_tree(AttackMethod method);

/// Episode settings that realise a method on top of `base`.
EpisodeConfig method_episode_config(AttackMethod method, EpisodeConfig base);

/// Runs a non-learned baseline (random, target-p) for one item.
EpisodeResult baseline_attack(AttackMethod method, BlackBoxTarget& env, const ClusterTree& tree,
                              const SourceView& source, ItemId target,
                              const EpisodeConfig& base, Rng& rng);

// ---------------------------------------------------------------------------

struct UpliftRow {
  int k = 0;
  double hr_before = 0.0;
  double hr_after = 0.0;
  double ndcg_before = 0.0;
  double ndcg_after = 0.0;
};

struct AttackReport {
  std::string method;
  ItemId target_item = -1;
  int budget = 0;
  std::uint64_t seed = 0;
  EpisodeResult episode;
  std::vector<UpliftRow> uplift;
  bool saturated = false;

  double avg_items() const;
  nlohmann::json to_json() const;
};

/// `query,reward` rows of the observed reward curve.
void write_reward_curve_csv(const AttackReport& report, const std::filesystem::path& path);

}  // namespace copyattack
