#include <copyattack/attack.hpp>
#include <copyattack/metrics.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace copyattack {

using nlohmann::json;

int clipped_length(int length, double w) {
  if (!(w > 0.0 && w <= 1.0)) throw ConfigError("clip level must lie in (0, 1]");
  if (length <= 0) throw DataError("cannot clip an empty profile");
  // round half up; the small slack absorbs products like 0.3 * 5 = 1.4999999999999998
  const int kept = static_cast<int>(std::floor(w * length + 0.5 + 1e-9));
  return std::clamp(kept, 1, length);
}

Profile craft_profile(const Profile& raw, ItemId target, double w) {
  const auto it = std::find(raw.begin(), raw.end(), target);
  if (it == raw.end()) {
    throw DataError("target item " + std::to_string(target) + " is not in the profile");
  }
  const int l = static_cast<int>(raw.size());
  const int pos = static_cast<int>(it - raw.begin());
  const int kept = clipped_length(l, w);
  const int before = (kept - 1) / 2;
  const int after = kept - 1 - before;
  int first = pos - before, last = pos + after;
  if (first < 0) {
    last -= first;
    first = 0;
  }
  if (last > l - 1) {
    first = std::max(0, first - (last - (l - 1)));
    last = l - 1;
  }
  return Profile(raw.begin() + first, raw.begin() + last + 1);
}

double compute_reward(std::span<const std::vector<ItemId>> feedback, ItemId target, int k) {
  if (feedback.empty()) throw ConfigError("reward needs at least one pretend user");
  int hits = 0;
  for (const auto& list : feedback) hits += hit_ratio(list, target, k);
  return static_cast<double>(hits) / static_cast<double>(feedback.size());
}

void EpisodeConfig::validate() const {
  if (budget < 0) throw ConfigError("budget must be non-negative");
  if (query_interval < 1) throw ConfigError("query_interval must be at least 1");
  if (k < 1) throw ConfigError("k must be at least 1");
  if (fixed_clip < 0 || fixed_clip >= static_cast<int>(kClipLevels.size())) {
    throw ConfigError("fixed clip level out of range");
  }
}

long long EpisodeResult::item_budget() const {
  long long n = 0;
  for (const auto& r : injections) n += r.length;
  return n;
}

int sample_eligible_leaf(const ClusterTree& tree, const TreeMask& mask, Rng& rng) {
  const int total = mask.eligible_leaf_count();
  if (total == 0) throw ConfigError("no eligible leaf to sample");
  auto r = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(total)));
  int node = tree.root();
  while (!tree.node(node).is_leaf()) {
    for (int ch : tree.node(node).children) {
      const int c = mask.eligible_leaves(ch);
      if (r < c) {
        node = ch;
        break;
      }
      r -= c;
    }
  }
  return node;
}

EpisodeResult run_episode(BlackBoxTarget& env, const ClusterTree& tree, const TreeMask& mask,
                          const PolicyBundle* bundle, const SourceView& source, ItemId target,
                          const EpisodeConfig& config, Rng& rng) {
  config.validate();
  const bool policy_select = config.selection == SelectionMode::policy;
  const bool policy_craft = config.crafting == CraftMode::policy;
  if ((policy_select || policy_craft) && bundle == nullptr) {
    throw ConfigError("run_episode: policy-driven episode without a policy");
  }
  env.reset();
  EpisodeResult out;
  out.trajectory.target_item = target;
  const bool needs_embeddings = bundle != nullptr && (policy_select || policy_craft);
  if (needs_embeddings) out.trajectory.item_embedding = source.item_embedding(target);

  TreeMask remaining = config.use_mask ? mask : TreeMask::all(tree);
  std::size_t unrewarded = 0;  // steps waiting for the next query

  auto observe = [&] {
    auto feedback = env.query_pretend_users(config.k);
    double r = compute_reward(feedback, target, config.k);
    if (config.goal == AttackGoal::demote) r = 1.0 - r;
    out.reward_curve.push_back(r);
    auto& steps = out.trajectory.steps;
    for (std::size_t i = steps.size() - unrewarded; i < steps.size(); ++i) steps[i].reward = r;
    steps.back().observed = true;
    unrewarded = 0;
    return r;
  };

  for (int t = 0; t < config.budget; ++t) {
    if (remaining.eligible_leaf_count() == 0) {
      out.termination = "exhausted";
      break;
    }
    TrajectoryStep step;
    int leaf;
    if (!policy_select || (t == 0 && config.random_first_action)) {
      leaf = sample_eligible_leaf(tree, remaining, rng);
    } else {
      const VectorXd x = encode_state(*bundle, out.trajectory.user_embeddings);
      auto path = select_path(tree, remaining, *bundle, out.trajectory.item_embedding, x, rng);
      leaf = path.leaf;
      step.path = std::move(path.steps);
    }
    remaining.exclude_leaf(leaf);
    step.user = tree.node(leaf).user;
    if (needs_embeddings) out.trajectory.user_embeddings.push_back(source.user_embedding(step.user));

    const Profile& raw = source.profiles[static_cast<std::size_t>(step.user)];
    const bool has_target = std::find(raw.begin(), raw.end(), target) != raw.end();
    if (policy_craft && has_target) {
      const VectorXd probs =
          crafting_probabilities(*bundle, out.trajectory.user_embeddings.back(), out.trajectory.item_embedding);
      step.clip_index = static_cast<int>(sample_categorical(probs, rng));
      step.crafted = true;
    } else {
      step.clip_index = has_target ? config.fixed_clip : static_cast<int>(kClipLevels.size()) - 1;
    }
    const double w = kClipLevels[static_cast<std::size_t>(step.clip_index)];
    Profile crafted = has_target ? craft_profile(raw, target, w) : raw;

    env.inject(std::span<const Profile>(&crafted, 1));
    out.injections.push_back({step.user, w, static_cast<int>(raw.size()), static_cast<int>(crafted.size())});
    out.crafted.push_back(std::move(crafted));
    out.trajectory.steps.push_back(std::move(step));
    ++unrewarded;

    if ((t + 1) % config.query_interval == 0) {
      if (observe() >= config.success_threshold) {
        out.termination = "success";
        break;
      }
    }
  }
  if (unrewarded > 0) observe();
  return out;
}

TrainingCurve train_agent(BlackBoxTarget& env, const ClusterTree& tree, PolicyBundle& bundle,
                          LearnerState& learner, const SourceView& source,
                          std::span<const ItemId> targets, int episodes_per_item,
                          const EpisodeConfig& config, Rng& rng) {
  if (episodes_per_item < 0) throw ConfigError("episodes_per_item must be non-negative");
  TrainingCurve curve;
  if (episodes_per_item == 0 || targets.empty()) return curve;
  std::vector<TreeMask> masks;
  for (ItemId item : targets) {
    masks.push_back(config.use_mask ? apply_mask(tree, item, source.profiles) : TreeMask::all(tree));
  }
  for (int ep = 0; ep < episodes_per_item; ++ep) {
    for (std::size_t i = 0; i < targets.size(); ++i) {
      auto result = run_episode(env, tree, masks[i], &bundle, source, targets[i], config, rng);
      compute_returns(result.trajectory, bundle.config.discount);
      const Trajectory* batch = &result.trajectory;
      reinforce_update(bundle, tree, std::span<const Trajectory>(batch, 1), learner);
      curve.items.push_back(targets[i]);
      curve.episode_rewards.push_back(result.trajectory.total_reward());
    }
  }
  return curve;
}

// ---------------------------------------------------------------------------

std::string to_string(AttackMethod method) {
  switch (method) {
    case AttackMethod::copyattack: return "copyattack";
    case AttackMethod::random: return "random";
    case AttackMethod::target40: return "target40";
    case AttackMethod::target70: return "target70";
    case AttackMethod::target100: return "target100";
    case AttackMethod::flat_policy: return "flat_policy";
    case AttackMethod::no_mask: return "no_mask";
    case AttackMethod::no_craft: return "no_craft";
  }
  return "?";
}

std::vector<AttackMethod> all_attack_methods() {
  return {AttackMethod::random,      AttackMethod::target40, AttackMethod::target70,
          AttackMethod::target100,   AttackMethod::flat_policy, AttackMethod::no_mask,
          AttackMethod::no_craft,    AttackMethod::copyattack};
}

AttackMethod parse_attack_method(const std::string& name) {
  std::string valid;
  for (auto m : all_attack_methods()) {
    if (to_string(m) == name) return m;
    valid += (valid.empty() ? "" : ", ") + to_string(m);
  }
  throw ConfigError("unknown attack method '" + name + "' (valid: " + valid + ")");
}

bool is_learned(AttackMethod method) {
  switch (method) {
    case AttackMethod::copyattack:
    case AttackMethod::flat_policy:
    case AttackMethod::no_mask:
    case AttackMethod::no_craft: return true;
    default: return false;
  }
}

bool uses_flat_tree(AttackMethod method) { return method == AttackMethod::flat_policy; }

EpisodeConfig method_episode_config(AttackMethod method, EpisodeConfig c) {
  constexpr int full = static_cast<int>(kClipLevels.size()) - 1;
  switch (method) {
    case AttackMethod::copyattack:
    case AttackMethod::flat_policy:
      c.selection = SelectionMode::policy;
      c.use_mask = true;
      c.crafting = CraftMode::policy;
      break;
    case AttackMethod::random:
      c.selection = SelectionMode::uniform;
      c.use_mask = false;
      c.crafting = CraftMode::fixed;
      c.fixed_clip = full;
      break;
    case AttackMethod::target40:
    case AttackMethod::target70:
    case AttackMethod::target100:
      c.selection = SelectionMode::uniform;
      c.use_mask = true;
      c.crafting = CraftMode::fixed;
      c.fixed_clip = method == AttackMethod::target40 ? 3 : method == AttackMethod::target70 ? 6 : full;
      break;
    case AttackMethod::no_mask:
      c.selection = SelectionMode::policy;
      c.use_mask = false;
      c.crafting = CraftMode::fixed;
      c.fixed_clip = full;
      break;
    case AttackMethod::no_craft:
      c.selection = SelectionMode::policy;
      c.use_mask = true;
      c.crafting = CraftMode::fixed;
      c.fixed_clip = full;
      break;
  }
  return c;
}

EpisodeResult baseline_attack(AttackMethod method, BlackBoxTarget& env, const ClusterTree& tree,
                              const SourceView& source, ItemId target, const EpisodeConfig& base,
                              Rng& rng) {
  if (is_learned(method)) {
    throw ConfigError(to_string(method) + " needs a trained policy, not a fixed baseline");
  }
  const auto config = method_episode_config(method, base);
  const TreeMask mask = config.use_mask ? apply_mask(tree, target, source.profiles) : TreeMask::all(tree);
  return run_episode(env, tree, mask, nullptr, source, target, config, rng);
}

// ---------------------------------------------------------------------------

double AttackReport::avg_items() const {
  if (episode.injections.empty()) return 0.0;
  return static_cast<double>(episode.item_budget()) / static_cast<double>(episode.injections.size());
}

json AttackReport::to_json() const {
  json ledger = json::array();
  for (const auto& r : episode.injections) {
    ledger.push_back({{"source_user", r.source_user}, {"w", r.w}, {"raw_length", r.raw_length}, {"length", r.length}});
  }
  json up = json::array();
  for (const auto& u : uplift) {
    up.push_back({{"k", u.k},
                  {"hr_before", u.hr_before},
                  {"hr_after", u.hr_after},
                  {"ndcg_before", u.ndcg_before},
                  {"ndcg_after", u.ndcg_after}});
  }
  return {{"method", method},
          {"target_item", target_item},
          {"budget", budget},
          {"seed", seed},
          {"termination", episode.termination},
          {"injections", episode.injections.size()},
          {"item_budget", episode.item_budget()},
          {"avg_items", avg_items()},
          {"reward_curve", episode.reward_curve},
          {"ledger", std::move(ledger)},
          {"uplift", std::move(up)},
          {"saturated", saturated}};
}

void write_reward_curve_csv(const AttackReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "query,reward\n";
  char buf[64];
  for (std::size_t i = 0; i < report.episode.reward_curve.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f\n", i + 1, report.episode.reward_curve[i]);
    out << buf;
  }
}

}  // namespace copyattack
