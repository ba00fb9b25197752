#pragma once

// Oracles and fixtures shared by the unit tests and the acceptance runner.

#include <copyattack/attack.hpp>
#include <copyattack/cluster_tree.hpp>
#include <copyattack/metrics.hpp>
#include <copyattack/policy.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

namespace copyattack::testing {

/// Pays reward 1 when the last injected profile contains `marker`.
class ArmEnvironment final : public BlackBoxTarget {
 public:
  ArmEnvironment(ItemId target, ItemId marker) : target_(target), marker_(marker) {}
  void reset() override {
    hit_ = false;
    ++resets;
  }
  void inject(std::span<const Profile> profiles) override {
    for (const auto& p : profiles) hit_ = std::find(p.begin(), p.end(), marker_) != p.end();
    injected += static_cast<int>(profiles.size());
  }
  std::vector<std::vector<ItemId>> query_pretend_users(int) override {
    ++queries;
    return {hit_ ? std::vector<ItemId>{target_} : std::vector<ItemId>{target_ + 1}};
  }
  int pretend_user_count() const override { return 1; }

  int resets = 0, injected = 0, queries = 0;

 private:
  ItemId target_, marker_;
  bool hit_ = false;
};

inline EmbeddingTable toy_embeddings(int users, std::span<const ItemId> items, int e, std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingTable t;
  t.user_ids.resize(static_cast<std::size_t>(users));
  std::iota(t.user_ids.begin(), t.user_ids.end(), 0);
  t.item_ids.assign(items.begin(), items.end());
  std::sort(t.item_ids.begin(), t.item_ids.end());
  t.user_vectors = MatrixXd::NullaryExpr(users, e, [&] { return 0.5 * standard_normal(rng); });
  t.item_vectors = MatrixXd::NullaryExpr(static_cast<Eigen::Index>(items.size()), e,
                                         [&] { return 0.5 * standard_normal(rng); });
  return t;
}


/// Relative error with an absolute floor for components that are essentially zero.
inline double gradient_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale <= 1e-7) return std::abs(analytic - numeric) <= 1e-9 ? 0.0 : 1.0;
  return std::abs(analytic - numeric) / scale;
}

/// Rolls a trajectory without an environment: policy-drawn paths under `mask` (with
/// selected leaves excluded), policy-drawn clip levels, arbitrary rewards.
inline Trajectory synthetic_trajectory(const ClusterTree& tree, TreeMask mask,
                                       const PolicyBundle& bundle, const MatrixXd& user_embeddings,
                                       int steps, Rng& rng) {
  const int e = bundle.config.embedding_dim;
  Trajectory traj;
  traj.item_embedding = VectorXd::NullaryExpr(e, [&] { return standard_normal(rng); });
  for (int t = 0; t < steps && mask.eligible_leaf_count() > 0; ++t) {
    const VectorXd x = encode_state(bundle, traj.user_embeddings);
    auto path = select_path(tree, mask, bundle, traj.item_embedding, x, rng);
    mask.exclude_leaf(path.leaf);
    TrajectoryStep step;
    step.path = std::move(path.steps);
    step.user = path.user;
    const VectorXd p = user_embeddings.row(path.user).transpose();
    step.crafted = t % 3 != 2;
    if (step.crafted) {
      step.clip_index = static_cast<int>(sample_categorical(crafting_probabilities(bundle, p, traj.item_embedding), rng));
    }
    step.reward = uniform01(rng);
    traj.user_embeddings.push_back(p);
    traj.steps.push_back(std::move(step));
  }
  return traj;
}

/// Max gradient_error between policy_gradient and central differences of
/// policy_objective over every parameter.
inline double max_gradient_error(const PolicyBundle& bundle, const ClusterTree& tree,
                                 const Trajectory& traj, const std::vector<double>& adv,
                                 double step = 1e-5) {
  PolicyBundle grad = bundle.zeros_like();
  policy_gradient(bundle, tree, traj, adv, grad);
  std::vector<double> analytic;
  grad.for_each_block([&](const double* d, Eigen::Index n) { analytic.insert(analytic.end(), d, d + n); });

  PolicyBundle probe = bundle;
  std::vector<double*> slots;
  probe.for_each_block([&](double* d, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) slots.push_back(d + i);
  });
  double worst = 0.0;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    const double saved = *slots[k];
    *slots[k] = saved + step;
    const double up = policy_objective(probe, tree, traj, adv);
    *slots[k] = saved - step;
    const double down = policy_objective(probe, tree, traj, adv);
    *slots[k] = saved;
    worst = std::max(worst, gradient_error(analytic[k], (up - down) / (2.0 * step)));
  }
  return worst;
}

/// General DCG over binary relevance, divided by the ideal DCG of one relevant item.
inline double brute_ndcg(const std::vector<ItemId>& ranked, ItemId relevant, int k) {
  double dcg = 0.0;
  for (std::size_t i = 0; i < ranked.size() && i < static_cast<std::size_t>(k); ++i) {
    const double rel = ranked[i] == relevant ? 1.0 : 0.0;
    dcg += (std::pow(2.0, rel) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
  }
  return dcg;  // ideal DCG of a single relevant item is 1
}

inline int brute_hit(const std::vector<ItemId>& ranked, ItemId relevant, int k) {
  for (std::size_t i = 0; i < ranked.size() && i < static_cast<std::size_t>(k); ++i) {
    if (ranked[i] == relevant) return 1;
  }
  return 0;
}

struct MetricOracleResult {
  long long cases = 0;
  long long mismatches = 0;
};

/// Every permutation of {0..L-1} for L <= max_length, every relevant item (plus one
/// absent item) and every k in 1..L+1, compared exactly against the oracles.
inline MetricOracleResult exhaustive_metric_check(int max_length) {
  MetricOracleResult r;
  for (int len = 1; len <= max_length; ++len) {
    std::vector<ItemId> ranked(static_cast<std::size_t>(len));
    std::iota(ranked.begin(), ranked.end(), 0);
    do {
      for (ItemId rel = 0; rel <= len; ++rel) {
        for (int k = 1; k <= len + 1; ++k) {
          ++r.cases;
          if (hit_ratio(ranked, rel, k) != brute_hit(ranked, rel, k) ||
              ndcg_single(ranked, rel, k) != brute_ndcg(ranked, rel, k)) {
            ++r.mismatches;
          }
        }
      }
    } while (std::next_permutation(ranked.begin(), ranked.end()));
  }
  return r;
}

}  // namespace copyattack::testing
