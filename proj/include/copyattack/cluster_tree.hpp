#pragma once

#include <copyattack/common.hpp>

#include <json.hpp>

#include <filesystem>
#include <span>
#include <vector>

namespace copyattack {

/// Balanced k-means over the rows of `points`: k-means++ seeding and Lloyd iterations,
/// then a global ascending-distance greedy reassignment so that cluster sizes are
/// ⌈n/c⌉ or ⌊n/c⌋. Returns the cluster index of every row.
std::vector<int> balanced_kmeans(const MatrixXd& points, int c, std::uint64_t rng_seed,
                                 int max_iters = 50);

struct TreeNode {
  int parent = -1;
  int depth = 0;
  std::vector<int> children;
  /// Source user held by a leaf, -1 for internal nodes.
  UserId user = -1;

  bool is_leaf() const { return user >= 0; }
};

/// Hierarchy whose leaves are source users. Nodes are numbered breadth-first from the
/// root (id 0); internal nodes additionally carry a dense index used by the policy.
class ClusterTree {
 public:
  ClusterTree() = default;
  ClusterTree(int branching, std::vector<TreeNode> nodes);

  /// Depth-1 tree: a root whose children are all the given users.
  static ClusterTree flat(std::span<const UserId> users);

  int branching() const { return branching_; }
  int depth() const { return depth_; }
  int root() const { return 0; }
  const std::vector<TreeNode>& nodes() const { return nodes_; }
  const TreeNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  int node_count() const { return static_cast<int>(nodes_.size()); }
  int leaf_count() const { return static_cast<int>(leaves_.size()); }
  int internal_count() const { return static_cast<int>(internal_.size()); }

  /// Internal node ids in breadth-first order; `internal_index(id)` inverts it.
  const std::vector<int>& internal_nodes() const { return internal_; }
  int internal_index(int node_id) const { return internal_index_.at(static_cast<std::size_t>(node_id)); }
  /// Leaf node ids in breadth-first order.
  const std::vector<int>& leaves() const { return leaves_; }
  /// Leaf node holding `user`, or -1.
  int leaf_of(UserId user) const;
  /// Leaves below `node_id` (1 for a leaf).
  int subtree_leaves(int node_id) const { return subtree_leaves_.at(static_cast<std::size_t>(node_id)); }

  nlohmann::json to_json() const;
  static ClusterTree from_json(const nlohmann::json& j);

 private:
  void index();

  int branching_ = 0;
  int depth_ = 0;
  std::vector<TreeNode> nodes_;
  std::vector<int> internal_;
  std::vector<int> internal_index_;
  std::vector<int> leaves_;
  std::vector<int> subtree_leaves_;
  std::vector<int> leaf_by_user_;
};

/// Top-down divisive construction: every cluster larger than c is split by
/// balanced_kmeans; clusters of at most c users become an internal node with one leaf
/// per user (a singleton produced by a split is attached as a leaf directly).
/// Row r of `embeddings` belongs to `users[r]`.
ClusterTree build_tree(const MatrixXd& embeddings, std::span<const UserId> users, int c,
                       std::uint64_t rng_seed, int max_iters = 50);

/// Smallest d with n ≤ c^d.
int tree_depth_for(long long n, int c);

/// Per-node eligibility for one target item. A leaf is eligible iff its user's profile
/// contains the item; an internal node iff any child is. `exclude_leaf` removes a leaf
/// (used for without-replacement selection) and updates the ancestors in O(depth).
class TreeMask {
 public:
  TreeMask() = default;
  TreeMask(const ClusterTree& tree, std::vector<std::uint8_t> leaf_eligible_by_node);
  /// Everything eligible.
  static TreeMask all(const ClusterTree& tree);

  ItemId target_item = -1;

  bool eligible(int node_id) const { return counts_.at(static_cast<std::size_t>(node_id)) > 0; }
  int eligible_leaves(int node_id) const { return counts_.at(static_cast<std::size_t>(node_id)); }
  int eligible_leaf_count() const { return counts_.empty() ? 0 : counts_[0]; }
  /// Eligibility of `node_id`'s children, in child order.
  std::vector<std::uint8_t> child_eligibility(int node_id) const;
  void exclude_leaf(int leaf_node);
  /// Ids of ineligible nodes, ascending.
  std::vector<int> masked_nodes() const;

 private:
  const ClusterTree* tree_ = nullptr;
  std::vector<int> counts_;
};

/// Mask for `target_item` given every source user's profile (indexed by UserId).
/// Throws DataError when no source profile contains the item.
TreeMask apply_mask(const ClusterTree& tree, ItemId target_item,
                    std::span<const Profile> source_profiles);

int eligible_leaf_count(const ClusterTree& tree, const TreeMask& mask);

nlohmann::json mask_to_json(const TreeMask& mask);

/// JSON checkpoint with a checksum; load throws IntegrityError on corruption.
void save_tree(const ClusterTree& tree, const std::filesystem::path& path);
ClusterTree load_tree(const std::filesystem::path& path);

}  // namespace copyattack
