#include <copyattack/checkpoint.hpp>
#include <copyattack/cluster_tree.hpp>
#include <copyattack/random.hpp>

#include <algorithm>
#include <deque>
#include <limits>
#include <tuple>

namespace copyattack {

using nlohmann::json;

namespace {

std::vector<int> nearest_assignment(const MatrixXd& points, const MatrixXd& centroids) {
  std::vector<int> out(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    Eigen::Index best = 0;
    (centroids.rowwise() - points.row(i)).rowwise().squaredNorm().minCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

MatrixXd kmeans_pp_seed(const MatrixXd& points, int c, Rng& rng) {
  const Eigen::Index n = points.rows();
  MatrixXd centroids(c, points.cols());
  centroids.row(0) = points.row(static_cast<Eigen::Index>(uniform_index(rng, n)));
  VectorXd d2 = (points.rowwise() - centroids.row(0)).rowwise().squaredNorm();
  for (int k = 1; k < c; ++k) {
    const double total = d2.sum();
    Eigen::Index pick;
    if (total > 0.0) {
      pick = static_cast<Eigen::Index>(
          sample_weighted(std::span<const double>(d2.data(), static_cast<std::size_t>(n)), total, rng));
    } else {
      pick = static_cast<Eigen::Index>(uniform_index(rng, n));  // all points coincide
    }
    centroids.row(k) = points.row(pick);
    d2 = d2.cwiseMin((points.rowwise() - centroids.row(k)).rowwise().squaredNorm());
  }
  return centroids;
}

}  // namespace

std::vector<int> balanced_kmeans(const MatrixXd& points, int c, std::uint64_t rng_seed,
                                 int max_iters) {
  const Eigen::Index n = points.rows();
  if (c < 2) throw ConfigError("balanced_kmeans: c must be at least 2");
  if (n < c) {
    throw ConfigError("balanced_kmeans: " + std::to_string(n) + " points cannot fill " +
                      std::to_string(c) + " clusters");
  }
  if (max_iters < 1) throw ConfigError("balanced_kmeans: max_iters must be positive");

  Rng rng(rng_seed);
  MatrixXd centroids = kmeans_pp_seed(points, c, rng);
  std::vector<int> assign = nearest_assignment(points, centroids);
  for (int iter = 0; iter < max_iters; ++iter) {
    MatrixXd sums = MatrixXd::Zero(c, points.cols());
    std::vector<int> sizes(static_cast<std::size_t>(c), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += points.row(i);
      ++sizes[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    for (int k = 0; k < c; ++k) {
      if (sizes[static_cast<std::size_t>(k)] > 0) centroids.row(k) = sums.row(k) / sizes[static_cast<std::size_t>(k)];
    }
    auto next = nearest_assignment(points, centroids);
    if (next == assign) break;
    assign = std::move(next);
  }

  // Global greedy: smallest distance first, capacity ⌈n/c⌉ for at most n mod c clusters
  // and ⌊n/c⌋ for the rest.
  struct Candidate {
    double dist;
    int point;
    int cluster;
  };
  std::vector<Candidate> candidates;
  candidates.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(c));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int k = 0; k < c; ++k) {
      candidates.push_back({(points.row(i) - centroids.row(k)).squaredNorm(), static_cast<int>(i), k});
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    return std::tie(a.dist, a.point, a.cluster) < std::tie(b.dist, b.point, b.cluster);
  });

  const int lo = static_cast<int>(n / c);
  const int big_allowed = static_cast<int>(n % c);
  int big = 0;
  std::vector<int> size(static_cast<std::size_t>(c), 0);
  std::vector<int> out(static_cast<std::size_t>(n), -1);
  Eigen::Index placed = 0;
  for (const auto& cand : candidates) {
    if (placed == n) break;
    auto& slot = out[static_cast<std::size_t>(cand.point)];
    if (slot >= 0) continue;
    int& s = size[static_cast<std::size_t>(cand.cluster)];
    if (s < lo) {
      ++s;
    } else if (s == lo && big < big_allowed) {
      ++s;
      ++big;
    } else {
      continue;
    }
    slot = cand.cluster;
    ++placed;
  }
  return out;
}

int tree_depth_for(long long n, int c) {
  if (c < 2) throw ConfigError("branching factor must be at least 2");
  int d = 0;
  for (long long p = 1; p < n; p *= c) ++d;
  return d;
}

// ---------------------------------------------------------------------------

ClusterTree::ClusterTree(int branching, std::vector<TreeNode> nodes)
    : branching_(branching), nodes_(std::move(nodes)) {
  index();
}

void ClusterTree::index() {
  if (nodes_.empty()) throw IntegrityError("tree has no nodes");
  if (nodes_[0].is_leaf()) throw IntegrityError("tree root must be internal");
  const int count = node_count();
  internal_.clear();
  leaves_.clear();
  internal_index_.assign(nodes_.size(), -1);
  subtree_leaves_.assign(nodes_.size(), 0);
  nodes_[0].parent = -1;
  nodes_[0].depth = 0;
  depth_ = 0;
  UserId max_user = -1;
  for (int id = 0; id < count; ++id) {
    auto& nd = nodes_[static_cast<std::size_t>(id)];
    if (nd.is_leaf()) {
      if (!nd.children.empty()) throw IntegrityError("leaf node " + std::to_string(id) + " has children");
      leaves_.push_back(id);
      max_user = std::max(max_user, nd.user);
      depth_ = std::max(depth_, nd.depth);
      continue;
    }
    if (nd.children.empty()) throw IntegrityError("internal node " + std::to_string(id) + " has no children");
    internal_index_[static_cast<std::size_t>(id)] = static_cast<int>(internal_.size());
    internal_.push_back(id);
    for (int ch : nd.children) {
      if (ch <= id || ch >= count) throw IntegrityError("bad child id " + std::to_string(ch));
      auto& child = nodes_[static_cast<std::size_t>(ch)];
      child.parent = id;
      child.depth = nd.depth + 1;
    }
  }
  for (int id = count - 1; id >= 0; --id) {
    const auto& nd = nodes_[static_cast<std::size_t>(id)];
    if (id > 0 && nd.parent < 0) throw IntegrityError("node " + std::to_string(id) + " is unreachable");
    int total = nd.is_leaf() ? 1 : 0;
    for (int ch : nd.children) total += subtree_leaves_[static_cast<std::size_t>(ch)];
    subtree_leaves_[static_cast<std::size_t>(id)] = total;
  }
  leaf_by_user_.assign(static_cast<std::size_t>(max_user + 1), -1);
  for (int leaf : leaves_) {
    auto& slot = leaf_by_user_[static_cast<std::size_t>(nodes_[static_cast<std::size_t>(leaf)].user)];
    if (slot >= 0) throw IntegrityError("user appears in two leaves");
    slot = leaf;
  }
}

int ClusterTree::leaf_of(UserId user) const {
  if (user < 0 || static_cast<std::size_t>(user) >= leaf_by_user_.size()) return -1;
  return leaf_by_user_[static_cast<std::size_t>(user)];
}

ClusterTree ClusterTree::flat(std::span<const UserId> users) {
  if (users.empty()) throw ConfigError("flat tree needs at least one user");
  std::vector<TreeNode> nodes(users.size() + 1);
  for (std::size_t i = 0; i < users.size(); ++i) {
    if (users[i] < 0) throw ConfigError("negative user id");
    nodes[0].children.push_back(static_cast<int>(i + 1));
    nodes[i + 1].user = users[i];
  }
  return ClusterTree(static_cast<int>(std::max<std::size_t>(users.size(), 2)), std::move(nodes));
}

json ClusterTree::to_json() const {
  json nodes = json::array();
  for (const auto& nd : nodes_) {
    if (nd.is_leaf()) {
      nodes.push_back({{"user", nd.user}});
    } else {
      nodes.push_back({{"children", nd.children}});
    }
  }
  return {{"branching", branching_}, {"depth", depth_},           {"internal_count", internal_count()},
          {"leaf_count", leaf_count()}, {"nodes", std::move(nodes)}};
}

ClusterTree ClusterTree::from_json(const json& j) {
  try {
    std::vector<TreeNode> nodes;
    for (const auto& e : j.at("nodes")) {
      TreeNode nd;
      if (e.contains("user")) {
        nd.user = e.at("user").get<UserId>();
        if (nd.user < 0) throw IntegrityError("negative user id in tree");
      } else {
        nd.children = e.at("children").get<std::vector<int>>();
      }
      nodes.push_back(std::move(nd));
    }
    ClusterTree tree(j.at("branching").get<int>(), std::move(nodes));
    if (tree.depth() != j.at("depth").get<int>()) throw IntegrityError("tree depth does not match its nodes");
    return tree;
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("malformed tree: ") + e.what());
  }
}

ClusterTree build_tree(const MatrixXd& embeddings, std::span<const UserId> users, int c,
                       std::uint64_t rng_seed, int max_iters) {
  if (c < 2) throw ConfigError("build_tree: branching factor must be at least 2");
  if (users.size() < 2) throw ConfigError("build_tree: need at least 2 users");
  if (embeddings.rows() != static_cast<Eigen::Index>(users.size())) {
    throw ConfigError("build_tree: one embedding row per user expected");
  }

  std::vector<TreeNode> nodes(1);
  // Internal nodes still to expand, with their members as embedding rows.
  std::deque<std::pair<int, std::vector<int>>> pending;
  std::vector<int> all(users.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  pending.emplace_back(0, std::move(all));

  auto add_leaf = [&](int parent, int row) {
    TreeNode leaf;
    leaf.user = users[static_cast<std::size_t>(row)];
    nodes.push_back(leaf);
    nodes[static_cast<std::size_t>(parent)].children.push_back(static_cast<int>(nodes.size()) - 1);
  };

  while (!pending.empty()) {
    auto [id, members] = std::move(pending.front());
    pending.pop_front();
    if (static_cast<int>(members.size()) <= c) {
      for (int row : members) add_leaf(id, row);
      continue;
    }
    MatrixXd pts(static_cast<Eigen::Index>(members.size()), embeddings.cols());
    for (std::size_t i = 0; i < members.size(); ++i) {
      pts.row(static_cast<Eigen::Index>(i)) = embeddings.row(members[i]);
    }
    const auto assign =
        balanced_kmeans(pts, c, derive_seed(rng_seed, static_cast<std::uint64_t>(id)), max_iters);
    std::vector<std::vector<int>> groups(static_cast<std::size_t>(c));
    for (std::size_t i = 0; i < members.size(); ++i) {
      groups[static_cast<std::size_t>(assign[i])].push_back(members[i]);
    }
    for (auto& g : groups) {
      if (g.size() == 1) {
        add_leaf(id, g.front());
        continue;
      }
      nodes.emplace_back();
      const int child = static_cast<int>(nodes.size()) - 1;
      nodes[static_cast<std::size_t>(id)].children.push_back(child);
      pending.emplace_back(child, std::move(g));
    }
  }
  return ClusterTree(c, std::move(nodes));
}

// ---------------------------------------------------------------------------

TreeMask::TreeMask(const ClusterTree& tree, std::vector<std::uint8_t> leaf_eligible_by_node)
    : tree_(&tree), counts_(static_cast<std::size_t>(tree.node_count()), 0) {
  if (leaf_eligible_by_node.size() != counts_.size()) {
    throw ConfigError("mask size does not match the tree");
  }
  for (int id = tree.node_count() - 1; id >= 0; --id) {
    const auto& nd = tree.node(id);
    int total = nd.is_leaf() && leaf_eligible_by_node[static_cast<std::size_t>(id)] ? 1 : 0;
    for (int ch : nd.children) total += counts_[static_cast<std::size_t>(ch)];
    counts_[static_cast<std::size_t>(id)] = total;
  }
}

TreeMask TreeMask::all(const ClusterTree& tree) {
  return TreeMask(tree, std::vector<std::uint8_t>(static_cast<std::size_t>(tree.node_count()), 1));
}

std::vector<std::uint8_t> TreeMask::child_eligibility(int node_id) const {
  const auto& children = tree_->node(node_id).children;
  std::vector<std::uint8_t> out(children.size());
  for (std::size_t i = 0; i < children.size(); ++i) {
    out[i] = counts_[static_cast<std::size_t>(children[i])] > 0 ? 1 : 0;
  }
  return out;
}

void TreeMask::exclude_leaf(int leaf_node) {
  if (!tree_->node(leaf_node).is_leaf()) throw ConfigError("exclude_leaf: not a leaf");
  if (counts_[static_cast<std::size_t>(leaf_node)] == 0) return;
  for (int id = leaf_node; id >= 0; id = tree_->node(id).parent) {
    --counts_[static_cast<std::size_t>(id)];
  }
}

std::vector<int> TreeMask::masked_nodes() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < counts_.size(); ++i) {
    if (counts_[i] == 0) out.push_back(static_cast<int>(i));
  }
  return out;
}

TreeMask apply_mask(const ClusterTree& tree, ItemId target_item,
                    std::span<const Profile> source_profiles) {
  std::vector<std::uint8_t> leaf(static_cast<std::size_t>(tree.node_count()), 0);
  int found = 0;
  for (int id : tree.leaves()) {
    const UserId u = tree.node(id).user;
    if (static_cast<std::size_t>(u) >= source_profiles.size()) {
      throw DataError("tree leaf refers to unknown source user " + std::to_string(u));
    }
    const auto& p = source_profiles[static_cast<std::size_t>(u)];
    if (std::find(p.begin(), p.end(), target_item) != p.end()) {
      leaf[static_cast<std::size_t>(id)] = 1;
      ++found;
    }
  }
  if (found == 0) {
    throw DataError("no source profile contains target item " + std::to_string(target_item));
  }
  TreeMask mask(tree, std::move(leaf));
  mask.target_item = target_item;
  return mask;
}

int eligible_leaf_count(const ClusterTree&, const TreeMask& mask) {
  return mask.eligible_leaf_count();
}

json mask_to_json(const TreeMask& mask) {
  return {{"target_item", mask.target_item},
          {"eligible_leaves", mask.eligible_leaf_count()},
          {"masked_nodes", mask.masked_nodes()}};
}

void save_tree(const ClusterTree& tree, const std::filesystem::path& path) {
  write_json_file(path, seal(tree.to_json(), "copyattack.tree"));
}

ClusterTree load_tree(const std::filesystem::path& path) {
  return ClusterTree::from_json(unseal(read_json_file(path), "copyattack.tree"));
}

}  // namespace copyattack
