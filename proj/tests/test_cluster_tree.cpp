#include <copyattack/cluster_tree.hpp>
#include <copyattack/random.hpp>

#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

using namespace copyattack;

namespace {

MatrixXd random_points(int n, int e, std::uint64_t seed) {
  Rng rng(seed);
  return MatrixXd::NullaryExpr(n, e, [&] { return standard_normal(rng); });
}

std::vector<UserId> iota_users(int n) {
  std::vector<UserId> u(static_cast<std::size_t>(n));
  std::iota(u.begin(), u.end(), 0);
  return u;
}

std::map<int, int> cluster_sizes(const std::vector<int>& assign) {
  std::map<int, int> sizes;
  for (int a : assign) ++sizes[a];
  return sizes;
}

// Brute-force descendant scan.
bool any_eligible_leaf(const ClusterTree& tree, int node, const std::set<UserId>& holders) {
  const auto& nd = tree.node(node);
  if (nd.is_leaf()) return holders.count(nd.user) > 0;
  return std::any_of(nd.children.begin(), nd.children.end(),
                     [&](int ch) { return any_eligible_leaf(tree, ch, holders); });
}

void check_balanced(const ClusterTree& tree) {
  for (int id : tree.internal_nodes()) {
    const auto& ch = tree.node(id).children;
    int lo = INT32_MAX, hi = 0;
    for (int c : ch) {
      lo = std::min(lo, tree.subtree_leaves(c));
      hi = std::max(hi, tree.subtree_leaves(c));
    }
    CHECK(hi - lo <= 1);
  }
}

}  // namespace

TEST_CASE("balanced k-means sizes") {
  CHECK(cluster_sizes(balanced_kmeans(random_points(10, 2, 1), 2, 7)) == std::map<int, int>{{0, 5}, {1, 5}});
  const auto nine = cluster_sizes(balanced_kmeans(random_points(9, 2, 1), 2, 7));
  std::vector<int> s;
  for (auto [k, v] : nine) s.push_back(v);
  std::sort(s.begin(), s.end());
  CHECK(s == std::vector<int>{4, 5});
  CHECK_THROWS_AS(balanced_kmeans(random_points(3, 2, 1), 4, 7), ConfigError);
}

TEST_CASE("balanced k-means recovers two separated 1-D groups") {
  MatrixXd pts(6, 1);
  pts << 0, 0.1, 0.2, 10, 10.1, 10.2;
  // Brute force: best balanced 2-partition by total within-cluster distance.
  double best = 1e300;
  unsigned best_mask = 0;
  for (unsigned m = 0; m < 64; ++m) {
    if (__builtin_popcount(m) != 3) continue;
    double cost = 0;
    for (int i = 0; i < 6; ++i) {
      for (int j = i + 1; j < 6; ++j) {
        if (((m >> i) & 1) == ((m >> j) & 1)) cost += std::abs(pts(i, 0) - pts(j, 0));
      }
    }
    if (cost < best) {
      best = cost;
      best_mask = m;
    }
  }
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = balanced_kmeans(pts, 2, seed);
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j < 6; ++j) {
        const bool same_oracle = ((best_mask >> i) & 1) == ((best_mask >> j) & 1);
        CHECK((a[static_cast<std::size_t>(i)] == a[static_cast<std::size_t>(j)]) == same_oracle);
      }
    }
  }
}

TEST_CASE("balanced k-means is deterministic per seed") {
  const auto pts = random_points(200, 4, 3);
  CHECK(balanced_kmeans(pts, 5, 42) == balanced_kmeans(pts, 5, 42));
}

TEST_CASE("tree depth arithmetic") {
  CHECK(tree_depth_for(8, 2) == 3);
  CHECK(tree_depth_for(4, 4) == 1);
  CHECK(tree_depth_for(20, 3) == 3);
  CHECK(tree_depth_for(9, 3) == 2);
  CHECK(tree_depth_for(10, 3) == 3);
}

TEST_CASE("build_tree worked sizes") {
  SUBCASE("n=8, c=2: depth 3 and seven internal nodes") {
    const auto t = build_tree(random_points(8, 3, 1), iota_users(8), 2, 5);
    CHECK(t.depth() == 3);
    CHECK(t.internal_count() == 7);
    CHECK(t.leaf_count() == 8);
  }
  SUBCASE("n=c: a root with c leaves") {
    const auto t = build_tree(random_points(4, 3, 1), iota_users(4), 4, 5);
    CHECK(t.depth() == 1);
    CHECK(t.internal_count() == 1);
    CHECK(t.node(0).children.size() == 4);
  }
  SUBCASE("n=20, c=3: depth 3, at most 13 internal nodes") {
    const auto t = build_tree(random_points(20, 3, 1), iota_users(20), 3, 5);
    CHECK(t.depth() == 3);
    CHECK(t.internal_count() <= 13);
  }
  SUBCASE("fewer than two users") {
    CHECK_THROWS_AS(build_tree(random_points(1, 3, 1), iota_users(1), 2, 5), ConfigError);
  }
}

TEST_CASE("tree invariants over random (n, c)") {
  Rng rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    const int c = 2 + static_cast<int>(uniform_index(rng, 7));
    const int n = c + static_cast<int>(uniform_index(rng, 600));
    const auto users = iota_users(n);
    const auto t = build_tree(random_points(n, 4, rng()), users, c, rng());
    const int d = tree_depth_for(n, c);
    CAPTURE(n);
    CAPTURE(c);
    CHECK(t.depth() == d);
    check_balanced(t);
    long long bound = 0, p = 1;
    for (int i = 0; i < d; ++i, p *= c) bound += p;
    CHECK(t.internal_count() <= bound);
    // Partition.
    std::vector<UserId> leaves;
    for (int id : t.leaves()) leaves.push_back(t.node(id).user);
    std::sort(leaves.begin(), leaves.end());
    CHECK(leaves == users);
    for (int id : t.leaves()) CHECK(t.node(id).depth <= d);
  }
}

TEST_CASE("internal node count equals the full-tree formula when n = c^d") {
  for (auto [c, d] : std::vector<std::pair<int, int>>{{2, 4}, {3, 3}, {4, 2}, {5, 2}}) {
    int n = 1;
    for (int i = 0; i < d; ++i) n *= c;
    const auto t = build_tree(random_points(n, 3, 8), iota_users(n), c, 1);
    CHECK(t.depth() == d);
    long long full = 0, p = 1;
    for (int i = 0; i < d; ++i, p *= c) full += p;
    CHECK(t.internal_count() == full);
  }
}

TEST_CASE("nodes are numbered breadth first") {
  const auto t = build_tree(random_points(50, 3, 4), iota_users(50), 3, 2);
  int prev_depth = 0;
  for (const auto& nd : t.nodes()) {
    CHECK(nd.depth >= prev_depth);
    prev_depth = nd.depth;
  }
}

TEST_CASE("masking") {
  const int n = 8;
  const auto t = build_tree(random_points(n, 3, 9), iota_users(n), 2, 3);
  std::vector<Profile> profiles(n, Profile{1, 2, 3});

  SUBCASE("every profile holds the item") {
    const auto m = apply_mask(t, 2, profiles);
    CHECK(m.masked_nodes().empty());
    CHECK(eligible_leaf_count(t, m) == n);
  }
  SUBCASE("one holder leaves exactly one path") {
    profiles[5] = {2, 99};
    for (int u = 0; u < n; ++u) {
      if (u != 5) profiles[static_cast<std::size_t>(u)] = {1};
    }
    const auto m = apply_mask(t, 99, profiles);
    CHECK(eligible_leaf_count(t, m) == 1);
    int node = 0;
    while (!t.node(node).is_leaf()) {
      const auto el = m.child_eligibility(node);
      CHECK(std::count(el.begin(), el.end(), 1) == 1);
      node = t.node(node).children[static_cast<std::size_t>(std::find(el.begin(), el.end(), 1) - el.begin())];
    }
    CHECK(t.node(node).user == 5);
  }
  SUBCASE("two sibling leaves lacking the item mask their parent only") {
    // Pick the users under one bottom internal node.
    int bottom = -1;
    for (int id : t.internal_nodes()) {
      const auto& ch = t.node(id).children;
      if (ch.size() == 2 && t.node(ch[0]).is_leaf() && t.node(ch[1]).is_leaf()) bottom = id;
    }
    REQUIRE(bottom >= 0);
    for (int ch : t.node(bottom).children) profiles[static_cast<std::size_t>(t.node(ch).user)] = {1, 3};
    const auto m = apply_mask(t, 2, profiles);
    CHECK_FALSE(m.eligible(bottom));
    CHECK(m.eligible(t.node(bottom).parent));
    CHECK(eligible_leaf_count(t, m) == 6);
  }
  SUBCASE("no holder is an error") {
    CHECK_THROWS_AS(apply_mask(t, 77, profiles), DataError);
  }
}

TEST_CASE("mask consistency against brute force on random masks") {
  Rng rng(77);
  const int n = 64;
  const auto t = build_tree(random_points(n, 4, 1), iota_users(n), 4, 1);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<Profile> profiles(n);
    std::set<UserId> holders;
    for (int u = 0; u < n; ++u) {
      profiles[static_cast<std::size_t>(u)] = {0};
      if (uniform01(rng) < 0.3 || u == trial) {
        profiles[static_cast<std::size_t>(u)].push_back(5);
        holders.insert(u);
      }
    }
    const auto m = apply_mask(t, 5, profiles);
    CHECK(eligible_leaf_count(t, m) == static_cast<int>(holders.size()));
    for (int id = 0; id < t.node_count(); ++id) CHECK(m.eligible(id) == any_eligible_leaf(t, id, holders));
  }
}

TEST_CASE("exclude_leaf updates ancestors") {
  const auto t = build_tree(random_points(9, 2, 1), iota_users(9), 3, 1);
  auto m = TreeMask::all(t);
  const int leaf = t.leaves().front();
  m.exclude_leaf(leaf);
  CHECK(m.eligible_leaf_count() == 8);
  CHECK_FALSE(m.eligible(leaf));
  m.exclude_leaf(leaf);  // idempotent
  CHECK(m.eligible_leaf_count() == 8);
  for (int l : t.leaves()) m.exclude_leaf(l);
  CHECK(m.eligible_leaf_count() == 0);
  CHECK_FALSE(m.eligible(0));
}

TEST_CASE("flat tree") {
  const std::vector<UserId> users{4, 9, 2};
  const auto t = ClusterTree::flat(users);
  CHECK(t.depth() == 1);
  CHECK(t.internal_count() == 1);
  CHECK(t.leaf_count() == 3);
  CHECK(t.node(t.leaf_of(9)).user == 9);
}

TEST_CASE("tree checkpoint round trip and corruption") {
  const auto t = build_tree(random_points(30, 3, 2), iota_users(30), 3, 4);
  const auto dir = std::filesystem::temp_directory_path() / "copyattack_tree_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "tree.json";
  save_tree(t, path);
  const auto back = load_tree(path);
  CHECK(back.to_json() == t.to_json());

  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)), {});
  in.close();
  const auto pos = text.find("\"user\":7");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 8, "\"user\":8");
  std::ofstream(path) << text;
  CHECK_THROWS_AS(load_tree(path), IntegrityError);
  std::filesystem::remove_all(dir);
}
