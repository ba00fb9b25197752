#include <copyattack/policy.hpp>

#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

using namespace copyattack;
using copyattack::testing::max_gradient_error;
using copyattack::testing::synthetic_trajectory;

namespace {

std::vector<UserId> iota_users(int n) {
  std::vector<UserId> u(static_cast<std::size_t>(n));
  std::iota(u.begin(), u.end(), 0);
  return u;
}

struct Fixture {
  MatrixXd embeddings;
  ClusterTree tree;
  PolicyConfig config;

  Fixture(int n, int c, int e, std::uint64_t seed) {
    Rng rng(seed);
    embeddings = MatrixXd::NullaryExpr(n, e, [&] { return standard_normal(rng); });
    tree = build_tree(embeddings, iota_users(n), c, seed);
    config.embedding_dim = e;
    config.state_dim = e;
  }
};

}  // namespace

TEST_CASE("bundle shapes follow the tree") {
  Fixture f(20, 3, 8, 1);
  const auto b = PolicyBundle::create(f.tree, f.config, 3);
  REQUIRE(b.node_policies.size() == static_cast<std::size_t>(f.tree.internal_count()));
  for (int id : f.tree.internal_nodes()) {
    const auto& m = b.node_policies[static_cast<std::size_t>(f.tree.internal_index(id))];
    CHECK(m.output_size() == static_cast<int>(f.tree.node(id).children.size()));
    CHECK(m.input_size() == 16);
  }
  CHECK(b.crafting.output_size() == 10);
}

TEST_CASE("crafting distribution") {
  Fixture f(8, 2, 4, 1);
  auto b = PolicyBundle::create(f.tree, f.config, 3);
  const VectorXd p = VectorXd::Constant(4, 0.3), q = VectorXd::Constant(4, -0.2);
  SUBCASE("zero crafting weights are uniform") {
    b.crafting = b.crafting.zeros_like();
    const VectorXd probs = crafting_probabilities(b, p, q);
    CHECK(probs.size() == 10);
    for (int i = 0; i < 10; ++i) CHECK(probs[i] == doctest::Approx(0.1).epsilon(1e-15));
  }
  SUBCASE("matches a hand-rolled forward pass") {
    const VectorXd probs = crafting_probabilities(b, p, q);
    CHECK(probs.sum() == doctest::Approx(1.0).epsilon(1e-12));
    VectorXd in(8);
    in << p, q;
    const auto& W1 = b.crafting.weights[0];
    const auto& W2 = b.crafting.weights[1];
    std::vector<double> hid(static_cast<std::size_t>(W1.rows()));
    for (Eigen::Index i = 0; i < W1.rows(); ++i) {
      double z = b.crafting.biases[0][i];
      for (Eigen::Index j = 0; j < 8; ++j) z += W1(i, j) * in[j];
      hid[static_cast<std::size_t>(i)] = std::tanh(z);
    }
    std::vector<double> logit(10);
    double mx = -1e300;
    for (int o = 0; o < 10; ++o) {
      double z = b.crafting.biases[1][o];
      for (Eigen::Index j = 0; j < W2.cols(); ++j) z += W2(o, j) * hid[static_cast<std::size_t>(j)];
      logit[static_cast<std::size_t>(o)] = z;
      mx = std::max(mx, z);
    }
    double s = 0;
    for (double z : logit) s += std::exp(z - mx);
    for (int o = 0; o < 10; ++o) CHECK(probs[o] == doctest::Approx(std::exp(logit[static_cast<std::size_t>(o)] - mx) / s).epsilon(1e-12));
  }
  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(crafting_probabilities(b, VectorXd::Zero(3), q), ConfigError);
  }
}

TEST_CASE("select_path: uniform depth-1 tree") {
  const std::vector<UserId> users{0, 1, 2, 3};
  const auto tree = ClusterTree::flat(users);
  PolicyConfig config;
  config.embedding_dim = config.state_dim = 4;
  auto b = PolicyBundle::create(tree, config, 1);
  b.node_policies[0] = b.node_policies[0].zeros_like();
  const auto mask = TreeMask::all(tree);
  Rng rng(17);
  const int draws = 100000;
  std::vector<int> hits(4, 0);
  const VectorXd q = VectorXd::Zero(4), x = VectorXd::Zero(4);
  for (int i = 0; i < draws; ++i) ++hits[static_cast<std::size_t>(select_path(tree, mask, b, q, x, rng).user)];
  const double sigma = std::sqrt(draws * 0.25 * 0.75);
  for (int h : hits) CHECK(std::abs(h - draws * 0.25) <= 3 * sigma);
}

TEST_CASE("select_path: single eligible chain has log-probability 0") {
  Fixture f(9, 3, 4, 2);
  const auto b = PolicyBundle::create(f.tree, f.config, 3);
  std::vector<Profile> profiles(9, Profile{1});
  profiles[4] = {1, 2};
  const auto mask = apply_mask(f.tree, 2, profiles);
  Rng rng(1);
  const auto s = select_path(f.tree, mask, b, VectorXd::Ones(4), VectorXd::Zero(4), rng);
  CHECK(s.user == 4);
  CHECK(s.log_prob == 0.0);
}

TEST_CASE("select_path: masked leaf is never drawn and factorization holds") {
  Fixture f(8, 2, 4, 5);
  const auto b = PolicyBundle::create(f.tree, f.config, 6);
  std::vector<Profile> profiles(8, Profile{3});
  profiles[3] = {1};  // lacks item 3
  const auto mask = apply_mask(f.tree, 3, profiles);
  Rng rng(4);
  const VectorXd q = VectorXd::LinSpaced(4, -1, 1);
  const VectorXd x = VectorXd::Constant(4, 0.2);
  bool drew_masked = false;
  for (int i = 0; i < 20000; ++i) {
    const auto s = select_path(f.tree, mask, b, q, x, rng);
    drew_masked = drew_masked || s.user == 3;
    if (i < 1000) {
      double sum = 0.0, prod = 1.0;
      for (const auto& st : s.steps) {
        sum += st.log_prob;
        const auto& m = b.node_policies[static_cast<std::size_t>(f.tree.internal_index(st.node))];
        prod *= masked_softmax(m.forward(selection_input(q, x)), st.eligible)[st.branch];
      }
      CHECK(s.log_prob == doctest::Approx(sum).epsilon(1e-12));
      CHECK(std::exp(s.log_prob) == doctest::Approx(prod).epsilon(1e-9));
      CHECK(path_log_prob(f.tree, b, q, x, s.steps) == doctest::Approx(s.log_prob).epsilon(1e-12));
    }
  }
  CHECK_FALSE(drew_masked);
}

TEST_CASE("returns follow the discount recursion") {
  Trajectory t;
  for (double r : {0.0, 0.2, 0.2, 0.2, 0.6, 0.6, 0.6}) {
    TrajectoryStep s;
    s.reward = r;
    t.steps.push_back(s);
  }
  compute_returns(t, 0.6);
  for (std::size_t i = 0; i + 1 < t.steps.size(); ++i) {
    CHECK(t.steps[i].ret == t.steps[i].reward + 0.6 * t.steps[i + 1].ret);
  }
  CHECK(t.steps.back().ret == 0.6);
}

TEST_CASE("policy gradient matches central differences") {
  // 8 leaves at depth 2, e = h = 4.
  Fixture f(8, 3, 4, 21);
  REQUIRE(f.tree.depth() == 2);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto b = PolicyBundle::create(f.tree, f.config, seed);
    Rng rng(seed * 31);
    auto traj = synthetic_trajectory(f.tree, TreeMask::all(f.tree), b, f.embeddings, 6, rng);
    traj.steps[0].path.clear();  // random seed action
    std::vector<double> adv;
    for (std::size_t t = 0; t < traj.steps.size(); ++t) adv.push_back(standard_normal(rng));
    CHECK(max_gradient_error(b, f.tree, traj, adv) <= 1e-4);
  }
}

TEST_CASE("reinforce_update") {
  Fixture f(8, 2, 4, 3);
  f.config.learning_rate = 1e-3;
  const auto start = PolicyBundle::create(f.tree, f.config, 8);
  Rng rng(12);
  auto traj = synthetic_trajectory(f.tree, TreeMask::all(f.tree), start, f.embeddings, 3, rng);
  const std::vector<Trajectory> batch{traj};

  auto objective_lp = [&](const PolicyBundle& b) {
    const std::vector<double> ones(traj.steps.size(), 1.0);
    return policy_objective(b, f.tree, traj, ones);
  };

  SUBCASE("returns equal to the baseline leave parameters unchanged") {
    auto b = start;
    auto t2 = traj;
    for (auto& s : t2.steps) s.ret = 0.25;
    LearnerState st;
    st.baseline = 0.25;
    reinforce_update(b, f.tree, std::vector<Trajectory>{t2}, st);
    std::vector<double> before, after;
    start.for_each_block([&](const double* d, Eigen::Index n) { before.insert(before.end(), d, d + n); });
    b.for_each_block([&](const double* d, Eigen::Index n) { after.insert(after.end(), d, d + n); });
    CHECK(before == after);
  }
  for (auto opt : {OptimizerKind::adam, OptimizerKind::sgd}) {
    CAPTURE(to_string(opt));
    SUBCASE("positive advantage raises log-probability") {
      auto b = start;
      b.config.optimizer = opt;
      auto t2 = traj;
      for (auto& s : t2.steps) s.ret = 1.0;
      LearnerState st;
      reinforce_update(b, f.tree, std::vector<Trajectory>{t2}, st);
      CHECK(objective_lp(b) > objective_lp(start));
      CHECK(st.baseline == doctest::Approx(0.1));
    }
    SUBCASE("negative advantage lowers log-probability") {
      auto b = start;
      b.config.optimizer = opt;
      auto t2 = traj;
      for (auto& s : t2.steps) s.ret = 0.0;
      LearnerState st;
      st.baseline = 0.5;
      reinforce_update(b, f.tree, std::vector<Trajectory>{t2}, st);
      CHECK(objective_lp(b) < objective_lp(start));
    }
  }
  SUBCASE("non-finite return is reported with its step") {
    auto b = start;
    auto t2 = traj;
    t2.steps[1].ret = std::nan("");
    LearnerState st;
    try {
      reinforce_update(b, f.tree, std::vector<Trajectory>{t2}, st);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("step 1") != std::string::npos);
    }
  }
}

TEST_CASE("policy checkpoint restores sampling exactly") {
  Fixture f(27, 3, 4, 3);
  auto b = PolicyBundle::create(f.tree, f.config, 8);
  LearnerState st;
  st.baseline = 0.125;
  Rng rng(99);
  rng.discard(17);
  const auto dir = std::filesystem::temp_directory_path() / "copyattack_policy_test";
  std::filesystem::create_directories(dir);
  save_policy(dir / "p.json", b, st, rng);

  PolicyBundle b2;
  LearnerState st2;
  Rng rng2;
  load_policy(dir / "p.json", b2, st2, rng2);
  CHECK(st2.baseline == 0.125);
  const auto mask = TreeMask::all(f.tree);
  const VectorXd q = VectorXd::Ones(4), x = VectorXd::Zero(4);
  for (int i = 0; i < 200; ++i) {
    const auto a = select_path(f.tree, mask, b, q, x, rng);
    const auto c = select_path(f.tree, mask, b2, q, x, rng2);
    CHECK(a.user == c.user);
    CHECK(a.log_prob == c.log_prob);
  }
  std::filesystem::remove_all(dir);
}
