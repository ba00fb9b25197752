#include <copyattack/mf.hpp>
#include <copyattack/random.hpp>

#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace copyattack;

namespace {

// Users 0..19 like items 0..9, users 20..39 like items 10..19.
std::vector<Interaction> two_blocks(double keep, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Interaction> xs;
  for (int u = 0; u < 40; ++u) {
    const int base = u < 20 ? 0 : 10;
    for (int i = base; i < base + 10; ++i) {
      if (uniform01(rng) < keep) xs.push_back({u, i});
    }
  }
  return xs;
}

}  // namespace

TEST_CASE("mf gradient matches central differences") {
  Rng rng(3);
  MatrixXd users = MatrixXd::NullaryExpr(4, 3, [&] { return standard_normal(rng); });
  MatrixXd items = MatrixXd::NullaryExpr(5, 3, [&] { return standard_normal(rng); });
  const std::vector<MfSample> samples{{0, 1, 1}, {0, 2, -1}, {1, 1, 1}, {3, 4, -1}, {2, 0, 1}, {3, 4, 1}};
  MatrixXd gu, gi;
  mf_gradient(users, items, samples, 0.05, gu, gi);
  const double h = 1e-6;
  double worst = 0;
  for (auto* m : {&users, &items}) {
    const MatrixXd& g = m == &users ? gu : gi;
    for (Eigen::Index r = 0; r < m->rows(); ++r) {
      for (Eigen::Index c = 0; c < m->cols(); ++c) {
        const double saved = (*m)(r, c);
        (*m)(r, c) = saved + h;
        const double up = mf_objective(users, items, samples, 0.05);
        (*m)(r, c) = saved - h;
        const double down = mf_objective(users, items, samples, 0.05);
        (*m)(r, c) = saved;
        worst = std::max(worst, copyattack::testing::gradient_error(g(r, c), (up - down) / (2 * h)));
      }
    }
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("pairwise AUC counts ties as one half") {
  const std::vector<double> pos{3, 1}, neg{1, 0};
  // (3>1) (3>0) (1=1 -> 0.5) (1>0)
  CHECK(pairwise_auc(pos, neg) == doctest::Approx(3.5 / 4).epsilon(1e-15));
}

TEST_CASE("train_mf separates planted blocks") {
  const auto all = two_blocks(0.8, 1);
  std::vector<Interaction> train, held;
  for (std::size_t i = 0; i < all.size(); ++i) (i % 5 == 0 ? held : train).push_back(all[i]);
  MfConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.epochs = 60;
  cfg.rng_seed = 2;
  std::vector<double> losses;
  const auto table = train_mf(train, cfg, &losses);
  CHECK(table.dim() == 8);
  CHECK(losses.size() == 60);
  CHECK(losses.back() < losses.front());
  CHECK(holdout_auc(table, held, train, 5, 7) > 0.8);
  CHECK(train_mf(train, cfg).user_vectors == table.user_vectors);
  CHECK_THROWS_AS(table.user(999), DataError);
}

TEST_CASE("train_mf rejects bad settings and reports divergence") {
  const auto xs = two_blocks(1.0, 1);
  MfConfig bad;
  bad.dim = 0;
  CHECK_THROWS_AS(train_mf(xs, bad), ConfigError);
  MfConfig wild;
  wild.learning_rate = 1e200;
  wild.init_stddev = 1e150;
  wild.l2 = 1.0;
  CHECK_THROWS_AS(train_mf(xs, wild), NumericError);
}

TEST_CASE("embedding file round trip is exact and detects damage") {
  MfConfig cfg;
  cfg.epochs = 3;
  const auto table = train_mf(two_blocks(0.7, 5), cfg);
  const auto dir = std::filesystem::temp_directory_path() / "copyattack_mf_test";
  std::filesystem::create_directories(dir);
  save_embeddings(table, dir / "e.txt");
  CHECK(load_embeddings(dir / "e.txt") == table);
  std::ifstream in(dir / "e.txt");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  in.close();
  const auto digit = text.find_first_of("123456789", text.find('\n') + 3);
  text[digit] = text[digit] == '9' ? '8' : '9';
  std::ofstream(dir / "bad.txt") << text;
  CHECK_THROWS_AS(load_embeddings(dir / "bad.txt"), IntegrityError);
  std::ofstream(dir / "short.txt") << "8 2 1\n0 1 2 3\n";
  CHECK_THROWS_AS(load_embeddings(dir / "short.txt"), IntegrityError);
  std::filesystem::remove_all(dir);
}
