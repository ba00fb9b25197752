#include <copyattack/recommender.hpp>
#include <copyattack/random.hpp>

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

using namespace copyattack;

namespace {

std::vector<Profile> random_profiles(int users, int items, int min_len, int max_len, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Profile> out;
  for (int u = 0; u < users; ++u) {
    const int len = min_len + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(max_len - min_len + 1)));
    std::set<ItemId> seen;
    Profile p;
    while (static_cast<int>(p.size()) < len) {
      const ItemId i = static_cast<ItemId>(uniform_index(rng, static_cast<std::size_t>(items)));
      if (seen.insert(i).second) p.push_back(i);
    }
    out.push_back(p);
  }
  return out;
}

/// Straight-from-the-definition item-knn ranking of every non-interacted item.
std::vector<ItemId> knn_oracle(const std::vector<Profile>& profiles, int items, const Profile& user,
                               const TargetConfig& cfg) {
  std::vector<std::vector<double>> w(static_cast<std::size_t>(items), std::vector<double>(static_cast<std::size_t>(items), 0.0));
  for (const auto& p : profiles) {
    const double add = cfg.knn_length_weighting ? 1.0 / static_cast<double>(p.size()) : 1.0;
    for (ItemId a : p) {
      for (ItemId b : p) w[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] += add;
    }
  }
  auto sim = [&](ItemId a, ItemId b) {
    const double d = w[static_cast<std::size_t>(a)][static_cast<std::size_t>(a)] * w[static_cast<std::size_t>(b)][static_cast<std::size_t>(b)];
    return d > 0 ? w[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] / std::sqrt(d) : 0.0;
  };
  auto neighbour = [&](ItemId i, ItemId j) {
    if (i == j || sim(i, j) <= 0) return false;
    if (cfg.knn_neighbors == 0) return true;
    int better = 0;
    for (ItemId o = 0; o < items; ++o) {
      if (o != j && sim(o, j) > sim(i, j)) ++better;
    }
    return better < cfg.knn_neighbors;
  };
  std::vector<std::pair<double, ItemId>> scored;
  const std::set<ItemId> have(user.begin(), user.end());
  for (ItemId i = 0; i < items; ++i) {
    if (have.count(i)) continue;
    double s = 0;
    for (ItemId j : user) {
      if (neighbour(i, j)) s += sim(i, j);
    }
    scored.emplace_back(s, i);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (std::abs(a.first - b.first) > 1e-12) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<ItemId> out;
  for (const auto& [s, i] : scored) out.push_back(i);
  return out;
}

}  // namespace

TEST_CASE("item-knn similarity and ranking match the definition") {
  const int items = 12;
  const auto profiles = random_profiles(30, items, 2, 6, 11);
  for (bool lw : {false, true}) {
    for (int nb : {0, 2, 5}) {
      CAPTURE(lw);
      CAPTURE(nb);
      TargetConfig cfg;
      cfg.knn_length_weighting = lw;
      cfg.knn_neighbors = nb;
      const auto model = fit_target(profiles, items, cfg);
      const auto& knn = dynamic_cast<const ItemKnnModel&>(*model);
      CHECK(knn.cooccurrence(profiles[0][0], profiles[0][0]) >= 1);
      for (UserId u = 0; u < 30; u += 7) {
        const auto top = model->query_topk(u, items);
        const auto expect = knn_oracle(profiles, items, profiles[static_cast<std::size_t>(u)], cfg);
        CHECK(top.items == expect);
        CHECK(top.truncated == (static_cast<int>(expect.size()) < items));
      }
    }
  }
}

TEST_CASE("item-knn hand example") {
  // Items 0,1 always together; item 2 with 0 once.
  const std::vector<Profile> profiles{{0, 1}, {0, 1}, {0, 2}, {3}};
  TargetConfig cfg;
  cfg.knn_length_weighting = false;
  cfg.knn_neighbors = 0;
  const auto model = fit_target(profiles, 4, cfg);
  const auto& knn = dynamic_cast<const ItemKnnModel&>(*model);
  CHECK(knn.cooccurrence(0, 1) == 2);
  CHECK(knn.similarity(0, 1) == doctest::Approx(2.0 / std::sqrt(3.0 * 2.0)).epsilon(1e-15));
  CHECK(knn.similarity(0, 3) == 0.0);
  // User 3 ({3}) has no co-occurring neighbours: all zero scores, ids ascending.
  CHECK(model->query_topk(3, 3).items == std::vector<ItemId>{0, 1, 2});
  // User 2 ({0,2}) gets item 1 first.
  CHECK(model->query_topk(2, 1).items == std::vector<ItemId>{1});
}

TEST_CASE("injection updates co-occurrence and clones stay independent") {
  const std::vector<Profile> profiles{{0, 1}, {2, 3}, {0, 3}};
  TargetConfig cfg;
  cfg.knn_neighbors = 0;
  const auto model = fit_target(profiles, 5, cfg);
  auto copy = model->clone();
  const auto ids = copy->inject_profiles(std::vector<Profile>{{1, 4}, {1, 4}});
  CHECK(ids == std::vector<UserId>{3, 4});
  CHECK(copy->user_count() == 5);
  CHECK(dynamic_cast<const ItemKnnModel&>(*copy).cooccurrence(1, 4) == 2);
  CHECK(dynamic_cast<const ItemKnnModel&>(*model).cooccurrence(1, 4) == 0);
  CHECK(copy->item_degree(4) == 2);
  // User 0 ({0,1}) now sees 4 as its best candidate.
  CHECK(copy->query_topk(0, 1).items == std::vector<ItemId>{4});
  CHECK_THROWS_AS(copy->inject_profiles(std::vector<Profile>{{9}}), DataError);
}

TEST_CASE("implicit-mf target folds injected users in") {
  const auto profiles = random_profiles(40, 15, 3, 6, 2);
  TargetConfig cfg;
  cfg.kind = TargetKind::implicit_mf;
  cfg.mf.epochs = 20;
  cfg.mf.learning_rate = 0.05;
  const auto model = fit_target(profiles, 15, cfg);
  auto copy = model->clone();
  const auto id = copy->inject_profiles(std::vector<Profile>{{1, 2, 3}}).front();
  copy->synchronize();
  const auto top = copy->query_topk(id, 5);
  CHECK(top.items.size() == 5);
  for (ItemId i : top.items) CHECK((i != 1 && i != 2 && i != 3));
  const auto& mf = dynamic_cast<const ImplicitMfModel&>(*copy);
  CHECK(mf.user_factors().row(id).norm() > 0);
}

TEST_CASE("target checkpoints round trip and detect corruption") {
  const auto profiles = random_profiles(20, 10, 2, 5, 4);
  const auto dir = std::filesystem::temp_directory_path() / "copyattack_target_test";
  std::filesystem::create_directories(dir);
  for (auto kind : {TargetKind::item_knn, TargetKind::implicit_mf}) {
    TargetConfig cfg;
    cfg.kind = kind;
    cfg.mf.epochs = 5;
    const auto model = fit_target(profiles, 10, cfg);
    save_target(*model, dir / "t.json");
    const auto back = load_target(dir / "t.json");
    CHECK(back->kind() == kind);
    for (UserId u = 0; u < 20; ++u) CHECK(back->query_topk(u, 10).items == model->query_topk(u, 10).items);
    std::ifstream in(dir / "t.json");
    std::string text((std::istreambuf_iterator<char>(in)), {});
    in.close();
    const auto pos = text.find("\"profiles\"");
    REQUIRE(pos != std::string::npos);
    const auto digit = text.find_first_of("0123456789", pos);
    text[digit] = text[digit] == '1' ? '2' : '1';
    std::ofstream(dir / "t.json") << text;
    CHECK_THROWS_AS(load_target(dir / "t.json"), IntegrityError);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("knn option names") {
  CHECK(parse_knn_scoring("vote") == KnnScoring::vote);
  CHECK(parse_knn_scoring("weighted-average") == KnnScoring::weighted_average);
  CHECK_THROWS_AS(parse_knn_scoring("mean"), ConfigError);
  CHECK(parse_target_kind(to_string(TargetKind::implicit_mf)) == TargetKind::implicit_mf);
  CHECK_THROWS_AS(parse_target_kind("pinsage"), ConfigError);
}

TEST_CASE("pretend users and the black-box environment") {
  const auto profiles = random_profiles(50, 20, 3, 8, 9);
  auto model = fit_target(profiles, 20, TargetConfig{});
  const std::vector<ItemId> excluded{0, 1, 2};
  const auto pretend = create_pretend_users(*model, 10, 4, excluded, 3);
  CHECK(pretend.user_ids.size() == 10);
  for (const auto& p : pretend.profiles) {
    CHECK(p.size() == 4);
    CHECK(std::set<ItemId>(p.begin(), p.end()).size() == 4);
    for (ItemId i : p) CHECK(i > 2);
  }
  RecommenderEnvironment env(std::shared_ptr<const TargetModel>(std::move(model)), pretend);
  const auto before = env.query_pretend_users(5);
  CHECK(before.size() == 10);
  env.inject(std::vector<Profile>(20, Profile{0, 5, 6}));
  CHECK(env.model().user_count() == 80);
  env.reset();
  CHECK(env.model().user_count() == 60);
  CHECK(env.query_pretend_users(5) == before);
}

TEST_CASE("negative sampling and offline evaluation") {
  const auto profiles = random_profiles(30, 40, 3, 6, 5);
  const auto model = fit_target(profiles, 40, TargetConfig{});
  const std::vector<ItemId> exclude{7};
  const auto negs = sample_negatives(*model, 0, 20, exclude, 1);
  CHECK(negs.size() == 20);
  CHECK(negs == sample_negatives(*model, 0, 20, exclude, 1));
  const std::set<ItemId> own(profiles[0].begin(), profiles[0].end());
  for (ItemId i : negs) {
    CHECK(own.count(i) == 0);
    CHECK(i != 7);
  }
  auto unseen = [&](UserId u) {
    ItemId i = 39;
    while (std::find(profiles[static_cast<std::size_t>(u)].begin(), profiles[static_cast<std::size_t>(u)].end(), i) !=
           profiles[static_cast<std::size_t>(u)].end()) {
      --i;
    }
    return i;
  };
  // Unknown users and already-seen items are skipped.
  std::vector<Interaction> test{{0, unseen(0)}, {1, unseen(1)}, {99, 1}, {2, profiles[2][0]}};
  const std::vector<int> ks{1, 10, 40};
  const auto table = evaluate_offline(*model, test, ks, 39, 2);
  CHECK(table.n_pairs == 2);
  CHECK(table.n_skipped == 2);
  REQUIRE(table.rows.size() == 3);
  CHECK(table.rows[2].hr == 1.0);
  CHECK(table.rows[0].hr <= table.rows[1].hr);
}
