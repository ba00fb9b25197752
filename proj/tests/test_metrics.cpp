#include <copyattack/metrics.hpp>

#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace copyattack;

TEST_CASE("hit ratio and NDCG spot values") {
  const std::vector<ItemId> ranked{7, 3, 9, 1};
  CHECK(hit_ratio(ranked, 9, 3) == 1);
  CHECK(hit_ratio(ranked, 9, 2) == 0);
  CHECK(hit_ratio(ranked, 42, 4) == 0);
  CHECK(ndcg_single(ranked, 7, 4) == 1.0);
  CHECK(ndcg_single(ranked, 9, 3) == 0.5);
  CHECK(ndcg_single(ranked, 9, 2) == 0.0);
  CHECK(ndcg_at(3, 20) == 0.5);
  CHECK(ndcg_at(2, 20) == doctest::Approx(1.0 / std::log2(3.0)).epsilon(1e-15));
  CHECK(rank_position(ranked, 1) == 4u);
  CHECK_FALSE(rank_position(ranked, 2).has_value());
}

TEST_CASE("metrics agree with the brute-force evaluator on every list up to length 8") {
  const auto r = copyattack::testing::exhaustive_metric_check(8);
  CHECK(r.cases > 3'000'000);
  CHECK(r.mismatches == 0);
}

TEST_CASE("popularity deciles") {
  SUBCASE("partition is disjoint, exhaustive and balanced") {
    for (int n : {10, 11, 19, 37, 100, 203}) {
      std::vector<ItemId> items;
      std::vector<int> degree(static_cast<std::size_t>(n) * 2, 0);
      for (int i = 0; i < n; ++i) {
        items.push_back(2 * i);
        degree[static_cast<std::size_t>(2 * i)] = (i * 7919) % 13;
      }
      const auto groups = popularity_deciles(items, degree);
      REQUIRE(groups.size() == 10);
      std::set<ItemId> seen;
      std::size_t lo = SIZE_MAX, hi = 0;
      for (const auto& g : groups) {
        lo = std::min(lo, g.size());
        hi = std::max(hi, g.size());
        for (ItemId i : g) CHECK(seen.insert(i).second);
      }
      CHECK(seen.size() == items.size());
      CHECK(hi - lo <= 1);
      // Descending popularity across groups.
      for (std::size_t g = 0; g + 1 < groups.size(); ++g) {
        int min_here = INT32_MAX, max_next = 0;
        for (ItemId i : groups[g]) min_here = std::min(min_here, degree[static_cast<std::size_t>(i)]);
        for (ItemId i : groups[g + 1]) max_next = std::max(max_next, degree[static_cast<std::size_t>(i)]);
        CHECK(min_here >= max_next);
      }
    }
  }
  SUBCASE("ties broken by ascending id") {
    std::vector<ItemId> items(20);
    std::iota(items.begin(), items.end(), 0);
    const std::vector<int> degree(20, 1);
    const auto groups = popularity_deciles(items, degree);
    CHECK(groups[0] == std::vector<ItemId>{0, 1});
    CHECK(groups[9] == std::vector<ItemId>{18, 19});
  }
  SUBCASE("fewer than ten items") {
    const std::vector<ItemId> items{0, 1, 2};
    const std::vector<int> degree{1, 2, 3};
    CHECK_THROWS_AS(popularity_deciles(items, degree), DataError);
  }
}
