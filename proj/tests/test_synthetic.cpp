#include <copyattack/dataset.hpp>
#include <copyattack/synthetic.hpp>

#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

using namespace copyattack;

namespace {

SyntheticConfig small() {
  SyntheticConfig c;
  c.target_users = 60;
  c.source_users = 80;
  c.overlap_items = 40;
  c.target_only_items = 10;
  c.source_only_items = 10;
  c.genres = 4;
  c.target_min_length = 5;
  c.target_max_length = 10;
  c.source_min_length = 8;
  c.source_max_length = 16;
  c.cold_items = 5;
  return c;
}

}  // namespace

TEST_CASE("synthetic benchmark shape") {
  const auto c = small();
  const auto b = generate_synthetic(c);
  CHECK(b.target_catalog.size() == 50);
  CHECK(b.source_catalog.size() == 50);
  CHECK(b.genre_of_title.size() == 60);

  std::map<std::string, std::set<std::string>> per_user;
  for (const auto& r : b.target_log) {
    CHECK(per_user[r.user].insert(r.item).second);  // no repeats
    CHECK(r.rating >= 1);
    CHECK(r.rating <= 5);
  }
  CHECK(per_user.size() == 60);
  for (const auto& [u, items] : per_user) {
    CHECK(items.size() >= 5);
    CHECK(items.size() <= 10);
  }
  std::uint64_t last = 0;
  for (const auto& r : b.source_log) {
    CHECK(r.order_key > last);
    last = r.order_key;
  }
  const auto m = align_items(b.target_catalog, b.source_catalog, AlignKey::name);
  CHECK(m.pairs.size() == 40);
}

TEST_CASE("synthetic benchmark is deterministic per seed") {
  auto c = small();
  const auto a = generate_synthetic(c);
  const auto b = generate_synthetic(c);
  REQUIRE(a.target_log.size() == b.target_log.size());
  for (std::size_t i = 0; i < a.target_log.size(); ++i) {
    CHECK(a.target_log[i].user == b.target_log[i].user);
    CHECK(a.target_log[i].item == b.target_log[i].item);
  }
  c.seed = 8;
  const auto d = generate_synthetic(c);
  bool differs = d.source_log.size() != a.source_log.size();
  for (std::size_t i = 0; !differs && i < a.source_log.size(); ++i) differs = a.source_log[i].item != d.source_log[i].item;
  CHECK(differs);
}

TEST_CASE("planted genres dominate single-era profiles") {
  auto c = small();
  c.source_eras = 1;
  c.source_favourite_genres = 1;
  c.source_favourite_affinity = 1.0;
  const auto b = generate_synthetic(c);
  std::map<std::string, int> name_genre;
  for (std::size_t k = 0; k < b.source_catalog.size(); ++k) {
    const auto& e = b.source_catalog[k];
    name_genre[e.item_id] = b.genre_of_title[static_cast<std::size_t>(std::stoi(e.name.substr(6)))];
  }
  std::map<std::string, std::set<int>> genres;
  for (const auto& r : b.source_log) genres[r.user].insert(name_genre.at(r.item));
  for (const auto& [u, g] : genres) CHECK(g.size() == 1);
}

TEST_CASE("synthetic files load back through the dataset readers") {
  const auto dir = std::filesystem::temp_directory_path() / "copyattack_synth_test";
  std::filesystem::remove_all(dir);
  const auto b = generate_synthetic(small());
  write_synthetic(b, dir);
  CHECK(load_interactions(dir / "target.tsv").size() == b.target_log.size());
  CHECK(load_interactions(dir / "source.tsv").size() == b.source_log.size());
  const auto cat = load_catalog(dir / "target_catalog.tsv");
  REQUIRE(cat.size() == b.target_catalog.size());
  CHECK(cat[3].name == b.target_catalog[3].name);
  CHECK(cat[3].year == b.target_catalog[3].year);
  CHECK(load_alignment(dir / "alignment.tsv").pairs.size() == 40);
  std::filesystem::remove_all(dir);
}

TEST_CASE("synthetic config validation") {
  auto c = small();
  c.favourite_genres = 9;
  CHECK_THROWS_AS(generate_synthetic(c), ConfigError);
  c = small();
  c.cold_items = 41;
  CHECK_THROWS_AS(generate_synthetic(c), ConfigError);
  c = small();
  c.target_max_length = 2;
  CHECK_THROWS_AS(generate_synthetic(c), ConfigError);
}
