#include <copyattack/synthetic.hpp>

#include <copyattack/random.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace copyattack {

void SyntheticConfig::validate() const {
  if (target_users < 1 || source_users < 1) throw ConfigError("synthetic: need users in both domains");
  if (overlap_items < 1 || target_only_items < 0 || source_only_items < 0) {
    throw ConfigError("synthetic: item counts must be non-negative with a non-empty overlap");
  }
  if (genres < 1 || favourite_genres < 1 || favourite_genres > genres ||
      source_favourite_genres < 1 || source_favourite_genres > genres) {
    throw ConfigError("synthetic: need 1 <= favourite_genres <= genres in both domains");
  }
  if (target_min_length < 1 || target_max_length < target_min_length || source_min_length < 1 ||
      source_max_length < source_min_length || session_min < 1 || session_max < session_min) {
    throw ConfigError("synthetic: length ranges must satisfy 1 <= min <= max");
  }
  auto unit = [](double x) { return x >= 0.0 && x <= 1.0; };
  if (!unit(favourite_affinity) || !unit(source_favourite_affinity) || !unit(popularity_correlation) || !unit(top_rating_share) ||
      !(zipf_exponent >= 0.0) || !(target_zipf_exponent >= 0.0) || !unit(cold_factor) ||
      cold_items < 0 || cold_items > overlap_items || source_eras < 1) {
    throw ConfigError("synthetic: probabilities must lie in [0, 1] and zipf_exponent >= 0");
  }
}

namespace {

std::string title(int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "title-%04d", k);
  return buf;
}

struct DomainSpec {
  std::vector<int> titles;  // global title numbers present in the domain
  int users = 0;
  int min_length = 0;
  int max_length = 0;
  int favourites = 0;
  double affinity = 0.0;
  std::string user_prefix;
  std::string item_prefix;
  int eras = 1;
};

// Popularity per title, Zipf over a rank order. The source order blends the target
// order with an independent one.
std::vector<double> zipf_weights(const std::vector<double>& rank_key, double exponent) {
  std::vector<int> order(rank_key.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rank_key[a] < rank_key[b]; });
  std::vector<double> w(rank_key.size());
  for (std::size_t r = 0; r < order.size(); ++r) {
    w[static_cast<std::size_t>(order[r])] = 1.0 / std::pow(static_cast<double>(r + 1), exponent);
  }
  return w;
}

void generate_domain(const SyntheticConfig& cfg, const DomainSpec& dom,
                     const std::vector<int>& genre_of, const std::vector<double>& popularity,
                     Rng& rng, std::vector<InteractionRecord>& log) {
  // Per-genre candidate lists with weights.
  std::vector<std::vector<int>> by_genre(static_cast<std::size_t>(cfg.genres));
  std::vector<std::vector<double>> weights(static_cast<std::size_t>(cfg.genres));
  for (int t : dom.titles) {
    const auto g = static_cast<std::size_t>(genre_of[static_cast<std::size_t>(t)]);
    by_genre[g].push_back(t);
    weights[g].push_back(popularity[static_cast<std::size_t>(t)]);
  }
  std::vector<double> totals;
  for (const auto& w : weights) totals.push_back(std::accumulate(w.begin(), w.end(), 0.0));

  std::uint64_t clock = 0;
  for (int u = 0; u < dom.users; ++u) {
    std::vector<int> genres;
    auto draw_favourites = [&] {
      genres.resize(static_cast<std::size_t>(cfg.genres));
      std::iota(genres.begin(), genres.end(), 0);
      shuffle(genres, rng);
      genres.resize(static_cast<std::size_t>(dom.favourites));
    };
    draw_favourites();
    int era = 0;

    const int length = dom.min_length +
                       static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(dom.max_length - dom.min_length + 1)));
    std::vector<char> taken(genre_of.size(), 0);
    std::vector<int> items;
    int stalls = 0;
    while (static_cast<int>(items.size()) < length && stalls < 50) {
      const int now = static_cast<int>(items.size()) * dom.eras / length;
      if (now != era) {
        era = now;
        draw_favourites();
      }
      int g = uniform01(rng) < dom.affinity
                  ? genres[uniform_index(rng, genres.size())]
                  : static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(cfg.genres)));
      const auto gi = static_cast<std::size_t>(g);
      if (by_genre[gi].empty()) {
        ++stalls;
        continue;
      }
      const int session = cfg.session_min +
                          static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(cfg.session_max - cfg.session_min + 1)));
      const std::size_t before = items.size();
      for (int s = 0; s < session && static_cast<int>(items.size()) < length; ++s) {
        for (int attempt = 0; attempt < 8; ++attempt) {
          const int t = by_genre[gi][sample_weighted(weights[gi], totals[gi], rng)];
          if (!taken[static_cast<std::size_t>(t)]) {
            taken[static_cast<std::size_t>(t)] = 1;
            items.push_back(t);
            break;
          }
        }
      }
      stalls = items.size() == before ? stalls + 1 : 0;
    }
    const std::string user = dom.user_prefix + std::to_string(u);
    for (int t : items) {
      InteractionRecord rec;
      rec.user = user;
      rec.item = dom.item_prefix + std::to_string(t);
      rec.rating = uniform01(rng) < cfg.top_rating_share ? 5 : 1 + static_cast<int>(uniform_index(rng, 4));
      rec.order_key = ++clock;
      log.push_back(std::move(rec));
    }
  }
}

}  // namespace

SyntheticBenchmark generate_synthetic(const SyntheticConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const int total = config.overlap_items + config.target_only_items + config.source_only_items;

  SyntheticBenchmark bench;
  bench.genre_of_title.resize(static_cast<std::size_t>(total));
  for (int t = 0; t < total; ++t) {
    bench.genre_of_title[static_cast<std::size_t>(t)] = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(config.genres)));
  }

  // Titles [0, overlap) are shared, then target-only, then source-only.
  DomainSpec target{{}, config.target_users, config.target_min_length, config.target_max_length,
                    config.favourite_genres, config.favourite_affinity, "tu", "ti", 1};
  DomainSpec source{{}, config.source_users, config.source_min_length, config.source_max_length,
                    config.source_favourite_genres, config.source_favourite_affinity, "su", "si",
                    config.source_eras};
  for (int t = 0; t < config.overlap_items + config.target_only_items; ++t) target.titles.push_back(t);
  for (int t = 0; t < config.overlap_items; ++t) source.titles.push_back(t);
  for (int t = config.overlap_items + config.target_only_items; t < total; ++t) source.titles.push_back(t);

  std::vector<double> target_key(static_cast<std::size_t>(total)), source_key(static_cast<std::size_t>(total));
  for (auto& k : target_key) k = uniform01(rng);
  const double rho = config.popularity_correlation;
  for (std::size_t t = 0; t < source_key.size(); ++t) source_key[t] = rho * target_key[t] + (1.0 - rho) * uniform01(rng);
  auto target_pop = zipf_weights(target_key, config.target_zipf_exponent);
  {
    std::vector<int> overlap(static_cast<std::size_t>(config.overlap_items));
    std::iota(overlap.begin(), overlap.end(), 0);
    shuffle(overlap, rng);
    for (int i = 0; i < config.cold_items; ++i) target_pop[static_cast<std::size_t>(overlap[static_cast<std::size_t>(i)])] *= config.cold_factor;
  }
  const auto source_pop = zipf_weights(source_key, config.zipf_exponent);

  Rng target_rng(derive_seed(config.seed, 1)), source_rng(derive_seed(config.seed, 2));
  generate_domain(config, target, bench.genre_of_title, target_pop, target_rng, bench.target_log);
  generate_domain(config, source, bench.genre_of_title, source_pop, source_rng, bench.source_log);

  for (int t : target.titles) bench.target_catalog.push_back({"ti" + std::to_string(t), title(t), 2000 + t % 20});
  for (int t : source.titles) bench.source_catalog.push_back({"si" + std::to_string(t), title(t), 2000 + t % 20});
  return bench;
}

void save_interactions(std::span<const InteractionRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write interaction file: " + path.string());
  for (const auto& r : records) out << r.user << '\t' << r.item << '\t' << r.rating << '\t' << r.order_key << '\n';
}

void save_catalog(std::span<const CatalogEntry> catalog, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write catalog file: " + path.string());
  for (const auto& e : catalog) out << e.item_id << '\t' << e.name << '\t' << e.year << '\n';
}

std::vector<CatalogEntry> load_catalog(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open catalog file: " + path.string());
  std::vector<CatalogEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream fields(line);
    CatalogEntry e;
    std::string year;
    if (!std::getline(fields, e.item_id, '\t') || !std::getline(fields, e.name, '\t') ||
        !std::getline(fields, year, '\t') || e.item_id.empty()) {
      throw ParseError("catalog rows need item_id, name and year", line_no);
    }
    try {
      e.year = std::stoi(year);
    } catch (const std::exception&) {
      throw ParseError("malformed catalog year '" + year + "'", line_no);
    }
    out.push_back(std::move(e));
  }
  return out;
}

void write_synthetic(const SyntheticBenchmark& bench, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_interactions(bench.target_log, dir / "target.tsv");
  save_interactions(bench.source_log, dir / "source.tsv");
  save_catalog(bench.target_catalog, dir / "target_catalog.tsv");
  save_catalog(bench.source_catalog, dir / "source_catalog.tsv");
  save_alignment(align_items(bench.target_catalog, bench.source_catalog, AlignKey::name), dir / "alignment.tsv");
}

}  // namespace copyattack
