#pragma once

#include <copyattack/dataset.hpp>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace copyattack {

/// Generator for a two-domain benchmark with planted genre structure.
///
/// Items belong to genres. Every user prefers a few genres and their profile is a
/// time-ordered run of sessions, each drawing several items of one genre by that
/// domain's popularity. The two domains rank item popularity differently (the shift
/// is controlled by `popularity_correlation`), and the source domain has longer
/// profiles.
struct SyntheticConfig {
  int target_users = 1000;
  int source_users = 2000;
  int overlap_items = 500;
  int target_only_items = 100;
  int source_only_items = 100;
  int genres = 20;
  int favourite_genres = 2;
  /// Probability that a session uses one of the user's favourite genres.
  double favourite_affinity = 0.85;
  /// Source-domain counterparts; source users are typically broader.
  int source_favourite_genres = 1;
  double source_favourite_affinity = 0.95;
  /// Taste drift: a source profile is split into this many consecutive eras, each with
  /// freshly drawn favourite genres.
  int source_eras = 3;
  int target_min_length = 20;
  int target_max_length = 60;
  int source_min_length = 30;
  int source_max_length = 90;
  int session_min = 3;
  int session_max = 6;
  double zipf_exponent = 1.0;
  /// Target-domain exponent; the source uses zipf_exponent.
  double target_zipf_exponent = 0.5;
  /// Overlap items that are new on the target platform: their target popularity is
  /// scaled by cold_factor.
  int cold_items = 60;
  double cold_factor = 0.02;
  /// 1 keeps the target popularity order in the source, 0 draws it independently.
  double popularity_correlation = 0.0;
  /// Share of generated interactions that get the top rating; the rest are 1..4.
  double top_rating_share = 0.85;
  std::uint64_t seed = 7;

  void validate() const;
};

struct SyntheticBenchmark {
  std::vector<InteractionRecord> target_log;
  std::vector<InteractionRecord> source_log;
  std::vector<CatalogEntry> target_catalog;
  std::vector<CatalogEntry> source_catalog;
  /// Genre of every generated item, keyed by catalog name order (item k is "title-k").
  std::vector<int> genre_of_title;
};

SyntheticBenchmark generate_synthetic(const SyntheticConfig& config);

/// `user<TAB>item<TAB>rating<TAB>timestamp` rows, readable by load_interactions.
void save_interactions(std::span<const InteractionRecord> records,
                       const std::filesystem::path& path);

/// `item_id<TAB>name<TAB>year` rows.
void save_catalog(std::span<const CatalogEntry> catalog, const std::filesystem::path& path);
std::vector<CatalogEntry> load_catalog(const std::filesystem::path& path);

/// Writes target.tsv, source.tsv, the two catalogs and alignment.tsv into `dir`.
void write_synthetic(const SyntheticBenchmark& bench, const std::filesystem::path& dir);

}  // namespace copyattack
