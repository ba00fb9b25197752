#pragma once

#include <copyattack/common.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace copyattack {

struct InteractionRecord {
  std::string user;
  std::string item;
  int rating = 0;
  std::uint64_t order_key = 0;
};

struct RatingScale {
  int min = 1;
  int max = 5;
};

enum class TextFormat { tsv, csv };

struct LoadOptions {
  TextFormat format = TextFormat::tsv;
  bool has_header = false;
  RatingScale scale{};
};

/// Reads `user, item, rating[, timestamp]` rows. Rows without a timestamp use their
/// 0-based data-row index as order key.
std::vector<InteractionRecord> load_interactions(const std::filesystem::path& path,
                                                 const LoadOptions& options = {});

std::vector<InteractionRecord> filter_by_rating(std::span<const InteractionRecord> records,
                                                int min_rating);

/// Bidirectional string <-> dense index map.
class IdIndex {
 public:
  int intern(const std::string& name);
  std::optional<int> find(const std::string& name) const;
  const std::string& name(int id) const { return names_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(names_.size()); }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> lookup_;
};

struct ProfileSet {
  IdIndex users;
  IdIndex items;
  /// Per user: items ordered by ascending order key, first occurrence only.
  std::vector<Profile> user_profiles;
  /// Per item: users in order of their (deduplicated) interaction.
  std::vector<std::vector<UserId>> item_profiles;
};

ProfileSet build_profiles(std::span<const InteractionRecord> records);

// ---------------------------------------------------------------------------
// Item alignment between domains.

struct CatalogEntry {
  std::string item_id;
  std::string name;
  int year = 0;
};

enum class AlignKey { name, name_year };

struct OverlapMapping {
  /// (source item id, target item id), sorted by target id.
  std::vector<std::pair<std::string, std::string>> pairs;
  /// Keys dropped because they occur more than once within one catalog.
  std::vector<std::string> duplicate_keys;
};

OverlapMapping align_items(std::span<const CatalogEntry> target_catalog,
                           std::span<const CatalogEntry> source_catalog, AlignKey key);

/// Two-column text file `source_item_key<sep>target_item_key`; tab or comma separated.
OverlapMapping load_alignment(const std::filesystem::path& path);
void save_alignment(const OverlapMapping& mapping, const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct Interaction {
  UserId user = 0;
  ItemId item = 0;
  friend bool operator==(const Interaction&, const Interaction&) = default;
};

struct Domain {
  IdIndex users;
  std::vector<Profile> profiles;

  int user_count() const { return users.size(); }
};

/// Target and source domain over one shared item index (the target catalog). Source
/// profiles only contain overlap items.
struct CrossDomainDataset {
  IdIndex items;
  Domain target;
  Domain source;
  /// Sorted target ids of V = V^A ∩ V^B.
  std::vector<ItemId> overlap;
  /// Source-domain key of each overlap item, parallel to `overlap`.
  std::vector<std::string> overlap_source_keys;

  int item_count() const { return items.size(); }
  bool in_overlap(ItemId item) const;
};

/// Joins two profile sets through the mapping. Source users left with no overlap
/// item are dropped. Throws ConfigError when the overlap is empty.
CrossDomainDataset make_cross_domain(const ProfileSet& target, const ProfileSet& source,
                                     const OverlapMapping& mapping);

std::vector<Interaction> flatten(std::span<const Profile> profiles);

struct SplitSpec {
  double train_fraction = 0.8;
  double validation_fraction = 0.1;
  double test_fraction = 0.1;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct DatasetSplit {
  std::vector<Interaction> train;
  std::vector<Interaction> validation;
  std::vector<Interaction> test;
  /// Users with test interactions but nothing in train.
  std::vector<UserId> cold_users;
};

/// Per-interaction random partition of the target domain.
DatasetSplit split_dataset(const CrossDomainDataset& dataset, const SplitSpec& spec);

nlohmann::json split_report(const CrossDomainDataset& dataset, const DatasetSplit& split);

/// Regroups interactions into per-user profiles (preserving input order).
std::vector<Profile> group_by_user(std::span<const Interaction> interactions, int user_count);

std::vector<int> item_degrees(std::span<const Interaction> interactions, int item_count);

/// Samples `count` distinct overlap items whose degree in `train` is below
/// `max_interactions`. Throws DataError when fewer are eligible.
std::vector<ItemId> select_target_items(const CrossDomainDataset& dataset,
                                        std::span<const Interaction> train, int count,
                                        int max_interactions, std::uint64_t rng_seed);

}  // namespace copyattack
