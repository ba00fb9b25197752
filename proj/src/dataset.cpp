#include <copyattack/dataset.hpp>
#include <copyattack/random.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string_view>

namespace copyattack {

namespace {

std::vector<std::string_view> split_fields(std::string_view line, char delimiter) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t end = line.find(delimiter, start);
    std::string_view field = line.substr(start, end == std::string_view::npos ? end : end - start);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t' ||
                              field.front() == '"')) {
      field.remove_prefix(1);
    }
    while (!field.empty() &&
           (field.back() == ' ' || field.back() == '\t' || field.back() == '"')) {
      field.remove_suffix(1);
    }
    fields.push_back(field);
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return fields;
}

template <typename T>
bool parse_number(std::string_view text, T& out) {
  if (text.empty()) return false;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc{} && ptr == text.data() + text.size();
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

std::vector<InteractionRecord> load_interactions(const std::filesystem::path& path,
                                                 const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open interaction file: " + path.string());

  const char delimiter = options.format == TextFormat::csv ? ',' : '\t';
  std::vector<InteractionRecord> records;
  std::string line;
  std::size_t line_no = 0;
  bool header_pending = options.has_header;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    if (header_pending) {
      header_pending = false;
      continue;
    }
    const auto fields = split_fields(line, delimiter);
    if (fields.size() < 3 || fields.size() > 4) {
      throw ParseError("expected 3 or 4 columns, found " + std::to_string(fields.size()),
                       line_no);
    }
    if (fields[0].empty() || fields[1].empty()) {
      throw ParseError("empty user or item identifier", line_no);
    }
    InteractionRecord rec;
    rec.user = std::string(fields[0]);
    rec.item = std::string(fields[1]);
    if (!parse_number(fields[2], rec.rating)) {
      throw ParseError("non-numeric rating '" + std::string(fields[2]) + "'", line_no);
    }
    if (rec.rating < options.scale.min || rec.rating > options.scale.max) {
      throw ParseError("rating " + std::to_string(rec.rating) + " outside scale", line_no);
    }
    if (fields.size() == 4 && !fields[3].empty()) {
      if (!parse_number(fields[3], rec.order_key)) {
        throw ParseError("malformed timestamp '" + std::string(fields[3]) + "'", line_no);
      }
    } else {
      rec.order_key = records.size();
    }
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw DataError("empty dataset: " + path.string());
  return records;
}

std::vector<InteractionRecord> filter_by_rating(std::span<const InteractionRecord> records,
                                                int min_rating) {
  std::vector<InteractionRecord> kept;
  std::copy_if(records.begin(), records.end(), std::back_inserter(kept),
               [min_rating](const InteractionRecord& r) { return r.rating >= min_rating; });
  return kept;
}

int IdIndex::intern(const std::string& name) {
  const auto [it, inserted] = lookup_.try_emplace(name, static_cast<int>(names_.size()));
  if (inserted) names_.push_back(name);
  return it->second;
}

std::optional<int> IdIndex::find(const std::string& name) const {
  const auto it = lookup_.find(name);
  if (it == lookup_.end()) return std::nullopt;
  return it->second;
}

ProfileSet build_profiles(std::span<const InteractionRecord> records) {
  ProfileSet out;
  struct Event {
    std::uint64_t order_key;
    std::size_t row;
    UserId user;
    ItemId item;
  };
  std::vector<Event> events;
  events.reserve(records.size());
  for (std::size_t row = 0; row < records.size(); ++row) {
    const auto& r = records[row];
    events.push_back({r.order_key, row, out.users.intern(r.user), out.items.intern(r.item)});
  }
  std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
    return a.order_key < b.order_key;
  });

  out.user_profiles.resize(static_cast<std::size_t>(out.users.size()));
  out.item_profiles.resize(static_cast<std::size_t>(out.items.size()));
  std::set<std::pair<UserId, ItemId>> seen;
  for (const auto& e : events) {
    if (!seen.emplace(e.user, e.item).second) continue;
    out.user_profiles[static_cast<std::size_t>(e.user)].push_back(e.item);
    out.item_profiles[static_cast<std::size_t>(e.item)].push_back(e.user);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string catalog_key(const CatalogEntry& entry, AlignKey key) {
  if (key == AlignKey::name) return entry.name;
  return entry.name + '\x1f' + std::to_string(entry.year);
}

std::map<std::string, std::vector<const CatalogEntry*>> index_catalog(
    std::span<const CatalogEntry> catalog, AlignKey key) {
  std::map<std::string, std::vector<const CatalogEntry*>> by_key;
  for (const auto& e : catalog) by_key[catalog_key(e, key)].push_back(&e);
  return by_key;
}

}  // namespace

OverlapMapping align_items(std::span<const CatalogEntry> target_catalog,
                           std::span<const CatalogEntry> source_catalog, AlignKey key) {
  const auto target = index_catalog(target_catalog, key);
  const auto source = index_catalog(source_catalog, key);

  OverlapMapping mapping;
  std::set<std::string> duplicates;
  for (const auto* side : {&target, &source}) {
    for (const auto& [k, entries] : *side) {
      if (entries.size() > 1) duplicates.insert(k);
    }
  }
  for (const auto& [k, entries] : target) {
    if (duplicates.contains(k)) continue;
    const auto it = source.find(k);
    if (it == source.end()) continue;
    mapping.pairs.emplace_back(it->second.front()->item_id, entries.front()->item_id);
  }
  for (auto k : duplicates) {
    std::replace(k.begin(), k.end(), '\x1f', ' ');
    mapping.duplicate_keys.push_back(std::move(k));
  }
  std::sort(mapping.pairs.begin(), mapping.pairs.end(),
            [](const auto& a, const auto& b) { return a.second < b.second; });
  if (mapping.pairs.empty()) {
    throw ConfigError("item alignment produced an empty overlap set");
  }
  return mapping;
}

OverlapMapping load_alignment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open alignment file: " + path.string());
  OverlapMapping mapping;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty() || line.front() == '#') continue;
    const char delimiter = line.find('\t') != std::string::npos ? '\t' : ',';
    const auto fields = split_fields(line, delimiter);
    if (fields.size() != 2 || fields[0].empty() || fields[1].empty()) {
      throw ParseError("alignment rows need exactly two keys", line_no);
    }
    mapping.pairs.emplace_back(std::string(fields[0]), std::string(fields[1]));
  }
  if (mapping.pairs.empty()) throw DataError("empty alignment file: " + path.string());
  return mapping;
}

void save_alignment(const OverlapMapping& mapping, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write alignment file: " + path.string());
  for (const auto& [src, tgt] : mapping.pairs) out << src << '\t' << tgt << '\n';
}

// ---------------------------------------------------------------------------

bool CrossDomainDataset::in_overlap(ItemId item) const {
  return std::binary_search(overlap.begin(), overlap.end(), item);
}

CrossDomainDataset make_cross_domain(const ProfileSet& target, const ProfileSet& source,
                                     const OverlapMapping& mapping) {
  // Keys mentioned twice on either side would make the mapping many-to-one.
  std::map<std::string, int> source_uses, target_uses;
  for (const auto& [s, t] : mapping.pairs) {
    ++source_uses[s];
    ++target_uses[t];
  }

  std::vector<ItemId> source_to_target(static_cast<std::size_t>(source.items.size()), -1);
  std::vector<std::pair<ItemId, std::string>> overlap;
  for (const auto& [s, t] : mapping.pairs) {
    if (source_uses[s] != 1 || target_uses[t] != 1) continue;
    const auto src = source.items.find(s);
    const auto tgt = target.items.find(t);
    if (!src || !tgt) continue;
    source_to_target[static_cast<std::size_t>(*src)] = *tgt;
    overlap.emplace_back(*tgt, s);
  }
  if (overlap.empty()) {
    throw ConfigError("no aligned item occurs in both interaction logs (empty overlap)");
  }
  std::sort(overlap.begin(), overlap.end());

  CrossDomainDataset ds;
  ds.items = target.items;
  ds.target.users = target.users;
  ds.target.profiles = target.user_profiles;
  for (const auto& [item, key] : overlap) {
    ds.overlap.push_back(item);
    ds.overlap_source_keys.push_back(key);
  }
  for (UserId u = 0; u < source.users.size(); ++u) {
    Profile restricted;
    for (ItemId item : source.user_profiles[static_cast<std::size_t>(u)]) {
      const ItemId mapped = source_to_target[static_cast<std::size_t>(item)];
      if (mapped >= 0) restricted.push_back(mapped);
    }
    if (restricted.empty()) continue;
    ds.source.users.intern(source.users.name(u));
    ds.source.profiles.push_back(std::move(restricted));
  }
  return ds;
}

std::vector<Interaction> flatten(std::span<const Profile> profiles) {
  std::vector<Interaction> out;
  for (std::size_t u = 0; u < profiles.size(); ++u) {
    for (ItemId item : profiles[u]) out.push_back({static_cast<UserId>(u), item});
  }
  return out;
}

void SplitSpec::validate() const {
  for (const double f : {train_fraction, validation_fraction, test_fraction}) {
    if (!(f > 0.0 && f < 1.0)) {
      throw ConfigError("split fractions must each lie strictly between 0 and 1");
    }
  }
  if (std::abs(train_fraction + validation_fraction + test_fraction - 1.0) > 1e-12) {
    throw ConfigError("split fractions must sum to 1");
  }
}

DatasetSplit split_dataset(const CrossDomainDataset& dataset, const SplitSpec& spec) {
  spec.validate();
  const auto all = flatten(dataset.target.profiles);
  const std::size_t n = all.size();
  const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * n));
  const auto n_val = std::min(n - n_train,
                              static_cast<std::size_t>(std::llround(spec.validation_fraction * n)));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(spec.rng_seed);
  shuffle(order, rng);
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_train),
            order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());

  DatasetSplit split;
  for (std::size_t i = 0; i < n; ++i) {
    auto& bucket = i < n_train ? split.train : (i < n_train + n_val ? split.validation : split.test);
    bucket.push_back(all[order[i]]);
  }

  std::vector<int> train_count(static_cast<std::size_t>(dataset.target.user_count()), 0);
  std::vector<bool> in_test(train_count.size(), false);
  for (const auto& x : split.train) ++train_count[static_cast<std::size_t>(x.user)];
  for (const auto& x : split.test) in_test[static_cast<std::size_t>(x.user)] = true;
  for (std::size_t u = 0; u < train_count.size(); ++u) {
    if (in_test[u] && train_count[u] == 0) split.cold_users.push_back(static_cast<UserId>(u));
  }
  return split;
}

nlohmann::json split_report(const CrossDomainDataset& dataset, const DatasetSplit& split) {
  nlohmann::json cold = nlohmann::json::array();
  for (UserId u : split.cold_users) cold.push_back(dataset.target.users.name(u));
  return {
      {"train", split.train.size()},
      {"validation", split.validation.size()},
      {"test", split.test.size()},
      {"cold_users", std::move(cold)},
  };
}

std::vector<Profile> group_by_user(std::span<const Interaction> interactions, int user_count) {
  std::vector<Profile> profiles(static_cast<std::size_t>(user_count));
  for (const auto& x : interactions) profiles.at(static_cast<std::size_t>(x.user)).push_back(x.item);
  return profiles;
}

std::vector<int> item_degrees(std::span<const Interaction> interactions, int item_count) {
  std::vector<int> degree(static_cast<std::size_t>(item_count), 0);
  for (const auto& x : interactions) ++degree.at(static_cast<std::size_t>(x.item));
  return degree;
}

std::vector<ItemId> select_target_items(const CrossDomainDataset& dataset,
                                        std::span<const Interaction> train, int count,
                                        int max_interactions, std::uint64_t rng_seed) {
  if (count < 0) throw ConfigError("target item count must be non-negative");
  if (count == 0) return {};
  const auto degree = item_degrees(train, dataset.item_count());
  std::vector<ItemId> eligible;
  for (ItemId item : dataset.overlap) {
    if (degree[static_cast<std::size_t>(item)] < max_interactions) eligible.push_back(item);
  }
  if (eligible.size() < static_cast<std::size_t>(count)) {
    throw DataError("only " + std::to_string(eligible.size()) +
                    " overlap items have fewer than " + std::to_string(max_interactions) +
                    " training interactions; " + std::to_string(count) + " requested");
  }
  Rng rng(rng_seed);
  shuffle(eligible, rng);
  eligible.resize(static_cast<std::size_t>(count));
  return eligible;
}

}  // namespace copyattack
