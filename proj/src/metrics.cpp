#include <copyattack/metrics.hpp>

#include <algorithm>
#include <cmath>

namespace copyattack {

std::optional<std::size_t> rank_position(std::span<const ItemId> ranked, ItemId item) {
  const auto it = std::find(ranked.begin(), ranked.end(), item);
  if (it == ranked.end()) return std::nullopt;
  return static_cast<std::size_t>(it - ranked.begin()) + 1;
}

int hit_ratio(std::span<const ItemId> ranked, ItemId item, int k) {
  const auto pos = rank_position(ranked, item);
  return pos ? hit_at(*pos, k) : 0;
}

double ndcg_at(std::size_t position, int k) {
  if (!hit_at(position, k)) return 0.0;
  return 1.0 / std::log2(static_cast<double>(position) + 1.0);
}

double ndcg_single(std::span<const ItemId> ranked, ItemId item, int k) {
  const auto pos = rank_position(ranked, item);
  return pos ? ndcg_at(*pos, k) : 0.0;
}

std::vector<std::vector<ItemId>> popularity_deciles(std::span<const ItemId> items,
                                                    std::span<const int> item_degree) {
  if (items.size() < 10) throw DataError("popularity deciles need at least 10 items");
  std::vector<ItemId> sorted(items.begin(), items.end());
  std::sort(sorted.begin(), sorted.end(), [&](ItemId a, ItemId b) {
    const int da = item_degree[static_cast<std::size_t>(a)];
    const int db = item_degree[static_cast<std::size_t>(b)];
    return da != db ? da > db : a < b;
  });
  std::vector<std::vector<ItemId>> groups(10);
  const std::size_t base = sorted.size() / 10, extra = sorted.size() % 10;
  std::size_t next = 0;
  for (std::size_t g = 0; g < 10; ++g) {
    const std::size_t size = base + (g < extra ? 1 : 0);
    groups[g].assign(sorted.begin() + static_cast<std::ptrdiff_t>(next),
                     sorted.begin() + static_cast<std::ptrdiff_t>(next + size));
    next += size;
  }
  return groups;
}

}  // namespace copyattack
