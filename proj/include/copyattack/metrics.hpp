#pragma once

#include <copyattack/common.hpp>

#include <optional>
#include <span>
#include <vector>

namespace copyattack {

/// 1-based position of `item` in `ranked`, if present.
std::optional<std::size_t> rank_position(std::span<const ItemId> ranked, ItemId item);

/// 1 iff `item` is among the first k entries.
int hit_ratio(std::span<const ItemId> ranked, ItemId item, int k);

/// 1/log2(position + 1) for a single relevant item within the first k, else 0.
double ndcg_single(std::span<const ItemId> ranked, ItemId item, int k);

/// Same closed forms from a known 1-based position.
inline int hit_at(std::size_t position, int k) {
  return position >= 1 && position <= static_cast<std::size_t>(k) ? 1 : 0;
}
double ndcg_at(std::size_t position, int k);

/// Ten contiguous groups by descending interaction count (ties: ascending id) whose sizes
/// differ by at most one, larger groups first.
std::vector<std::vector<ItemId>> popularity_deciles(std::span<const ItemId> items,
                                                    std::span<const int> item_degree);

}  // namespace copyattack
