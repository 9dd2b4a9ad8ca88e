#include "nfcf/transforms.hpp"

#include <algorithm>
#include <set>
#include <unordered_set>

#include "nfcf/errors.hpp"

namespace nfcf::data {

InteractionDataset preprocess(const InteractionDataset& ds, std::size_t min_item_count,
                              const std::vector<std::string>& excluded_sensitive_items) {
  if (min_item_count < 1) throw ContractError("preprocess: min item count must be >= 1");
  std::array<std::vector<bool>, 2> keep;

  const auto ns_counts = ds.item_counts(ItemClass::kNonSensitive);
  keep[0].resize(ns_counts.size());
  for (std::size_t i = 0; i < ns_counts.size(); ++i) keep[0][i] = ns_counts[i] >= min_item_count;

  const std::set<std::string> excluded(excluded_sensitive_items.begin(),
                                       excluded_sensitive_items.end());
  const auto s_counts = ds.item_counts(ItemClass::kSensitive);
  keep[1].resize(s_counts.size());
  for (std::size_t i = 0; i < s_counts.size(); ++i) {
    keep[1][i] = s_counts[i] > 0 &&
                 !excluded.count(ds.item_id(ItemClass::kSensitive, static_cast<std::uint32_t>(i)));
  }

  std::array<std::vector<std::string>, 2> item_ids;
  std::array<std::vector<Pair>, 2> pairs;
  for (ItemClass c : kItemClasses) {
    const std::size_t slot = class_slot(c);
    std::vector<std::uint32_t> remap(ds.num_items(c), 0);
    for (std::size_t i = 0; i < ds.num_items(c); ++i) {
      if (!keep[slot][i]) continue;
      remap[i] = static_cast<std::uint32_t>(item_ids[slot].size());
      item_ids[slot].push_back(ds.item_id(c, static_cast<std::uint32_t>(i)));
    }
    for (const Pair& p : ds.pairs(c)) {
      if (keep[slot][p.item]) pairs[slot].push_back({p.user, remap[p.item]});
    }
  }
  return InteractionDataset(ds.user_ids(), std::move(item_ids), std::move(pairs));
}

std::vector<std::uint32_t> sample_negatives(const UserItemIndex& positives, std::size_t num_items,
                                            std::uint32_t user, std::size_t k, Rng& rng) {
  const auto pos = positives.items(user);
  const std::size_t available = num_items - std::min(num_items, pos.size());
  std::vector<std::uint32_t> out;
  if (k == 0 || available == 0) return out;

  if (k >= available || pos.size() * 2 > num_items) {
    // Dense case: enumerate the candidates and draw a partial shuffle.
    std::vector<std::uint32_t> candidates;
    candidates.reserve(available);
    std::size_t p = 0;
    for (std::uint32_t i = 0; i < num_items; ++i) {
      while (p < pos.size() && pos[p] < i) ++p;
      if (p < pos.size() && pos[p] == i) continue;
      candidates.push_back(i);
    }
    if (k >= candidates.size()) return candidates;
    for (std::size_t j = 0; j < k; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, candidates.size() - 1);
      std::swap(candidates[j], candidates[pick(rng)]);
    }
    candidates.resize(k);
    return candidates;
  }

  std::uniform_int_distribution<std::uint32_t> dist(0, static_cast<std::uint32_t>(num_items - 1));
  out.reserve(k);
  while (out.size() < k) {
    const std::uint32_t i = dist(rng);
    if (std::binary_search(pos.begin(), pos.end(), i)) continue;
    if (std::find(out.begin(), out.end(), i) != out.end()) continue;
    out.push_back(i);
  }
  return out;
}

InteractionDataset resample_balanced(const InteractionDataset& ds, const UserCatalog& catalog,
                                     Rng& rng) {
  std::vector<bool> active(ds.num_users(), false);
  for (ItemClass c : kItemClasses) {
    for (const Pair& p : ds.pairs(c)) active[p.user] = true;
  }
  std::vector<std::uint32_t> males, females;
  for (std::uint32_t u = 0; u < ds.num_users(); ++u) {
    if (!active[u] || u >= catalog.num_users()) continue;
    if (catalog.gender(u) == Gender::kMale) males.push_back(u);
    if (catalog.gender(u) == Gender::kFemale) females.push_back(u);
  }
  if (males.empty() || females.empty()) {
    throw ContractError("resample_balanced: both genders must be present");
  }
  const std::size_t n = std::min(males.size(), females.size());
  std::vector<bool> keep(ds.num_users(), false);
  for (auto* group : {&males, &females}) {
    std::shuffle(group->begin(), group->end(), rng);
    for (std::size_t j = 0; j < n; ++j) keep[(*group)[j]] = true;
  }
  std::array<std::vector<Pair>, 2> pairs;
  for (ItemClass c : kItemClasses) {
    for (const Pair& p : ds.pairs(c)) {
      if (keep[p.user]) pairs[class_slot(c)].push_back(p);
    }
  }
  return InteractionDataset(ds.user_ids(), {ds.item_ids(ItemClass::kNonSensitive),
                                            ds.item_ids(ItemClass::kSensitive)},
                            std::move(pairs));
}

}  // namespace nfcf::data
