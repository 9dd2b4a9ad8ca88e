#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "nfcf/dataset.hpp"

namespace nfcf::data {

using Rng = std::mt19937_64;

// Drops non-sensitive items with fewer than min_item_count interactions and
// every pair on an excluded sensitive item; sensitive items left without
// interactions are dropped too. Item indices are re-densified, user indices
// are kept.
InteractionDataset preprocess(const InteractionDataset& ds, std::size_t min_item_count,
                              const std::vector<std::string>& excluded_sensitive_items);

// Up to k distinct items of [0, num_items) that the user has no pair with in
// `positives`, drawn uniformly without replacement. Returns every candidate
// when fewer than k exist.
std::vector<std::uint32_t> sample_negatives(const UserItemIndex& positives, std::size_t num_items,
                                            std::uint32_t user, std::size_t k, Rng& rng);

// Keeps the pairs of min(N_m, N_f) randomly chosen users of each gender,
// counting only users that have at least one pair.
InteractionDataset resample_balanced(const InteractionDataset& ds, const UserCatalog& catalog,
                                     Rng& rng);

}  // namespace nfcf::data
