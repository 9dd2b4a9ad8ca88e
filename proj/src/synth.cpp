#include "nfcf/synth.hpp"

#include <random>
#include <set>

#include "nfcf/errors.hpp"
#include "nfcf/transforms.hpp"

namespace nfcf::data {

LoadedData synthesize(const SynthSpec& s) {
  if (s.users < 2 || s.clusters < 1 || s.sensitive_per_group < 1 ||
      s.nonsensitive_items < s.clusters || s.interactions_per_user < 1) {
    throw ConfigError("synth: sizes too small");
  }
  if (s.interactions_per_user > s.nonsensitive_items / 2) {
    throw ConfigError("synth: interactions_per_user must be at most half the item count");
  }
  Rng rng(s.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_cluster(0, s.clusters - 1);

  DatasetBuilder b;
  std::vector<Gender> genders(s.users);
  std::vector<std::size_t> cluster(s.users);
  for (std::size_t u = 0; u < s.users; ++u) {
    b.add_user("u" + std::to_string(u));
    genders[u] = u % 2 == 0 ? Gender::kMale : Gender::kFemale;
    cluster[u] = pick_cluster(rng);
  }
  // Item i sits in cluster i % clusters; lean cycles male, female, neutral
  // within each cluster.
  std::vector<std::vector<std::uint32_t>> by_cluster(s.clusters);
  std::vector<Gender> lean(s.nonsensitive_items);
  for (std::uint32_t i = 0; i < s.nonsensitive_items; ++i) {
    b.add_item(ItemClass::kNonSensitive, "item" + std::to_string(i));
    by_cluster[i % s.clusters].push_back(i);
    const std::size_t slot = (i / s.clusters) % 3;
    lean[i] = slot == 0 ? Gender::kMale : slot == 1 ? Gender::kFemale : Gender::kUnknown;
  }
  for (std::size_t c = 0; c < s.clusters; ++c) {
    for (const char* g : {"m", "f"}) {
      for (std::size_t k = 0; k < s.sensitive_per_group; ++k) {
        b.add_item(ItemClass::kSensitive,
                   "career_c" + std::to_string(c) + "_" + g + std::to_string(k));
      }
    }
  }

  std::uniform_int_distribution<std::uint32_t> any_item(
      0, static_cast<std::uint32_t>(s.nonsensitive_items - 1));
  std::uniform_int_distribution<std::size_t> any_k(0, s.sensitive_per_group - 1);
  for (std::uint32_t u = 0; u < s.users; ++u) {
    std::set<std::uint32_t> chosen;
    const auto& own = by_cluster[cluster[u]];
    std::uniform_int_distribution<std::size_t> own_pick(0, own.size() - 1);
    while (chosen.size() < s.interactions_per_user) {
      const std::uint32_t i = unit(rng) < s.cluster_affinity ? own[own_pick(rng)] : any_item(rng);
      const double w = lean[i] == Gender::kUnknown ? s.lean_neutral
                       : lean[i] == genders[u]     ? s.lean_same
                                                   : s.lean_opposite;
      if (unit(rng) < w) chosen.insert(i);
    }
    for (std::uint32_t i : chosen) b.add_pair_indices(u, ItemClass::kNonSensitive, i);

    const std::size_t c = unit(rng) < s.cluster_noise ? pick_cluster(rng) : cluster[u];
    const bool concordant = unit(rng) < s.concordance;
    const bool male_type = (genders[u] == Gender::kMale) == concordant;
    const std::size_t item =
        (c * 2 + (male_type ? 0 : 1)) * s.sensitive_per_group + any_k(rng);
    b.add_pair_indices(u, ItemClass::kSensitive, static_cast<std::uint32_t>(item));
  }

  LoadedData out;
  out.dataset = std::move(b).build();
  out.catalog = UserCatalog(std::move(genders));
  return out;
}

}  // namespace nfcf::data
