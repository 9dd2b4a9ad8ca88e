#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nfcf/dataset.hpp"
#include "nfcf/models.hpp"
#include "nfcf/transforms.hpp"

namespace nfcf::eval {

using models::Scorer;

// 1-based rank of scores[target] in a descending sort where equal scores are
// ordered by ascending tiebreak value.
std::size_t rank_of(std::span<const double> scores, std::size_t target,
                    std::span<const std::uint32_t> tiebreak);
double hit_at(std::size_t rank, std::size_t k);
double ndcg_at(std::size_t rank, std::size_t k);

enum class CandidateMode {
  kAuto,     // every remaining item when the vocabulary has <= 101 items, else sampled
  kSampled,  // `candidates` sampled non-interacted items
  kFull,     // every item the user has not interacted with
};

struct EvalOptions {
  std::vector<std::size_t> ks = {5, 10};
  std::size_t candidates = 100;
  CandidateMode mode = CandidateMode::kAuto;
  std::uint64_t seed = 7;
};

struct RankedEvalResult {
  std::vector<std::size_t> ks;
  std::vector<double> hr, ndcg;
  std::size_t instances = 0;
  std::size_t skipped = 0;
  // Largest number of items ranked for one instance (test item included).
  std::size_t candidate_set = 0;
  bool full_vocabulary = false;
  std::uint64_t seed = 0;

  double hr_at(std::size_t k) const;
  double ndcg_at(std::size_t k) const;
  nlohmann::json to_json() const;
  void write_csv(const std::filesystem::path& path) const;
};

// Ranks each test item against items the user never interacted with
// according to `interacted` (which should hold every known pair of the
// class). Instances without any candidate are skipped and counted.
RankedEvalResult ranked_eval(const Scorer& score, std::span<const data::Pair> test,
                             const data::UserItemIndex& interacted, std::size_t num_items,
                             const EvalOptions& opts);

// K best items the user has not interacted with, best first. Ties follow a
// random permutation drawn from rng.
std::vector<std::uint32_t> topk_recommend(const Scorer& score, std::uint32_t user,
                                          const data::UserItemIndex& interacted,
                                          std::size_t num_items, std::size_t k, data::Rng& rng);

struct AuditRow {
  std::uint32_t item = 0;
  std::size_t male = 0;
  std::size_t female = 0;
  double female_share() const;
};

struct GenderAudit {
  std::vector<AuditRow> rows;  // one per item, item order
  // Items ordered by how often each gender received them (then item index).
  std::vector<std::uint32_t> ranked_male, ranked_female;
  nlohmann::json to_json(const std::vector<std::string>& item_names) const;
  void write_csv(const std::filesystem::path& path,
                 const std::vector<std::string>& item_names) const;
};

// Tally of top-1 recommendations per gender over the given users.
GenderAudit gender_audit(const Scorer& score, std::span<const std::uint32_t> users,
                         const data::UserCatalog& catalog, const data::UserItemIndex& interacted,
                         std::size_t num_items, std::uint64_t seed);
// Same table built from the observed pairs instead of a model.
GenderAudit dataset_audit(const data::InteractionDataset& ds, const data::UserCatalog& catalog,
                          data::ItemClass c);

}  // namespace nfcf::eval
