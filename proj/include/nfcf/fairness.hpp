#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "nfcf/dataset.hpp"
#include "nfcf/errors.hpp"
#include "nfcf/matrix.hpp"
#include "nfcf/tape.hpp"

namespace nfcf::fairness {

using data::Gender;
using diff::Matrix;

// Female and male mean embeddings coincide, so no direction exists.
class DegenerateDirectionError : public ContractError {
 public:
  using ContractError::ContractError;
};

struct BiasVector {
  std::vector<double> v;  // unit length
};

// Mean of the rows belonging to users with the given label.
std::vector<double> group_mean(const Matrix& users, const data::UserCatalog& catalog, Gender g);
// normalize(mean_female - mean_male)
BiasVector bias_vector(const Matrix& users, const data::UserCatalog& catalog);
std::vector<double> debias(std::span<const double> p, const BiasVector& b);
// Row-wise debias of a whole table.
Matrix debias_table(const Matrix& users, const BiasVector& b);

// Smoothed per-group outcome probability (soft + alpha) / (n + 2 alpha).
double smoothed_rate(double soft_count, double n, double alpha);
// max(|ln p_m - ln p_f|, |ln(1-p_m) - ln(1-p_f)|) for the smoothed rates.
double epsilon_from_counts(double soft_male, double n_male, double soft_female, double n_female,
                           double alpha);
// Scores of one item over labeled users; nullopt when a gender is absent.
// Users with an unknown label are ignored.
std::optional<double> epsilon_item(std::span<const double> scores, std::span<const Gender> genders,
                                   double alpha);
double epsilon_mean(std::span<const double> eps);

// Group means for one item; a group without observations is nullopt.
struct ItemGroupStats {
  std::optional<double> pred_female, obs_female;
  std::optional<double> pred_male, obs_male;
};
struct UAbsResult {
  double value = 0.0;
  std::size_t used_items = 0;
  std::size_t skipped_items = 0;
};
// Mean over items of | |E_D[y^] - E_D[r]| - |E_A[y^] - E_A[r]| | with D =
// female and A = male. Items lacking a group are skipped.
UAbsResult u_abs(std::span<const ItemGroupStats> items);

double huber(double x, double delta);

struct FairnessReport {
  double alpha = 1.0;
  std::vector<std::optional<double>> epsilon_per_item;
  double epsilon_mean = 0.0;
  double u_abs = 0.0;
  std::size_t skipped_items = 0;
  std::size_t users_male = 0;
  std::size_t users_female = 0;
  std::vector<double> soft_male, soft_female;

  nlohmann::json to_json() const;
};

// Scores every item in [0, num_items) for every evaluation user. Observed
// rates come from `observed` (pairs over the same users). Users with an
// unknown label are ignored.
using ItemScorer = std::function<std::vector<double>(std::span<const std::uint32_t> users,
                                                     std::span<const std::uint32_t> items)>;
FairnessReport fairness_report(const ItemScorer& score, std::span<const std::uint32_t> eval_users,
                               const data::UserCatalog& catalog, std::size_t num_items,
                               std::span<const data::Pair> observed, double alpha);

// Which batch rows feed the differential-fairness penalty.
enum class PenaltyInstances { kPositives, kAll };

struct DfPenaltyOptions {
  double alpha = 1.0;
  double epsilon0 = 0.0;
};

// Batch estimate of the mean item epsilon: per item, soft counts are summed
// over the included rows of each gender. Items lacking either gender among
// the included rows count as 0; the mean runs over all num_items items.
double batch_epsilon_mean(std::span<const double> scores, std::span<const Gender> genders,
                          std::span<const std::uint32_t> items, std::span<const std::uint8_t> include,
                          std::size_t num_items, double alpha);

// max(0, batch_epsilon_mean - epsilon0) as a 1 x 1 tape node over a B x 1
// score column.
diff::Var df_penalty(diff::Tape& tape, diff::Var scores, std::span<const Gender> genders,
                     std::span<const std::uint32_t> items, std::span<const std::uint8_t> include,
                     std::size_t num_items, DfPenaltyOptions opts = {});

// Mean over items with both genders among the included rows of
// huber(|E_D[y^] - E_D[y]| - |E_A[y^] - E_A[y]|), labels y per row. Zero when
// no item qualifies.
diff::Var huber_uabs_penalty(diff::Tape& tape, diff::Var scores, std::span<const double> labels,
                             std::span<const Gender> genders, std::span<const std::uint32_t> items,
                             std::span<const std::uint8_t> include, double delta = 1.0);

}  // namespace nfcf::fairness
