#include "nfcf/fairness.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace nfcf::fairness {

namespace {

std::size_t gslot(Gender g) { return static_cast<std::size_t>(g); }

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

void check_batch(std::size_t rows, std::span<const Gender> genders,
                 std::span<const std::uint32_t> items, std::span<const std::uint8_t> include,
                 const char* op) {
  if (genders.size() != rows || items.size() != rows || include.size() != rows) {
    throw ContractError(std::string(op) + ": batch annotations do not match " +
                        std::to_string(rows) + " score rows");
  }
}

// Per-item smoothed soft counts over the included rows.
struct ItemCounts {
  double soft[3] = {0, 0, 0};
  double n[3] = {0, 0, 0};
  bool both() const { return n[1] > 0 && n[2] > 0; }
};

std::map<std::uint32_t, ItemCounts> batch_counts(std::span<const double> scores,
                                                 std::span<const Gender> genders,
                                                 std::span<const std::uint32_t> items,
                                                 std::span<const std::uint8_t> include,
                                                 std::size_t num_items) {
  std::map<std::uint32_t, ItemCounts> out;
  for (std::size_t r = 0; r < scores.size(); ++r) {
    if (!include[r] || genders[r] == Gender::kUnknown) continue;
    if (items[r] >= num_items) {
      throw ContractError("df_penalty: item " + std::to_string(items[r]) + " outside vocabulary of " +
                          std::to_string(num_items));
    }
    auto& c = out[items[r]];
    c.soft[gslot(genders[r])] += scores[r];
    c.n[gslot(genders[r])] += 1.0;
  }
  return out;
}

}  // namespace

std::vector<double> group_mean(const Matrix& users, const data::UserCatalog& catalog, Gender g) {
  if (catalog.num_users() != users.rows()) {
    throw ContractError("group_mean: catalog has " + std::to_string(catalog.num_users()) +
                        " users, table has " + std::to_string(users.rows()));
  }
  std::vector<double> mean(users.cols(), 0.0);
  std::size_t n = 0;
  for (std::uint32_t u = 0; u < users.rows(); ++u) {
    if (catalog.gender(u) != g) continue;
    auto row = users.row_span(u);
    for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += row[c];
    ++n;
  }
  if (n == 0) {
    throw ContractError("group_mean: no users labeled " + std::string(data::to_string(g)));
  }
  for (double& m : mean) m /= static_cast<double>(n);
  return mean;
}

BiasVector bias_vector(const Matrix& users, const data::UserCatalog& catalog) {
  const auto f = group_mean(users, catalog, Gender::kFemale);
  const auto m = group_mean(users, catalog, Gender::kMale);
  BiasVector b;
  b.v.resize(f.size());
  for (std::size_t c = 0; c < f.size(); ++c) b.v[c] = f[c] - m[c];
  const double norm = std::sqrt(diff::dot(b.v, b.v));
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    throw DegenerateDirectionError("bias_vector: female and male mean embeddings coincide");
  }
  for (double& x : b.v) x /= norm;
  return b;
}

std::vector<double> debias(std::span<const double> p, const BiasVector& b) {
  if (p.size() != b.v.size()) {
    throw ContractError("debias: embedding has " + std::to_string(p.size()) +
                        " dims, bias vector " + std::to_string(b.v.size()));
  }
  const double proj = diff::dot(p, b.v);
  std::vector<double> out(p.begin(), p.end());
  for (std::size_t c = 0; c < out.size(); ++c) out[c] -= proj * b.v[c];
  return out;
}

Matrix debias_table(const Matrix& users, const BiasVector& b) {
  Matrix out(users.rows(), users.cols());
  for (std::size_t r = 0; r < users.rows(); ++r) {
    const auto row = debias(users.row_span(r), b);
    std::copy(row.begin(), row.end(), out.row_span(r).begin());
  }
  return out;
}

double smoothed_rate(double soft_count, double n, double alpha) {
  return (soft_count + alpha) / (n + 2.0 * alpha);
}

double epsilon_from_counts(double soft_male, double n_male, double soft_female, double n_female,
                           double alpha) {
  if (!(alpha > 0.0)) throw ContractError("epsilon: alpha must be positive");
  const double pm = smoothed_rate(soft_male, n_male, alpha);
  const double pf = smoothed_rate(soft_female, n_female, alpha);
  const double pos = std::abs(std::log(pm) - std::log(pf));
  const double neg = std::abs(std::log1p(-pm) - std::log1p(-pf));
  return std::max(pos, neg);
}

std::optional<double> epsilon_item(std::span<const double> scores, std::span<const Gender> genders,
                                   double alpha) {
  if (scores.size() != genders.size()) {
    throw ContractError("epsilon_item: scores and genders differ in length");
  }
  double soft[3] = {0, 0, 0};
  double n[3] = {0, 0, 0};
  for (std::size_t r = 0; r < scores.size(); ++r) {
    soft[gslot(genders[r])] += scores[r];
    n[gslot(genders[r])] += 1.0;
  }
  if (n[1] == 0 || n[2] == 0) return std::nullopt;
  return epsilon_from_counts(soft[1], n[1], soft[2], n[2], alpha);
}

double epsilon_mean(std::span<const double> eps) {
  if (eps.empty()) throw ContractError("epsilon_mean: no items");
  return std::accumulate(eps.begin(), eps.end(), 0.0) / static_cast<double>(eps.size());
}

UAbsResult u_abs(std::span<const ItemGroupStats> items) {
  UAbsResult r;
  double total = 0.0;
  for (const auto& s : items) {
    if (!s.pred_female || !s.obs_female || !s.pred_male || !s.obs_male) {
      ++r.skipped_items;
      continue;
    }
    total += std::abs(std::abs(*s.pred_female - *s.obs_female) - std::abs(*s.pred_male - *s.obs_male));
    ++r.used_items;
  }
  if (r.used_items == 0) throw ContractError("u_abs: no item has observations for both groups");
  r.value = total / static_cast<double>(r.used_items);
  return r;
}

double huber(double x, double delta) {
  const double a = std::abs(x);
  return a <= delta ? 0.5 * x * x : delta * (a - 0.5 * delta);
}

nlohmann::json FairnessReport::to_json() const {
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& e : epsilon_per_item) eps.push_back(e ? nlohmann::json(*e) : nlohmann::json());
  return {{"alpha", alpha},
          {"epsilon_per_item", eps},
          {"epsilon_mean", epsilon_mean},
          {"u_abs", u_abs},
          {"skipped_items", skipped_items},
          {"users", {{"male", users_male}, {"female", users_female}}},
          {"soft_counts", {{"male", soft_male}, {"female", soft_female}}}};
}

FairnessReport fairness_report(const ItemScorer& score, std::span<const std::uint32_t> eval_users,
                               const data::UserCatalog& catalog, std::size_t num_items,
                               std::span<const data::Pair> observed, double alpha) {
  FairnessReport rep;
  rep.alpha = alpha;
  std::vector<std::uint32_t> users;
  std::vector<Gender> genders;
  std::vector<std::uint8_t> in_eval(catalog.num_users(), 0);
  for (std::uint32_t u : eval_users) {
    const Gender g = catalog.gender(u);
    if (g == Gender::kUnknown || in_eval[u]) continue;
    in_eval[u] = 1;
    users.push_back(u);
    genders.push_back(g);
  }
  for (Gender g : genders) (g == Gender::kMale ? rep.users_male : rep.users_female)++;

  std::vector<double> hits_m(num_items, 0.0), hits_f(num_items, 0.0);
  for (const auto& p : observed) {
    if (p.user >= in_eval.size() || !in_eval[p.user] || p.item >= num_items) continue;
    (catalog.gender(p.user) == Gender::kMale ? hits_m : hits_f)[p.item] += 1.0;
  }

  rep.soft_male.assign(num_items, 0.0);
  rep.soft_female.assign(num_items, 0.0);
  std::vector<double> eps_defined;
  std::vector<ItemGroupStats> stats(num_items);
  const double nm = static_cast<double>(rep.users_male);
  const double nf = static_cast<double>(rep.users_female);
  std::vector<std::uint32_t> item_col(users.size());
  for (std::uint32_t i = 0; i < num_items; ++i) {
    std::fill(item_col.begin(), item_col.end(), i);
    const auto s = users.empty() ? std::vector<double>{} : score(users, item_col);
    rep.epsilon_per_item.push_back(epsilon_item(s, genders, alpha));
    for (std::size_t r = 0; r < s.size(); ++r) {
      (genders[r] == Gender::kMale ? rep.soft_male : rep.soft_female)[i] += s[r];
    }
    if (rep.epsilon_per_item.back()) {
      eps_defined.push_back(*rep.epsilon_per_item.back());
    } else {
      ++rep.skipped_items;
    }
    if (nm > 0) {
      stats[i].pred_male = rep.soft_male[i] / nm;
      stats[i].obs_male = hits_m[i] / nm;
    }
    if (nf > 0) {
      stats[i].pred_female = rep.soft_female[i] / nf;
      stats[i].obs_female = hits_f[i] / nf;
    }
  }
  rep.epsilon_mean = epsilon_mean(eps_defined);
  rep.u_abs = u_abs(stats).value;
  return rep;
}

double batch_epsilon_mean(std::span<const double> scores, std::span<const Gender> genders,
                          std::span<const std::uint32_t> items, std::span<const std::uint8_t> include,
                          std::size_t num_items, double alpha) {
  check_batch(scores.size(), genders, items, include, "batch_epsilon_mean");
  if (num_items == 0) throw ContractError("batch_epsilon_mean: empty item vocabulary");
  double total = 0.0;
  for (const auto& [item, c] : batch_counts(scores, genders, items, include, num_items)) {
    if (c.both()) total += epsilon_from_counts(c.soft[1], c.n[1], c.soft[2], c.n[2], alpha);
  }
  return total / static_cast<double>(num_items);
}

diff::Var df_penalty(diff::Tape& tape, diff::Var scores, std::span<const Gender> genders,
                     std::span<const std::uint32_t> items, std::span<const std::uint8_t> include,
                     std::size_t num_items, DfPenaltyOptions opts) {
  const Matrix& s = tape.value(scores);
  if (s.cols() != 1) throw ContractError("df_penalty: scores must be a column, got " + s.shape_string());
  const std::span<const double> sv(s.data());
  const double eps = batch_epsilon_mean(sv, genders, items, include, num_items, opts.alpha);
  const double value = std::max(0.0, eps - opts.epsilon0);

  // d penalty / d score per row, fixed at recording time.
  Matrix local(s.rows(), 1);
  if (eps > opts.epsilon0) {
    const auto counts = batch_counts(sv, genders, items, include, num_items);
    std::map<std::uint32_t, std::pair<double, double>> dp;  // d eps_i / d p_m, d p_f
    for (const auto& [item, c] : counts) {
      if (!c.both()) continue;
      const double pm = smoothed_rate(c.soft[1], c.n[1], opts.alpha);
      const double pf = smoothed_rate(c.soft[2], c.n[2], opts.alpha);
      const double a = std::log(pm) - std::log(pf);
      const double b = std::log1p(-pm) - std::log1p(-pf);
      if (std::abs(a) >= std::abs(b)) {
        dp[item] = {sign(a) / pm, -sign(a) / pf};
      } else {
        dp[item] = {-sign(b) / (1.0 - pm), sign(b) / (1.0 - pf)};
      }
    }
    const double inv_items = 1.0 / static_cast<double>(num_items);
    for (std::size_t r = 0; r < s.rows(); ++r) {
      if (!include[r] || genders[r] == Gender::kUnknown) continue;
      auto it = dp.find(items[r]);
      if (it == dp.end()) continue;
      const auto& c = counts.at(items[r]);
      const std::size_t g = gslot(genders[r]);
      const double dpg = g == 1 ? it->second.first : it->second.second;
      local(r, 0) = inv_items * dpg / (c.n[g] + 2.0 * opts.alpha);
    }
  }
  return tape.record({scores}, Matrix::scalar(value),
                     [local = std::move(local)](const Matrix& g, std::span<Matrix* const> grads) {
                       if (!grads[0]) return;
                       Matrix& gs = *grads[0];
                       for (std::size_t r = 0; r < local.rows(); ++r) gs[r] += g[0] * local[r];
                     });
}

diff::Var huber_uabs_penalty(diff::Tape& tape, diff::Var scores, std::span<const double> labels,
                             std::span<const Gender> genders, std::span<const std::uint32_t> items,
                             std::span<const std::uint8_t> include, double delta) {
  const Matrix& s = tape.value(scores);
  if (s.cols() != 1) {
    throw ContractError("huber_uabs_penalty: scores must be a column, got " + s.shape_string());
  }
  check_batch(s.rows(), genders, items, include, "huber_uabs_penalty");
  if (labels.size() != s.rows()) throw ContractError("huber_uabs_penalty: label count mismatch");

  struct Acc {
    double pred[3] = {0, 0, 0};
    double obs[3] = {0, 0, 0};
    double n[3] = {0, 0, 0};
  };
  std::map<std::uint32_t, Acc> acc;
  for (std::size_t r = 0; r < s.rows(); ++r) {
    if (!include[r] || genders[r] == Gender::kUnknown) continue;
    auto& a = acc[items[r]];
    const std::size_t g = gslot(genders[r]);
    a.pred[g] += s[r];
    a.obs[g] += labels[r];
    a.n[g] += 1.0;
  }
  double total = 0.0;
  std::size_t used = 0;
  // Per item: derivative factor for female rows and male rows.
  std::map<std::uint32_t, std::pair<double, double>> slope;
  for (const auto& [item, a] : acc) {
    if (a.n[1] == 0 || a.n[2] == 0) continue;
    const double dd = a.pred[2] / a.n[2] - a.obs[2] / a.n[2];
    const double da = a.pred[1] / a.n[1] - a.obs[1] / a.n[1];
    const double x = std::abs(dd) - std::abs(da);
    total += huber(x, delta);
    ++used;
    const double hx = std::abs(x) <= delta ? x : delta * sign(x);
    slope[item] = {hx * sign(dd) / a.n[2], -hx * sign(da) / a.n[1]};
  }
  const double value = used ? total / static_cast<double>(used) : 0.0;
  Matrix local(s.rows(), 1);
  if (used) {
    const double inv = 1.0 / static_cast<double>(used);
    for (std::size_t r = 0; r < s.rows(); ++r) {
      if (!include[r] || genders[r] == Gender::kUnknown) continue;
      auto it = slope.find(items[r]);
      if (it == slope.end()) continue;
      local(r, 0) = inv * (genders[r] == Gender::kFemale ? it->second.first : it->second.second);
    }
  }
  return tape.record({scores}, Matrix::scalar(value),
                     [local = std::move(local)](const Matrix& g, std::span<Matrix* const> grads) {
                       if (!grads[0]) return;
                       Matrix& gs = *grads[0];
                       for (std::size_t r = 0; r < local.rows(); ++r) gs[r] += g[0] * local[r];
                     });
}

}  // namespace nfcf::fairness
