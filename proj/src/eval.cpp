#include "nfcf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "nfcf/errors.hpp"

namespace nfcf::eval {

std::size_t rank_of(std::span<const double> scores, std::size_t target,
                    std::span<const std::uint32_t> tiebreak) {
  if (target >= scores.size() || tiebreak.size() != scores.size()) {
    throw ContractError("rank_of: target or tiebreak out of range");
  }
  const double t = scores[target];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (j == target) continue;
    if (scores[j] > t || (scores[j] == t && tiebreak[j] < tiebreak[target])) ++rank;
  }
  return rank;
}

double hit_at(std::size_t rank, std::size_t k) { return rank <= k ? 1.0 : 0.0; }

double ndcg_at(std::size_t rank, std::size_t k) {
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

double RankedEvalResult::hr_at(std::size_t k) const {
  for (std::size_t j = 0; j < ks.size(); ++j) {
    if (ks[j] == k) return hr[j];
  }
  throw ContractError("no HR@" + std::to_string(k) + " in result");
}

double RankedEvalResult::ndcg_at(std::size_t k) const {
  for (std::size_t j = 0; j < ks.size(); ++j) {
    if (ks[j] == k) return ndcg[j];
  }
  throw ContractError("no NDCG@" + std::to_string(k) + " in result");
}

nlohmann::json RankedEvalResult::to_json() const {
  nlohmann::json j;
  j["instances"] = instances;
  j["skipped"] = skipped;
  j["candidate_set"] = candidate_set;
  j["full_vocabulary"] = full_vocabulary;
  j["seed"] = seed;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    j["metrics"].push_back({{"k", ks[i]}, {"hr", hr[i]}, {"ndcg", ndcg[i]}});
  }
  return j;
}

void RankedEvalResult::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out.precision(10);
  out << "k,hr,ndcg,instances,skipped,candidate_set\n";
  for (std::size_t i = 0; i < ks.size(); ++i) {
    out << ks[i] << ',' << hr[i] << ',' << ndcg[i] << ',' << instances << ',' << skipped << ','
        << candidate_set << '\n';
  }
}

namespace {

// Neumaier summation so the means do not depend on accumulation error drift.
struct Compensated {
  double sum = 0.0, c = 0.0;
  void add(double x) {
    const double t = sum + x;
    c += std::abs(sum) >= std::abs(x) ? (sum - t) + x : (x - t) + sum;
    sum = t;
  }
  double value() const { return sum + c; }
};

std::vector<std::uint32_t> remaining_items(const data::UserItemIndex& interacted,
                                           std::size_t num_items, std::uint32_t user) {
  std::vector<std::uint32_t> out;
  for (std::uint32_t i = 0; i < num_items; ++i) {
    if (!interacted.contains(user, i)) out.push_back(i);
  }
  return out;
}

}  // namespace

RankedEvalResult ranked_eval(const Scorer& score, std::span<const data::Pair> test,
                             const data::UserItemIndex& interacted, std::size_t num_items,
                             const EvalOptions& opts) {
  if (opts.ks.empty()) throw ContractError("ranked_eval: no cutoffs");
  RankedEvalResult res;
  res.ks = opts.ks;
  std::sort(res.ks.begin(), res.ks.end());
  res.ks.erase(std::unique(res.ks.begin(), res.ks.end()), res.ks.end());
  if (res.ks.front() == 0) throw ContractError("ranked_eval: K must be positive");
  res.seed = opts.seed;
  res.full_vocabulary = opts.mode == CandidateMode::kFull ||
                        (opts.mode == CandidateMode::kAuto && num_items <= opts.candidates + 1);
  if (!res.full_vocabulary && opts.candidates < res.ks.back()) {
    // The sampled set must be able to hold a miss at every cutoff.
    throw ContractError("ranked_eval: candidate count below the largest K");
  }

  data::Rng rng(opts.seed);
  std::vector<Compensated> hr(res.ks.size()), nd(res.ks.size());

  // Instances are scored in blocks to amortize the model's batching.
  constexpr std::size_t kBlock = 256;
  std::vector<std::vector<std::uint32_t>> lists;
  std::vector<std::vector<std::uint32_t>> perms;
  std::vector<std::uint32_t> users, items;
  auto flush = [&] {
    if (lists.empty()) return;
    const auto s = score(users, items);
    std::size_t off = 0;
    for (std::size_t n = 0; n < lists.size(); ++n) {
      const std::size_t len = lists[n].size();
      const std::size_t rank =
          rank_of(std::span<const double>(s).subspan(off, len), 0, perms[n]);
      for (std::size_t j = 0; j < res.ks.size(); ++j) {
        hr[j].add(hit_at(rank, res.ks[j]));
        nd[j].add(ndcg_at(rank, res.ks[j]));
      }
      off += len;
    }
    lists.clear();
    perms.clear();
    users.clear();
    items.clear();
  };

  for (const auto& p : test) {
    if (p.item >= num_items) throw ContractError("ranked_eval: test item out of range");
    std::vector<std::uint32_t> negs =
        res.full_vocabulary ? remaining_items(interacted, num_items, p.user)
                            : data::sample_negatives(interacted, num_items, p.user, opts.candidates, rng);
    // The test item itself may be missing from `interacted`; never rank it twice.
    negs.erase(std::remove(negs.begin(), negs.end(), p.item), negs.end());
    if (negs.empty()) {
      ++res.skipped;
      continue;
    }
    std::vector<std::uint32_t> cand;
    cand.reserve(negs.size() + 1);
    cand.push_back(p.item);
    cand.insert(cand.end(), negs.begin(), negs.end());
    std::vector<std::uint32_t> perm(cand.size());
    std::iota(perm.begin(), perm.end(), 0u);
    std::shuffle(perm.begin(), perm.end(), rng);
    res.candidate_set = std::max(res.candidate_set, cand.size());
    for (std::uint32_t i : cand) {
      users.push_back(p.user);
      items.push_back(i);
    }
    lists.push_back(std::move(cand));
    perms.push_back(std::move(perm));
    ++res.instances;
    if (lists.size() == kBlock) flush();
  }
  flush();

  for (std::size_t j = 0; j < res.ks.size(); ++j) {
    res.hr.push_back(res.instances ? hr[j].value() / static_cast<double>(res.instances) : 0.0);
    res.ndcg.push_back(res.instances ? nd[j].value() / static_cast<double>(res.instances) : 0.0);
  }
  return res;
}

std::vector<std::uint32_t> topk_recommend(const Scorer& score, std::uint32_t user,
                                          const data::UserItemIndex& interacted,
                                          std::size_t num_items, std::size_t k, data::Rng& rng) {
  auto cand = remaining_items(interacted, num_items, user);
  if (cand.empty()) return {};
  std::vector<std::uint32_t> us(cand.size(), user);
  const auto s = score(us, cand);
  std::vector<std::uint32_t> tie(cand.size());
  std::iota(tie.begin(), tie.end(), 0u);
  std::shuffle(tie.begin(), tie.end(), rng);
  std::vector<std::size_t> order(cand.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (s[a] != s[b]) return s[a] > s[b];
    return tie[a] < tie[b];
  });
  std::vector<std::uint32_t> out;
  for (std::size_t j = 0; j < std::min(k, order.size()); ++j) out.push_back(cand[order[j]]);
  return out;
}

double AuditRow::female_share() const {
  const std::size_t n = male + female;
  return n ? static_cast<double>(female) / static_cast<double>(n) : 0.0;
}

namespace {

void rank_lists(GenderAudit& a) {
  auto ranked = [&](auto field) {
    std::vector<std::uint32_t> idx;
    for (const auto& r : a.rows) idx.push_back(r.item);
    std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t x, std::uint32_t y) {
      return a.rows[x].*field > a.rows[y].*field;
    });
    return idx;
  };
  a.ranked_male = ranked(&AuditRow::male);
  a.ranked_female = ranked(&AuditRow::female);
}

}  // namespace

nlohmann::json GenderAudit::to_json(const std::vector<std::string>& names) const {
  nlohmann::json j;
  auto name = [&](std::uint32_t i) { return i < names.size() ? names[i] : std::to_string(i); };
  for (const auto& r : rows) {
    j["items"].push_back({{"item", name(r.item)},
                          {"male", r.male},
                          {"female", r.female},
                          {"female_share", r.female_share()}});
  }
  for (std::uint32_t i : ranked_male) j["ranked_male"].push_back(name(i));
  for (std::uint32_t i : ranked_female) j["ranked_female"].push_back(name(i));
  return j;
}

void GenderAudit::write_csv(const std::filesystem::path& path,
                            const std::vector<std::string>& names) const {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  auto name = [&](std::uint32_t i) { return i < names.size() ? names[i] : std::to_string(i); };
  auto quoted = [](const std::string& s) {
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  out.precision(6);
  out << "rank,male_item,male_count,female_item,female_count\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& m = rows[ranked_male[r]];
    const auto& f = rows[ranked_female[r]];
    out << r + 1 << ',' << quoted(name(m.item)) << ',' << m.male << ',' << quoted(name(f.item))
        << ',' << f.female << '\n';
  }
}

GenderAudit gender_audit(const Scorer& score, std::span<const std::uint32_t> users,
                         const data::UserCatalog& catalog, const data::UserItemIndex& interacted,
                         std::size_t num_items, std::uint64_t seed) {
  GenderAudit a;
  for (std::uint32_t i = 0; i < num_items; ++i) a.rows.push_back({i, 0, 0});
  data::Rng rng(seed);
  for (std::uint32_t u : users) {
    const data::Gender g = catalog.gender(u);
    if (g == data::Gender::kUnknown) continue;
    const auto top = topk_recommend(score, u, interacted, num_items, 1, rng);
    if (top.empty()) continue;
    (g == data::Gender::kMale ? a.rows[top[0]].male : a.rows[top[0]].female)++;
  }
  rank_lists(a);
  return a;
}

GenderAudit dataset_audit(const data::InteractionDataset& ds, const data::UserCatalog& catalog,
                          data::ItemClass c) {
  GenderAudit a;
  for (std::uint32_t i = 0; i < ds.num_items(c); ++i) a.rows.push_back({i, 0, 0});
  for (const auto& p : ds.pairs(c)) {
    const data::Gender g = catalog.gender(p.user);
    if (g == data::Gender::kMale) ++a.rows[p.item].male;
    if (g == data::Gender::kFemale) ++a.rows[p.item].female;
  }
  rank_lists(a);
  return a;
}

}  // namespace nfcf::eval
