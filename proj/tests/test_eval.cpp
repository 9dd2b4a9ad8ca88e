#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "nfcf/errors.hpp"
#include "nfcf/eval.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace nfcf::eval;
using nfcf::data::Gender;
using nfcf::data::Pair;
using nfcf::data::UserCatalog;
using nfcf::data::UserItemIndex;

namespace {

// Scores from a users x items table.
Scorer table_scorer(const std::vector<std::vector<double>>& t) {
  return [&t](std::span<const std::uint32_t> us, std::span<const std::uint32_t> is) {
    std::vector<double> out;
    for (std::size_t k = 0; k < us.size(); ++k) out.push_back(t.at(us[k]).at(is[k]));
    return out;
  };
}

}  // namespace

TEST_CASE("rank metric examples") {
  CHECK(hit_at(1, 5) == 1.0);
  CHECK(ndcg_at(1, 5) == 1.0);
  CHECK(ndcg_at(3, 5) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(hit_at(12, 10) == 0.0);
  CHECK(ndcg_at(12, 10) == 0.0);
}

TEST_CASE("rank_of follows score then tie order") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 1 + rng() % 8;
    std::vector<double> s(n);
    std::vector<std::uint32_t> tie(n);
    for (std::size_t k = 0; k < n; ++k) {
      s[k] = static_cast<double>(rng() % 3);  // plenty of ties
      tie[k] = static_cast<std::uint32_t>(k);
    }
    std::shuffle(tie.begin(), tie.end(), rng);
    const std::size_t target = rng() % n;
    CHECK(rank_of(s, target, tie) == oracle::rank_by_sort(s, target, tie));
  }
}

TEST_CASE("ranked eval on a hand-checked 3 x 5 grid") {
  const std::vector<std::vector<double>> scores = {
      {0.9, 0.1, 0.5, 0.3, 0.7},
      {0.2, 0.8, 0.6, 0.4, 0.1},
      {0.5, 0.4, 0.3, 0.2, 0.1},
  };
  // Test items: user 0 item 2, user 1 item 0, user 2 item 0. User 0 also
  // interacted with item 0, which leaves the candidate pool.
  const std::vector<Pair> known = {{0, 0}, {0, 2}, {1, 0}, {2, 0}};
  const std::vector<Pair> test = {{0, 2}, {1, 0}, {2, 0}};
  const UserItemIndex idx(3, known);
  EvalOptions o;
  o.ks = {1, 2, 3};
  o.mode = CandidateMode::kFull;
  const auto r = ranked_eval(table_scorer(scores), test, idx, 5, o);
  // Ranks: user 0 -> 2 (behind 0.7), user 1 -> 4, user 2 -> 1.
  CHECK(r.instances == 3);
  CHECK(r.full_vocabulary);
  CHECK(r.hr_at(1) == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(r.hr_at(2) == doctest::Approx(2.0 / 3).epsilon(1e-15));
  CHECK(r.hr_at(3) == doctest::Approx(2.0 / 3).epsilon(1e-15));
  CHECK(r.ndcg_at(2) == doctest::Approx((1.0 + 1.0 / std::log2(3.0)) / 3).epsilon(1e-14));
}

TEST_CASE("ranked eval equals the brute-force oracle") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 100; ++t) {
    const std::size_t users = 1 + rng() % 6, items = 2 + rng() % 5;
    std::vector<std::vector<double>> s(users, std::vector<double>(items));
    for (auto& row : s) {
      for (auto& x : row) x = u(rng);
    }
    std::vector<Pair> known, test;
    for (std::uint32_t a = 0; a < users; ++a) {
      test.push_back({a, static_cast<std::uint32_t>(rng() % items)});
      known.push_back(test.back());
      for (std::uint32_t i = 0; i < items; ++i) {
        if (rng() % 4 == 0 && i != test.back().item) known.push_back({a, i});
      }
    }
    std::sort(known.begin(), known.end());
    const UserItemIndex idx(users, known);
    EvalOptions o;
    o.ks = {1, 2, 3};
    o.mode = CandidateMode::kFull;
    o.seed = rng();
    const auto r = ranked_eval(table_scorer(s), test, idx, items, o);
    for (std::size_t k : o.ks) {
      long double hr = 0, nd = 0;
      std::size_t n = 0;
      for (const Pair& p : test) {
        std::size_t rank = 1, cands = 0;
        for (std::uint32_t i = 0; i < items; ++i) {
          if (i == p.item || idx.contains(p.user, i)) continue;
          ++cands;
          rank += s[p.user][i] > s[p.user][p.item];
        }
        if (cands == 0) continue;
        hr += oracle::hr(rank, k);
        nd += oracle::ndcg(rank, k);
        ++n;
      }
      REQUIRE(r.instances == n);
      if (n == 0) continue;
      CHECK(std::abs(r.hr_at(k) - static_cast<double>(hr / n)) <= 1e-12);
      CHECK(std::abs(r.ndcg_at(k) - static_cast<double>(nd / n)) <= 1e-12);
      CHECK(r.ndcg_at(k) <= r.hr_at(k) + 1e-15);
    }
  }
}

TEST_CASE("ranked eval contracts") {
  const std::vector<std::vector<double>> s = {{0.1, 0.2, 0.3}, {0.3, 0.2, 0.1}};
  const std::vector<Pair> known = {{0, 0}, {0, 1}, {0, 2}, {1, 1}};
  const UserItemIndex idx(2, known);
  EvalOptions o;
  o.ks = {5};
  o.mode = CandidateMode::kFull;
  // User 0 has nothing left to rank against.
  const auto r = ranked_eval(table_scorer(s), std::vector<Pair>{{0, 2}, {1, 1}}, idx, 3, o);
  CHECK(r.skipped == 1);
  CHECK(r.instances == 1);
  // K at least the candidate set: always a hit.
  CHECK(r.hr_at(5) == 1.0);

  o.mode = CandidateMode::kSampled;
  o.candidates = 3;
  CHECK_THROWS_AS(ranked_eval(table_scorer(s), std::vector<Pair>{{1, 1}}, idx, 3, o),
                  nfcf::ContractError);
}

TEST_CASE("sampled eval is deterministic and seed dependent") {
  const std::size_t users = 30, items = 400;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<std::vector<double>> s(users, std::vector<double>(items));
  for (auto& row : s) {
    for (auto& x : row) x = u(rng);
  }
  std::vector<Pair> test;
  for (std::uint32_t a = 0; a < users; ++a) test.push_back({a, a});
  const UserItemIndex idx(users, test);
  EvalOptions o;
  o.ks = {10};
  const auto a = ranked_eval(table_scorer(s), test, idx, items, o);
  const auto b = ranked_eval(table_scorer(s), test, idx, items, o);
  CHECK_FALSE(a.full_vocabulary);
  CHECK(a.candidate_set == 101);
  CHECK(a.hr_at(10) == b.hr_at(10));
  CHECK(a.ndcg_at(10) == b.ndcg_at(10));
  o.seed = 8;
  const auto c = ranked_eval(table_scorer(s), test, idx, items, o);
  CHECK(c.seed == 8);
}

TEST_CASE("top-k recommendation") {
  const std::vector<std::vector<double>> s = {std::vector<double>(17, 0.5)};
  std::vector<std::vector<double>> grad = {{}};
  for (int i = 0; i < 17; ++i) grad[0].push_back(i / 17.0);
  const UserItemIndex none(1, std::vector<Pair>{});
  nfcf::data::Rng rng(1);
  CHECK(topk_recommend(table_scorer(grad), 0, none, 17, 1, rng) == std::vector<std::uint32_t>{16});
  const UserItemIndex took(1, std::vector<Pair>{{0, 16}, {0, 15}});
  CHECK(topk_recommend(table_scorer(grad), 0, took, 17, 2, rng) ==
        std::vector<std::uint32_t>{14, 13});
  // K beyond the available items returns them all.
  CHECK(topk_recommend(table_scorer(grad), 0, took, 17, 40, rng).size() == 15);

  // Equal scores: order is the seeded tie permutation.
  nfcf::data::Rng r1(3), r2(3);
  const auto t1 = topk_recommend(table_scorer(s), 0, took, 17, 15, r1);
  const auto t2 = topk_recommend(table_scorer(s), 0, took, 17, 15, r2);
  CHECK(t1 == t2);
  const std::set<std::uint32_t> seen(t1.begin(), t1.end());
  CHECK(seen.size() == 15);
  CHECK_FALSE(seen.count(16));
  CHECK_FALSE(seen.count(15));
}

TEST_CASE("gender audits") {
  // Same scores for every user: both genders get the same lists.
  std::vector<std::vector<double>> s(6, {0.1, 0.9, 0.4});
  const UserCatalog cat({Gender::kMale, Gender::kFemale, Gender::kMale, Gender::kFemale,
                         Gender::kMale, Gender::kFemale});
  const UserItemIndex none(6, std::vector<Pair>{});
  const std::vector<std::uint32_t> users = {0, 1, 2, 3, 4, 5};
  const auto a = gender_audit(table_scorer(s), users, cat, none, 3, 1);
  CHECK(a.ranked_male == a.ranked_female);
  CHECK(a.rows[1].male == 3);
  CHECK(a.rows[1].female == 3);
  CHECK(a.rows[1].female_share() == 0.5);

  nfcf::data::DatasetBuilder b;
  for (int u = 0; u < 6; ++u) b.add_user("u" + std::to_string(u));
  b.add_pair("u0", nfcf::data::ItemClass::kSensitive, "homemaker");
  b.add_pair("u1", nfcf::data::ItemClass::kSensitive, "homemaker");
  b.add_pair("u3", nfcf::data::ItemClass::kSensitive, "homemaker");
  b.add_pair("u5", nfcf::data::ItemClass::kSensitive, "homemaker");
  b.add_pair("u2", nfcf::data::ItemClass::kSensitive, "engineer");
  const auto ds = std::move(b).build();
  const auto d = dataset_audit(ds, cat, nfcf::data::ItemClass::kSensitive);
  CHECK(d.rows[0].female_share() == doctest::Approx(0.75));
  CHECK(d.rows[1].female_share() == 0.0);
  CHECK(d.ranked_female.front() == 0);
}
