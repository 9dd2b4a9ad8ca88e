// Acceptance checks. One line per criterion:
//   acceptance core        criteria 1, 2, 3, 7, 8
//   acceptance movielens   criteria 4, 5, 6 (exit 77 when the data is missing)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "nfcf/checkpoint.hpp"
#include "nfcf/cli.hpp"
#include "nfcf/synth.hpp"
#include "nfcf/training.hpp"
#include "oracles.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace nfcf;
using data::Gender;
using data::ItemClass;
using data::Pair;
using diff::Matrix;
using diff::Parameter;
using diff::Tape;
using diff::Var;
using training::TrainConfig;

namespace {

int failures = 0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

void report(int id, const std::string& title, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("[%s] criterion %d: %s | %s | %.1fs\n", o.pass ? "PASS" : "FAIL", id, title.c_str(),
              o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

// ---------------------------------------------------------------- 1

Outcome gradients() {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0;
  for (int inst = 0; inst < 20; ++inst) {
    const std::size_t v = 1 + rng() % 4;
    const std::size_t hidden = 1 + rng() % std::min<std::size_t>(4, 2 * v - 1);
    const std::size_t users = 3 + rng() % 4, items = 3 + rng() % 4, batch = 6 + rng() % 7;
    models::NcfParams p = models::init_ncf(users, items, v, {2 * v, hidden}, rng());
    std::normal_distribution<double> nd(0.0, 0.7);
    for (Parameter* q : models::parameters(p)) {
      for (double& x : q->value.data()) x = nd(rng);
    }
    std::vector<std::uint32_t> us(batch), is(batch);
    std::vector<double> labels(batch);
    std::vector<Gender> genders(batch);
    std::vector<std::uint8_t> include(batch);
    std::vector<Gender> user_gender(users);
    for (std::size_t u = 0; u < users; ++u) user_gender[u] = u % 2 ? Gender::kFemale : Gender::kMale;
    for (std::size_t r = 0; r < batch; ++r) {
      us[r] = static_cast<std::uint32_t>(rng() % users);
      is[r] = static_cast<std::uint32_t>(rng() % items);
      labels[r] = static_cast<double>(rng() % 2);
      genders[r] = user_gender[us[r]];
      include[r] = labels[r] > 0.5;
    }
    const double lambda = 0.5 + (rng() % 100) / 100.0;
    for (bool penalized : {false, true}) {
      auto build = [&](Tape& t) {
        const Var s = models::ncf_forward(t, p, us, is);
        const Var loss = training::bce_loss(t, s, labels, true);
        if (!penalized) return loss;
        const Var pen = fairness::df_penalty(t, s, genders, is, include, items);
        return t.add(loss, t.scale(pen, lambda));
      };
      const auto r = testing::check_gradients(models::parameters(p), build);
      checked += r.checked;
      if (r.worst > worst) {
        worst = r.worst;
        where = "instance " + std::to_string(inst) + (penalized ? " penalized " : " plain ") +
                r.where;
      }
    }
  }
  return {worst < 1e-4, "20 instances, " + std::to_string(checked) + " gradient entries, worst rel err " +
                            fmt("%.2e", worst) + (worst < 1e-4 ? "" : " at " + where)};
}

// ---------------------------------------------------------------- 2

Outcome metric_oracles() {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const int instances = 150;
  double worst = 0.0;
  std::size_t comparisons = 0;
  auto note = [&](double a, double b) {
    worst = std::max(worst, std::abs(a - b));
    ++comparisons;
  };
  for (int inst = 0; inst < instances; ++inst) {
    const std::size_t users = 2 + rng() % 5, items = 2 + rng() % 5;
    std::vector<Gender> g(users);
    for (auto& x : g) x = static_cast<Gender>(rng() % 3);
    g[0] = Gender::kMale;
    g[1] = Gender::kFemale;
    std::vector<std::vector<double>> pred(users, std::vector<double>(items));
    std::vector<std::vector<double>> obs(users, std::vector<double>(items, 0.0));
    std::vector<Pair> observed, test;
    for (std::uint32_t a = 0; a < users; ++a) {
      for (std::uint32_t i = 0; i < items; ++i) {
        pred[a][i] = u01(rng);
        if (rng() % 3 == 0) {
          obs[a][i] = 1.0;
          observed.push_back({a, i});
        }
      }
    }
    const double alpha = 0.25 + 2 * u01(rng);
    const data::UserCatalog cat(g);
    auto scorer = [&](std::span<const std::uint32_t> us, std::span<const std::uint32_t> is) {
      std::vector<double> out;
      for (std::size_t k = 0; k < us.size(); ++k) out.push_back(pred[us[k]][is[k]]);
      return out;
    };
    std::vector<std::uint32_t> all_users(users);
    for (std::uint32_t a = 0; a < users; ++a) all_users[a] = a;
    const auto rep = fairness::fairness_report(scorer, all_users, cat, items, observed, alpha);
    std::vector<double> eps;
    for (std::size_t i = 0; i < items; ++i) {
      std::vector<double> col;
      for (std::size_t a = 0; a < users; ++a) col.push_back(pred[a][i]);
      const auto e = oracle::epsilon_item(col, g, alpha);
      if (!e || !rep.epsilon_per_item[i]) return {false, "epsilon undefined on a two-gender item"};
      note(*rep.epsilon_per_item[i], *e);
      eps.push_back(*e);
    }
    note(rep.epsilon_mean, oracle::mean(eps));
    note(rep.u_abs, *oracle::u_abs(pred, obs, g));

    // Ranking: one held-out item per user among the items they never saw.
    std::vector<Pair> known = observed;
    for (std::uint32_t a = 0; a < users; ++a) {
      const auto i = static_cast<std::uint32_t>(rng() % items);
      test.push_back({a, i});
      known.push_back({a, i});
    }
    std::sort(known.begin(), known.end());
    known.erase(std::unique(known.begin(), known.end()), known.end());
    const data::UserItemIndex idx(users, known);
    eval::EvalOptions o;
    o.ks = {1, 2, 3, 5};
    o.mode = eval::CandidateMode::kFull;
    o.seed = rng();
    const auto r = eval::ranked_eval(scorer, test, idx, items, o);
    for (std::size_t j = 0; j < o.ks.size(); ++j) {
      long double hr = 0, nd = 0;
      std::size_t n = 0;
      for (const Pair& t : test) {
        std::vector<double> s;
        std::vector<std::uint32_t> tie;
        std::size_t target = 0;
        for (std::uint32_t i = 0; i < items; ++i) {
          if (i != t.item && idx.contains(t.user, i)) continue;
          if (i == t.item) target = s.size();
          s.push_back(pred[t.user][i]);
          tie.push_back(static_cast<std::uint32_t>(s.size()));
        }
        if (s.size() < 2) continue;
        const std::size_t rank = oracle::rank_by_sort(s, target, tie);
        hr += oracle::hr(rank, o.ks[j]);
        nd += oracle::ndcg(rank, o.ks[j]);
        ++n;
      }
      if (n != r.instances) return {false, "instance count differs from oracle"};
      if (n == 0) continue;
      note(r.hr[j], static_cast<double>(hr / n));
      note(r.ndcg[j], static_cast<double>(nd / n));
    }
  }
  return {worst <= 1e-12, std::to_string(instances) + " instances, " + std::to_string(comparisons) +
                              " comparisons, max abs diff " + fmt("%.2e", worst)};
}

// ---------------------------------------------------------------- 3

std::vector<double> read_bias(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in)["v_B"].get<std::vector<double>>();
}

Outcome debias_properties(const fs::path& root) {
  cli::CommandOptions s;
  s.out_dir = root / "data";
  s.synth.users = 600;
  s.synth.nonsensitive_items = 120;
  s.synth.interactions_per_user = 15;
  std::ostringstream log;
  if (cli::run_command("synth", s, log) != 0) return {false, log.str()};
  const fs::path cfg = root / "config.json";
  std::ofstream(cfg) << R"({"dim": 8, "widths": [16, 8], "pretrain_epochs": 3,
                           "pretrain_batch": 256, "ks": [5, 10]})";
  double worst_dot = 0.0, worst_gap = 0.0;
  const auto loaded = data::load_directory(s.out_dir);
  for (const char* model : {"ncf", "mf"}) {
    const fs::path mcfg = root / (std::string(model) + ".json");
    std::ofstream(mcfg) << R"({"dim": 8, "widths": [16, 8], "pretrain_epochs": 3, "pretrain_batch": 256,
                              "ks": [5, 10], "model": ")"
                        << model << "\"}";
    cli::CommandOptions p;
    p.config = mcfg;
    p.data_dir = s.out_dir;
    p.out_dir = root / model / "pre";
    if (cli::run_command("pretrain", p, log) != 0) return {false, log.str()};
    cli::CommandOptions d = p;
    d.out_dir = root / model / "debiased";
    d.checkpoint = p.out_dir / "pretrained.ckpt";
    if (cli::run_command("debias", d, log) != 0) return {false, log.str()};
    const auto m = models::load_checkpoint(d.out_dir / "debiased.ckpt");
    const Matrix& users = training::user_table(m);
    const auto v = read_bias(d.out_dir / "bias_vector.json");
    for (std::size_t r = 0; r < users.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < users.cols(); ++c) dot += users(r, c) * v[c];
      worst_dot = std::max(worst_dot, std::abs(dot));
    }
    const auto f = fairness::group_mean(users, loaded.catalog, Gender::kFemale);
    const auto mm = fairness::group_mean(users, loaded.catalog, Gender::kMale);
    double gap = 0.0;
    for (std::size_t c = 0; c < v.size(); ++c) gap += (f[c] - mm[c]) * v[c];
    worst_gap = std::max(worst_gap, std::abs(gap));
  }
  const bool ok = worst_dot <= 1e-9 && worst_gap <= 1e-9;
  return {ok, "NCF and MF checkpoints: max |p'.v_B| " + fmt("%.2e", worst_dot) +
                  ", gender-gap v_B component " + fmt("%.2e", worst_gap)};
}

// ---------------------------------------------------------------- 7

bool same_params(const models::StoredModel& a, const models::StoredModel& b) {
  return std::visit(
      [&](const auto& pa) {
        using T = std::decay_t<decltype(pa)>;
        const auto xa = models::parameters(pa);
        const auto xb = models::parameters(std::get<T>(b.model));
        if (xa.size() != xb.size()) return false;
        for (std::size_t k = 0; k < xa.size(); ++k) {
          if (!(xa[k]->value == xb[k]->value)) return false;
        }
        return true;
      },
      a.model);
}

Outcome lambda_zero_identity() {
  data::SynthSpec s;
  s.users = 600;
  s.nonsensitive_items = 120;
  s.interactions_per_user = 15;
  TrainConfig c;
  c.dim = 8;
  c.widths = {16, 8};
  c.pretrain_epochs = 4;
  c.pretrain_batch = 256;
  c.finetune_epochs = 5;
  c.finetune_batch = 64;
  c.ks = {5, 10};
  const auto exp = training::prepare_experiment(data::synthesize(s), c);
  std::string detail;
  bool ok = true;
  for (auto model : {training::ModelKind::kNcf, training::ModelKind::kMf}) {
    TrainConfig nf = c;
    nf.model = model;
    nf.variant = training::Variant::kNfcf;
    nf.lambda = 0.0;
    nf.use_debias = false;
    TrainConfig typ = nf;
    typ.variant = training::Variant::kTypical;
    const auto a = training::run_variant(exp, nf);
    const auto b = training::run_variant(exp, typ);
    bool same = same_params(a.model, b.model) && a.curve.size() == b.curve.size() &&
                a.test.ranking.hr == b.test.ranking.hr && a.test.ranking.ndcg == b.test.ranking.ndcg &&
                a.test.fairness->epsilon_mean == b.test.fairness->epsilon_mean;
    for (std::size_t e = 0; same && e < a.curve.size(); ++e) same = a.curve[e].loss == b.curve[e].loss;
    ok = ok && same;
    detail += training::to_string(model) + (same ? " identical" : " DIFFERENT") + "; ";
  }
  return {ok, detail + "parameters, loss curves and test metrics compared bitwise"};
}

// ---------------------------------------------------------------- 8

Outcome synthetic_comparison() {
  data::SynthSpec s;
  s.users = 4000;  // planted concordance 0.9: 90% of careers follow the gender tag
  TrainConfig c;
  c.dim = 16;
  c.widths = {32, 16, 8};
  c.pretrain_epochs = 10;
  c.pretrain_batch = 256;
  c.finetune_epochs = 20;
  c.finetune_batch = 64;
  c.ks = {5, 10};
  const auto exp = training::prepare_experiment(data::synthesize(s), c);

  // Lambda picked on dev only, then NFCF retrained with it on the same
  // pretrained model.
  const auto pre = training::pretrain(exp, c).model;
  const std::vector<double> grid = {0.1, 0.3, 1.0, 3.0};
  const auto choice = training::tune_lambda(exp, c, pre, grid);
  c.lambda = choice.lambda;
  const auto nfcf = training::run_variant(exp, c, &pre);
  // Trained on the combined vocabulary from scratch; given the same epoch
  // budget as both NFCF stages together and no early cut.
  TrainConfig np = c;
  np.variant = training::Variant::kTypical;
  np.use_pretrain = false;
  np.pretrain_epochs = 40;
  np.patience = 40;
  const auto nopre = training::run_variant(exp, np);
  if (!nfcf.test.fairness || !nopre.test.fairness) return {false, "fairness undefined on test"};
  const double e_n = nfcf.test.fairness->epsilon_mean, e_b = nopre.test.fairness->epsilon_mean;
  const double h_n = nfcf.test.ranking.hr_at(10), h_b = nopre.test.ranking.hr_at(10);
  const double eps_cut = 1.0 - e_n / e_b;
  const double hr_loss = (h_b - h_n) / h_b;
  const bool ok = eps_cut >= 0.5 && hr_loss <= 0.05;
  return {ok, fmt("lambda %.1f (dev); ", choice.lambda) +
                  fmt("eps_mean NFCF %.4f vs NCF w/o pre-train %.4f (%.0f%% lower)", e_n, e_b,
                  100 * eps_cut) +
                  fmt("; HR@10 %.4f vs %.4f (%.1f%% relative loss)", h_n, h_b, 100 * hr_loss)};
}

// ---------------------------------------------------------------- 4-6

struct MlRun {
  double hr5 = 0, ndcg5 = 0, eps = 0, uabs = 0;
};

MlRun ml_run(const training::Experiment& exp, const TrainConfig& c,
             const models::StoredModel* pre = nullptr) {
  const auto a = training::run_variant(exp, c, pre);
  MlRun r{a.test.ranking.hr_at(5), a.test.ranking.ndcg_at(5), NAN, NAN};
  if (a.test.fairness) {
    r.eps = a.test.fairness->epsilon_mean;
    r.uabs = a.test.fairness->u_abs;
  }
  return r;
}

int movielens(const fs::path& dir) {
  TrainConfig c;  // paper settings
  c.ks = {5, 10};
  const auto exp = training::load_experiment(dir, c);
  std::optional<models::StoredModel> ncf_pre, mf_pre;

  report(4, "MovieLens pre-training HR@10 / NDCG@10", [&]() -> Outcome {
    auto st = training::pretrain(exp, c);
    const auto r = training::evaluate_nonsensitive(st.model, exp, c);
    ncf_pre = std::move(st.model);
    const double hr = r.hr_at(10), nd = r.ndcg_at(10);
    return {std::abs(hr - 0.543) <= 0.03 && std::abs(nd - 0.306) <= 0.03,
            fmt("HR@10 %.4f (target 0.543), NDCG@10 %.4f (target 0.306)", hr, nd)};
  });
  if (!ncf_pre) return 1;

  MlRun nfcf, nopre, withpre;
  report(5, "MovieLens NFCF row and orderings", [&]() -> Outcome {
    const std::vector<double> grid = {0.01, 0.03, 0.1, 0.3, 1.0};
    c.lambda = training::tune_lambda(exp, c, *ncf_pre, grid).lambda;
    nfcf = ml_run(exp, c, &*ncf_pre);
    TrainConfig np = c;
    np.variant = training::Variant::kTypical;
    np.use_pretrain = false;
    nopre = ml_run(exp, np);
    TrainConfig wp = c;
    wp.variant = training::Variant::kTypical;
    withpre = ml_run(exp, wp, &*ncf_pre);
    const bool row = std::abs(nfcf.hr5 - 0.670) <= 0.05 && std::abs(nfcf.ndcg5 - 0.480) <= 0.05 &&
                     std::abs(nfcf.eps - 0.083) <= 0.05 && std::abs(nfcf.uabs - 0.009) <= 0.01;
    const bool order = nfcf.eps < nopre.eps && std::abs(nfcf.hr5 - withpre.hr5) <= 0.02;
    return {row && order,
            fmt("NFCF HR@5 %.4f NDCG@5 %.4f eps %.4f U_abs %.4f", nfcf.hr5, nfcf.ndcg5, nfcf.eps,
                nfcf.uabs) +
                fmt("; NCF w/o pre eps %.4f; NCF w/ pre HR@5 %.4f", nopre.eps, withpre.hr5)};
  });

  report(6, "MovieLens ablation directions", [&]() -> Outcome {
    TrainConfig no_pre = c;
    no_pre.use_pretrain = false;
    const MlRun a = ml_run(exp, no_pre);
    TrainConfig no_pen = c;
    no_pen.lambda = 0.0;
    const MlRun b = ml_run(exp, no_pen, &*ncf_pre);
    TrainConfig mf = c;
    mf.model = training::ModelKind::kMf;
    const MlRun m = ml_run(exp, mf);
    const bool ok = nfcf.hr5 - a.hr5 >= 0.1 && b.eps > nfcf.eps && m.hr5 < nfcf.hr5;
    return {ok, fmt("w/o pre-train HR@5 %.4f; w/o penalty eps %.4f; MF HR@5 %.4f", a.hr5, b.eps,
                    m.hr5) +
                    fmt(" (NFCF HR@5 %.4f eps %.4f)", nfcf.hr5, nfcf.eps)};
  });
  return failures ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string group = argc > 1 ? argv[1] : "core";
  if (group == "movielens") {
    const char* env = std::getenv("NFCF_MOVIELENS_DIR");
    const fs::path dir = env ? env : (argc > 2 ? argv[2] : "data/ml-1m");
    if (!fs::exists(dir / "ratings.dat") || !fs::exists(dir / "users.dat")) {
      for (int id : {4, 5, 6}) {
        std::printf("[SKIP] criterion %d: MovieLens-1M not found at %s\n", id, dir.string().c_str());
      }
      return 77;
    }
    return movielens(dir);
  }
  if (group != "core") {
    std::fprintf(stderr, "usage: acceptance [core|movielens [dir]]\n");
    return 2;
  }
  const fs::path root = testing::scratch_dir("acceptance");
  report(1, "finite-difference gradients of the loss and penalized loss", gradients);
  report(2, "metric oracles", metric_oracles);
  report(3, "debias properties after the debias command", [&] { return debias_properties(root); });
  report(7, "lambda 0 without debiasing equals NCF with pre-training", lambda_zero_identity);
  report(8, "synthetic planted-bias comparison", synthetic_comparison);
  return failures ? 1 : 0;
}
