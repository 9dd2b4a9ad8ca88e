#include <cmath>

#include "doctest.h"
#include "nfcf/errors.hpp"
#include "nfcf/synth.hpp"
#include "nfcf/training.hpp"
#include "support.hpp"

using namespace nfcf::training;
using nfcf::data::Gender;
using nfcf::data::ItemClass;
using nfcf::diff::Matrix;
using nfcf::diff::Tape;
using nfcf::diff::Var;
using nfcf::models::NcfParams;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.dim = 4;
  c.widths = {8, 4};
  c.pretrain_epochs = 3;
  c.pretrain_batch = 128;
  c.finetune_epochs = 3;
  c.finetune_batch = 32;
  c.classifier_epochs = 3;
  c.ks = {3, 5};
  c.early_stop_k = 5;
  c.min_item_count = 1;
  return c;
}

Experiment small_experiment(const TrainConfig& cfg) {
  nfcf::data::SynthSpec s;
  s.users = 120;
  s.clusters = 3;
  s.nonsensitive_items = 45;
  s.sensitive_per_group = 2;
  s.interactions_per_user = 8;
  return prepare_experiment(nfcf::data::synthesize(s), cfg);
}

// 4 users x 4 items in two blocks, one career per user.
Experiment block_experiment(const TrainConfig& cfg) {
  nfcf::data::DatasetBuilder b;
  std::vector<Gender> g;
  for (int u = 0; u < 4; ++u) {
    const std::string uid = "u" + std::to_string(u);
    for (int i = 0; i < 2; ++i) {
      b.add_pair(uid, ItemClass::kNonSensitive, "i" + std::to_string((u / 2) * 2 + i));
    }
    b.add_pair(uid, ItemClass::kSensitive, u % 2 ? "s1" : "s0");
    g.push_back(u % 2 ? Gender::kFemale : Gender::kMale);
  }
  return prepare_experiment({std::move(b).build(), nfcf::data::UserCatalog(g), {}}, cfg);
}

bool same_params(const StoredModel& a, const StoredModel& b) {
  return std::visit(
      [&](const auto& pa) {
        using T = std::decay_t<decltype(pa)>;
        const auto& pb = std::get<T>(b.model);
        const auto xa = nfcf::models::parameters(pa);
        const auto xb = nfcf::models::parameters(pb);
        if (xa.size() != xb.size()) return false;
        for (std::size_t k = 0; k < xa.size(); ++k) {
          if (!(xa[k]->value == xb[k]->value)) return false;
        }
        return true;
      },
      a.model);
}

}  // namespace

TEST_CASE("bce loss") {
  Tape t;
  const std::vector<double> one{1.0};
  CHECK(t.value(bce_loss(t, t.constant(Matrix::scalar(0.5)), one, true))[0] ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(t.value(bce_loss(t, t.constant(Matrix::scalar(1.0 - 1e-10)), one, true))[0] < 1e-9);
  const std::vector<double> zero{0.0};
  for (double p : {0.1, 0.37, 0.8}) {
    CHECK(t.value(bce_loss(t, t.constant(Matrix::scalar(p)), zero, true))[0] ==
          doctest::Approx(t.value(bce_loss(t, t.constant(Matrix::scalar(1 - p)), one, true))[0])
              .epsilon(1e-12));
  }
  std::size_t clamped = 0;
  const Var v = bce_loss(t, t.constant(Matrix(2, 1, std::vector<double>{0.0, 0.5})),
                         std::vector<double>{1.0, 1.0}, false, &clamped);
  CHECK(clamped == 1);
  CHECK(std::isfinite(t.value(v)[0]));
  CHECK_THROWS_AS(bce_loss(t, t.constant(Matrix(2, 1)), one, true), nfcf::ContractError);
}

TEST_CASE("config validation enumerates every problem") {
  TrainConfig c;
  c.lambda = -1;
  c.alpha = 0;
  c.widths = {100, 10};
  c.eval_candidates = 3;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const nfcf::ConfigError& e) {
    const std::string m = e.what();
    for (const char* key : {"lambda", "alpha", "widths[0]", "eval_candidates"}) {
      INFO(key);
      CHECK(m.find(key) != std::string::npos);
    }
  }
  CHECK_THROWS_AS(TrainConfig::from_json({{"lamda", 0.1}}), nfcf::ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"split", {{"sead", 1}}}}), nfcf::ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"variant", "nope"}}), nfcf::ConfigError);
  const TrainConfig back = TrainConfig::from_json(small_config().to_json());
  CHECK(back.to_json() == small_config().to_json());
  CHECK(parse_variant("nfcf_embd") == Variant::kNfcfEmbd);
  CHECK(derive_seed(1, "pretrain") != derive_seed(1, "finetune"));
  CHECK(derive_seed(1, "pretrain") != derive_seed(2, "pretrain"));
}

TEST_CASE("training loss decreases on a block dataset") {
  TrainConfig c = small_config();
  c.dim = 2;
  c.widths = {4, 2};
  c.split.test_nonsensitive = 0;
  c.split.dev_nonsensitive = 0;
  c.pretrain_epochs = 10;
  c.pretrain_lr = 0.01;
  c.embedding_std = 0.5;
  const Experiment exp = block_experiment(c);
  const auto r = pretrain(exp, c);
  REQUIRE(r.curve.size() == 10);
  for (std::size_t e = 1; e < r.curve.size(); ++e) {
    INFO("epoch " << e + 1);
    CHECK(r.curve[e].loss < r.curve[e - 1].loss);
  }
}

TEST_CASE("zero epochs return the initial parameters") {
  TrainConfig c = small_config();
  c.pretrain_epochs = 0;
  const Experiment exp = small_experiment(c);
  const auto r = pretrain(exp, c);
  const NcfParams init =
      nfcf::models::init_ncf(exp.ds.num_users(), exp.num_items(ItemClass::kNonSensitive), c.dim,
                             c.widths, derive_seed(c.seed, "pretrain-init"), {c.embedding_std});
  CHECK(same_params(r.model, StoredModel{init}));

  c.pretrain_epochs = 2;
  auto pre = pretrain(exp, c).model;
  c.finetune_epochs = 0;
  const auto ft = finetune(pre, exp, c, true);
  const auto& a = std::get<NcfParams>(pre.model);
  const auto& b = std::get<NcfParams>(ft.model.model);
  CHECK(b.layers[0].weight.value == a.layers[0].weight.value);
  CHECK(b.output.value == a.output.value);
}

TEST_CASE("fine-tuning keeps users frozen and lambda 0 matches no penalty") {
  for (ModelKind kind : {ModelKind::kNcf, ModelKind::kMf}) {
    TrainConfig c = small_config();
    c.model = kind;
    const Experiment exp = small_experiment(c);
    StoredModel pre = pretrain(exp, c).model;
    debias_model(pre, exp.catalog);
    const Matrix before = user_table(pre);
    const auto with = finetune(pre, exp, c, true);
    CHECK(user_table(with.model) == before);
    CHECK(user_table(pre) == before);

    c.lambda = 0.0;
    const auto zero = finetune(pre, exp, c, true);
    const auto none = finetune(pre, exp, c, false);
    CHECK(same_params(zero.model, none.model));
    REQUIRE(zero.curve.size() == none.curve.size());
    for (std::size_t e = 0; e < zero.curve.size(); ++e) {
      CHECK(zero.curve[e].loss == none.curve[e].loss);
    }
  }
}

TEST_CASE("debias_model projects the user table") {
  TrainConfig c = small_config();
  const Experiment exp = small_experiment(c);
  StoredModel pre = pretrain(exp, c).model;
  const auto v = debias_model(pre, exp.catalog);
  const Matrix& t = user_table(pre);
  double worst = 0.0;
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double d = 0.0;
    for (std::size_t k = 0; k < t.cols(); ++k) d += t(r, k) * v.v[k];
    worst = std::max(worst, std::abs(d));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("every variant runs and is reproducible") {
  for (const char* name : {"nfcf", "nfcf_embd", "typical", "resampling", "mf_uabs",
                           "projection_cf", "dnn_classifier"}) {
    INFO(name);
    TrainConfig c = small_config();
    c.variant = parse_variant(name);
    if (c.variant == Variant::kMfUabs) c.model = ModelKind::kMf;
    const Experiment exp = small_experiment(c);
    const auto a = run_variant(exp, c);
    CHECK(a.test.ranking.instances > 0);
    for (double h : a.test.ranking.hr) CHECK(std::isfinite(h));
    REQUIRE(a.test.fairness.has_value());
    CHECK(std::isfinite(a.test.fairness->epsilon_mean));
    CHECK(a.manifest.contains("config"));
    const auto b = run_variant(exp, c);
    CHECK(same_params(a.model, b.model));
    CHECK(a.test.ranking.hr == b.test.ranking.hr);
    CHECK(a.test.fairness->epsilon_mean == b.test.fairness->epsilon_mean);
  }
}

TEST_CASE("ablation switches") {
  TrainConfig c = small_config();
  const Experiment exp = small_experiment(c);
  c.use_debias = false;
  const auto nodebias = run_variant(exp, c);
  CHECK_FALSE(nodebias.bias.has_value());
  REQUIRE(nodebias.pretrained.has_value());
  CHECK(user_table(nodebias.model) == user_table(*nodebias.pretrained));

  c.use_debias = true;
  const auto full = run_variant(exp, c);
  CHECK(full.bias.has_value());

  c.use_pretrain = false;
  const auto scratch = run_variant(exp, c);
  CHECK_FALSE(scratch.pretrained.has_value());

  c.use_pretrain = true;
  c.model = ModelKind::kMf;
  const auto mf = run_variant(exp, c);
  CHECK(nfcf::models::kind_name(mf.model.model) == "mf");
}

TEST_CASE("lambda tuning respects the dev accuracy budget") {
  TrainConfig c = small_config();
  const Experiment exp = small_experiment(c);
  const StoredModel pre = pretrain(exp, c).model;
  const std::vector<double> grid = {0.1, 1.0, 10.0};
  const auto a = tune_lambda(exp, c, pre, grid, 0.02);
  REQUIRE(a.trials.size() == 4);
  CHECK(a.trials[0].lambda == 0.0);
  CHECK(a.reference_hr == a.trials[0].dev_hr);
  bool found = false;
  for (const auto& t : a.trials) {
    if (t.lambda != a.lambda) continue;
    found = true;
    CHECK(t.dev_hr + 0.02 >= a.reference_hr);
    for (const auto& o : a.trials) {
      if (o.dev_hr + 0.02 >= a.reference_hr && std::isfinite(o.dev_epsilon)) {
        CHECK(t.dev_epsilon <= o.dev_epsilon);
      }
    }
  }
  CHECK(found);
  const auto b = tune_lambda(exp, c, pre, grid, 0.02);
  CHECK(b.lambda == a.lambda);
  CHECK_THROWS_AS(tune_lambda(exp, c, pre, std::span<const double>{}), nfcf::ContractError);
}
