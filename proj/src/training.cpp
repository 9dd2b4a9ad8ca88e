#include "nfcf/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>

#include "nfcf/adam.hpp"
#include "nfcf/errors.hpp"
#include "nfcf/transforms.hpp"

namespace nfcf::training {

using data::Gender;
using diff::Matrix;
using diff::Tape;
using diff::Var;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string penalty_scope_name(fairness::PenaltyInstances p) {
  return p == fairness::PenaltyInstances::kAll ? "all" : "positives";
}

}  // namespace

std::string to_string(ModelKind k) { return k == ModelKind::kMf ? "mf" : "ncf"; }

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kNfcf:
      return "nfcf";
    case Variant::kNfcfEmbd:
      return "nfcf_embd";
    case Variant::kTypical:
      return "typical";
    case Variant::kResampling:
      return "resampling";
    case Variant::kMfUabs:
      return "mf_uabs";
    case Variant::kProjectionCf:
      return "projection_cf";
    case Variant::kDnnClassifier:
      return "dnn_classifier";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& s) {
  if (s == "ncf") return ModelKind::kNcf;
  if (s == "mf") return ModelKind::kMf;
  throw ConfigError("unknown model kind '" + s + "' (expected ncf or mf)");
}

Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::kNfcf, Variant::kNfcfEmbd, Variant::kTypical, Variant::kResampling,
                    Variant::kMfUabs, Variant::kProjectionCf, Variant::kDnnClassifier}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown variant '" + s +
                    "' (expected nfcf, nfcf_embd, typical, resampling, mf_uabs, projection_cf "
                    "or dnn_classifier)");
}

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  std::vector<std::string> errs;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) errs.push_back(msg);
  };
  need(lambda >= 0.0, "lambda must be >= 0");
  need(epsilon0 >= 0.0, "epsilon0 must be >= 0");
  need(alpha > 0.0, "alpha must be > 0");
  need(huber_delta > 0.0, "huber_delta must be > 0");
  need(negatives >= 1, "negatives must be >= 1");
  need(pretrain_batch >= 1 && finetune_batch >= 1 && classifier_batch >= 1,
       "batch sizes must be >= 1");
  need(pretrain_lr > 0.0 && finetune_lr > 0.0 && classifier_lr > 0.0, "learning rates must be > 0");
  need(dim >= 1, "dim must be >= 1");
  need(embedding_std > 0.0, "embedding_std must be > 0");
  need(!ks.empty(), "ks must not be empty");
  for (std::size_t k : ks) need(k >= 1, "every K must be >= 1");
  need(early_stop_k >= 1, "early_stop_k must be >= 1");
  need(min_item_count >= 1, "min_item_count must be >= 1");
  std::size_t max_k = early_stop_k;
  for (std::size_t k : ks) max_k = std::max(max_k, k);
  need(eval_candidates >= max_k, "eval_candidates must be >= the largest K");
  if (model == ModelKind::kNcf || variant == Variant::kProjectionCf) {
    if (widths.size() < 2) {
      errs.push_back("widths needs an input width and at least one hidden layer");
    } else {
      need(widths[0] == 2 * dim, "widths[0] must equal 2 * dim");
      bool decreasing = true;
      for (std::size_t l = 1; l < widths.size(); ++l) {
        decreasing = decreasing && widths[l] > 0 && widths[l] < widths[l - 1];
      }
      need(decreasing, "widths must be strictly decreasing and positive");
    }
  }
  if (variant == Variant::kMfUabs) need(model == ModelKind::kMf, "mf_uabs requires model = mf");
  if (variant == Variant::kProjectionCf) {
    need(model == ModelKind::kNcf, "projection_cf requires model = ncf");
  }
  for (std::size_t w : classifier_hidden) need(w >= 1, "classifier_hidden widths must be >= 1");
  try {
    split.validate();
  } catch (const ConfigError& e) {
    errs.push_back(e.what());
  }
  if (!errs.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
}

json TrainConfig::to_json() const {
  return {{"variant", to_string(variant)},
          {"model", to_string(model)},
          {"use_pretrain", use_pretrain},
          {"use_debias", use_debias},
          {"dim", dim},
          {"widths", widths},
          {"embedding_std", embedding_std},
          {"transfer_output", transfer_output},
          {"pretrain_epochs", pretrain_epochs},
          {"pretrain_batch", pretrain_batch},
          {"pretrain_lr", pretrain_lr},
          {"patience", patience},
          {"finetune_epochs", finetune_epochs},
          {"finetune_batch", finetune_batch},
          {"finetune_lr", finetune_lr},
          {"finetune_select_best", finetune_select_best},
          {"negatives", negatives},
          {"mean_reduction", mean_reduction},
          {"lambda", lambda},
          {"epsilon0", epsilon0},
          {"alpha", alpha},
          {"penalty_instances", penalty_scope_name(penalty_instances)},
          {"huber_delta", huber_delta},
          {"classifier_hidden", classifier_hidden},
          {"classifier_epochs", classifier_epochs},
          {"classifier_batch", classifier_batch},
          {"classifier_lr", classifier_lr},
          {"ks", ks},
          {"early_stop_k", early_stop_k},
          {"eval_candidates", eval_candidates},
          {"min_item_count", min_item_count},
          {"split",
           {{"test_nonsensitive", split.test_nonsensitive},
            {"test_sensitive", split.test_sensitive},
            {"dev_nonsensitive", split.dev_nonsensitive},
            {"dev_sensitive", split.dev_sensitive},
            {"stratify_sensitive_by_gender", split.stratify_sensitive_by_gender},
            {"seed", split.seed}}},
          {"seed", seed},
          {"verbose", verbose}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  TrainConfig c;
  std::vector<std::string> errs;
  using Setter = std::function<void(const json&)>;
  const std::vector<std::pair<std::string, Setter>> setters = {
      {"variant", [&](const json& v) { c.variant = parse_variant(v.get<std::string>()); }},
      {"model", [&](const json& v) { c.model = parse_model_kind(v.get<std::string>()); }},
      {"use_pretrain", [&](const json& v) { c.use_pretrain = v.get<bool>(); }},
      {"use_debias", [&](const json& v) { c.use_debias = v.get<bool>(); }},
      {"dim", [&](const json& v) { c.dim = v.get<std::size_t>(); }},
      {"widths", [&](const json& v) { c.widths = v.get<std::vector<std::size_t>>(); }},
      {"embedding_std", [&](const json& v) { c.embedding_std = v.get<double>(); }},
      {"transfer_output", [&](const json& v) { c.transfer_output = v.get<bool>(); }},
      {"pretrain_epochs", [&](const json& v) { c.pretrain_epochs = v.get<std::size_t>(); }},
      {"pretrain_batch", [&](const json& v) { c.pretrain_batch = v.get<std::size_t>(); }},
      {"pretrain_lr", [&](const json& v) { c.pretrain_lr = v.get<double>(); }},
      {"patience", [&](const json& v) { c.patience = v.get<std::size_t>(); }},
      {"finetune_epochs", [&](const json& v) { c.finetune_epochs = v.get<std::size_t>(); }},
      {"finetune_batch", [&](const json& v) { c.finetune_batch = v.get<std::size_t>(); }},
      {"finetune_lr", [&](const json& v) { c.finetune_lr = v.get<double>(); }},
      {"finetune_select_best", [&](const json& v) { c.finetune_select_best = v.get<bool>(); }},
      {"negatives", [&](const json& v) { c.negatives = v.get<std::size_t>(); }},
      {"mean_reduction", [&](const json& v) { c.mean_reduction = v.get<bool>(); }},
      {"lambda", [&](const json& v) { c.lambda = v.get<double>(); }},
      {"epsilon0", [&](const json& v) { c.epsilon0 = v.get<double>(); }},
      {"alpha", [&](const json& v) { c.alpha = v.get<double>(); }},
      {"penalty_instances",
       [&](const json& v) {
         const auto s = v.get<std::string>();
         if (s == "positives") {
           c.penalty_instances = fairness::PenaltyInstances::kPositives;
         } else if (s == "all") {
           c.penalty_instances = fairness::PenaltyInstances::kAll;
         } else {
           throw ConfigError("penalty_instances must be positives or all");
         }
       }},
      {"huber_delta", [&](const json& v) { c.huber_delta = v.get<double>(); }},
      {"classifier_hidden",
       [&](const json& v) { c.classifier_hidden = v.get<std::vector<std::size_t>>(); }},
      {"classifier_epochs", [&](const json& v) { c.classifier_epochs = v.get<std::size_t>(); }},
      {"classifier_batch", [&](const json& v) { c.classifier_batch = v.get<std::size_t>(); }},
      {"classifier_lr", [&](const json& v) { c.classifier_lr = v.get<double>(); }},
      {"ks", [&](const json& v) { c.ks = v.get<std::vector<std::size_t>>(); }},
      {"early_stop_k", [&](const json& v) { c.early_stop_k = v.get<std::size_t>(); }},
      {"eval_candidates", [&](const json& v) { c.eval_candidates = v.get<std::size_t>(); }},
      {"min_item_count", [&](const json& v) { c.min_item_count = v.get<std::size_t>(); }},
      {"split",
       [&](const json& v) {
         for (const auto& [k, x] : v.items()) {
           if (k == "test_nonsensitive") {
             c.split.test_nonsensitive = x.get<double>();
           } else if (k == "test_sensitive") {
             c.split.test_sensitive = x.get<double>();
           } else if (k == "dev_nonsensitive") {
             c.split.dev_nonsensitive = x.get<double>();
           } else if (k == "dev_sensitive") {
             c.split.dev_sensitive = x.get<double>();
           } else if (k == "stratify_sensitive_by_gender") {
             c.split.stratify_sensitive_by_gender = x.get<bool>();
           } else if (k == "seed") {
             c.split.seed = x.get<std::uint64_t>();
           } else {
             throw ConfigError("unknown key split." + k);
           }
         }
       }},
      {"seed", [&](const json& v) { c.seed = v.get<std::uint64_t>(); }},
      {"verbose", [&](const json& v) { c.verbose = v.get<bool>(); }},
  };
  for (const auto& [key, value] : j.items()) {
    auto it = std::find_if(setters.begin(), setters.end(),
                           [&key](const auto& s) { return s.first == key; });
    if (it == setters.end()) {
      errs.push_back("unknown key '" + key + "'");
      continue;
    }
    try {
      it->second(value);
    } catch (const json::exception& e) {
      errs.push_back("key '" + key + "': " + e.what());
    } catch (const ConfigError& e) {
      errs.push_back("key '" + key + "': " + e.what());
    }
  }
  if (!errs.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return TrainConfig::from_json(j);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 1469598103934665603ull;
  for (char ch : tag) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ull;
  }
  // splitmix64 finalizer
  std::uint64_t z = seed ^ h;
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------- data

std::vector<std::uint32_t> Experiment::users_in(ItemClass c, Part p) const {
  std::vector<std::uint32_t> out;
  for (const auto& pr : pairs(c, p)) out.push_back(pr.user);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

namespace {

Experiment assemble(data::InteractionDataset ds, data::UserCatalog catalog, data::LoadStats stats,
                    data::DataSplit split) {
  Experiment e;
  e.ds = std::move(ds);
  e.catalog = std::move(catalog);
  e.split = std::move(split);
  e.stats = stats;
  for (ItemClass c : data::kItemClasses) {
    const std::size_t n = e.ds.pairs(c).size();
    const auto& part = e.split.of(c);
    std::size_t covered = part.train.size() + part.dev.size() + part.test.size();
    if (covered != n) {
      throw ContractError("split covers " + std::to_string(covered) + " of " + std::to_string(n) +
                          " " + std::string(data::to_string(c)) + " pairs");
    }
    for (Part p : {Part::kTrain, Part::kDev, Part::kTest}) {
      e.parts[data::class_slot(c)][static_cast<std::size_t>(p)] = e.split.pairs(e.ds, c, p);
    }
    e.all_index[data::class_slot(c)] =
        std::make_shared<data::UserItemIndex>(e.ds.num_users(), e.ds.pairs(c));
    e.train_index[data::class_slot(c)] =
        std::make_shared<data::UserItemIndex>(e.ds.num_users(), e.pairs(c, Part::kTrain));
  }
  return e;
}

data::InteractionDataset preprocessed(const data::LoadedData& loaded, const TrainConfig& cfg,
                                      bool is_movielens) {
  return data::preprocess(loaded.dataset, cfg.min_item_count,
                          is_movielens ? data::movielens_excluded_occupations()
                                       : std::vector<std::string>{});
}

}  // namespace

Experiment prepare_experiment(data::LoadedData loaded, const TrainConfig& cfg, bool is_movielens) {
  auto ds = preprocessed(loaded, cfg, is_movielens);
  auto split = data::split(ds, loaded.catalog, cfg.split);
  return assemble(std::move(ds), std::move(loaded.catalog), loaded.stats, std::move(split));
}

Experiment prepare_experiment(data::LoadedData loaded, const TrainConfig& cfg, bool is_movielens,
                              const data::DataSplit& split) {
  auto ds = preprocessed(loaded, cfg, is_movielens);
  return assemble(std::move(ds), std::move(loaded.catalog), loaded.stats, split);
}

Experiment load_experiment(const std::filesystem::path& dir, const TrainConfig& cfg) {
  const bool ml = data::detect_format(dir) == data::DataFormat::kMovieLens;
  return prepare_experiment(data::load_directory(dir), cfg, ml);
}

// ---------------------------------------------------------------- loss

Var bce_loss(Tape& tape, Var probs, std::span<const double> labels, bool mean,
             std::size_t* clamped) {
  const Matrix& p = tape.value(probs);
  if (p.cols() != 1 || p.rows() != labels.size()) {
    throw ContractError("bce_loss: " + p.shape_string() + " probabilities vs " +
                        std::to_string(labels.size()) + " labels");
  }
  constexpr double kLo = 1e-12, kHi = 1.0 - 1e-12;
  const double scale = mean && p.rows() ? 1.0 / static_cast<double>(p.rows()) : 1.0;
  Matrix local(p.rows(), 1);
  double total = 0.0;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double q = p[r];
    const double y = labels[r];
    const bool clip = !(q >= kLo && q <= kHi);
    if (clip) {
      if (clamped) ++*clamped;
      q = std::isnan(q) ? q : std::clamp(q, kLo, kHi);
    } else {
      local[r] = -scale * (y / q - (1.0 - y) / (1.0 - q));
    }
    total -= y * std::log(q) + (1.0 - y) * std::log1p(-q);
  }
  return tape.record({probs}, Matrix::scalar(total * scale),
                     [local = std::move(local)](const Matrix& g, std::span<Matrix* const> grads) {
                       if (!grads[0]) return;
                       for (std::size_t r = 0; r < local.rows(); ++r) (*grads[0])[r] += g[0] * local[r];
                     });
}

// ---------------------------------------------------------------- loop

namespace {

struct Block {
  std::uint32_t offset = 0;
  std::size_t num_items = 0;
  const data::UserItemIndex* positives = nullptr;
};

struct Positive {
  std::uint32_t user;
  std::uint32_t item;  // local to its block
  std::uint8_t block;
};

struct Batch {
  std::vector<std::uint32_t> users, items, local_items;
  std::vector<double> labels;
  std::vector<std::uint8_t> blocks;
};

struct DevMetrics {
  double hr = kNaN, ndcg = kNaN, epsilon = kNaN, u_abs = kNaN;
};

struct LoopOptions {
  std::string stage;
  std::size_t epochs = 0;
  std::size_t batch = 1;
  double lr = 0.001;
  std::size_t negatives = 1;
  bool mean = true;
  bool select_best = false;
  std::size_t patience = 0;  // 0 = never stop early
  double lambda = 0.0;
  bool verbose = false;
};

using PenaltyFn = std::function<Var(Tape&, Var, const Batch&)>;
using DevFn = std::function<DevMetrics()>;
using ForwardFn = std::function<Var(Tape&, std::span<const std::uint32_t>, std::span<const std::uint32_t>)>;

struct LoopResult {
  std::vector<EpochLog> curve;
  std::size_t best_epoch = 0;
  std::size_t clamped = 0;
};

LoopResult fit(std::vector<diff::Parameter*> params, const ForwardFn& forward,
               std::span<const Positive> positives, const std::vector<Block>& blocks,
               const LoopOptions& opt, data::Rng& rng, const PenaltyFn& penalty,
               const DevFn& dev) {
  LoopResult res;
  diff::Adam adam(params, {.lr = opt.lr});
  std::vector<Matrix> best;
  auto snapshot = [&] {
    best.clear();
    for (auto* p : params) best.push_back(p->value);
  };
  if (opt.select_best) snapshot();
  double best_score = -std::numeric_limits<double>::infinity();

  struct Row {
    std::uint32_t user, item;
    std::uint8_t block;
    std::uint8_t label;
  };
  std::vector<Row> rows;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    rows.clear();
    rows.reserve(positives.size() * (1 + opt.negatives));
    for (const auto& p : positives) {
      const Block& b = blocks[p.block];
      rows.push_back({p.user, p.item, p.block, 1});
      for (std::uint32_t n : data::sample_negatives(*b.positives, b.num_items, p.user, opt.negatives, rng)) {
        rows.push_back({p.user, n, p.block, 0});
      }
    }
    std::shuffle(rows.begin(), rows.end(), rng);

    double loss_sum = 0.0, pen_sum = 0.0;
    std::size_t nb = 0;
    Batch batch;
    for (std::size_t start = 0; start < rows.size(); start += opt.batch) {
      const std::size_t end = std::min(rows.size(), start + opt.batch);
      batch.users.clear();
      batch.items.clear();
      batch.local_items.clear();
      batch.labels.clear();
      batch.blocks.clear();
      for (std::size_t r = start; r < end; ++r) {
        batch.users.push_back(rows[r].user);
        batch.items.push_back(rows[r].item + blocks[rows[r].block].offset);
        batch.local_items.push_back(rows[r].item);
        batch.labels.push_back(rows[r].label);
        batch.blocks.push_back(rows[r].block);
      }
      Tape tape;
      const Var pred = forward(tape, batch.users, batch.items);
      Var loss = bce_loss(tape, pred, batch.labels, opt.mean, &res.clamped);
      const double bce = tape.value(loss)[0];
      if (penalty) {
        const Var pen = penalty(tape, pred, batch);
        pen_sum += tape.value(pen)[0];
        loss = tape.add(loss, tape.scale(pen, opt.lambda));
      }
      if (!std::isfinite(tape.value(loss)[0])) {
        throw DivergenceError(opt.stage + ": non-finite loss at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(nb + 1));
      }
      adam.step(tape.backward(loss));
      loss_sum += bce;
      ++nb;
    }

    EpochLog log;
    log.stage = opt.stage;
    log.epoch = epoch;
    log.loss = nb ? loss_sum / static_cast<double>(nb) : 0.0;
    log.penalty = penalty && nb ? pen_sum / static_cast<double>(nb) : 0.0;
    DevMetrics d;
    if (dev) d = dev();
    log.dev_hr = d.hr;
    log.dev_ndcg = d.ndcg;
    log.dev_epsilon = d.epsilon;
    log.dev_u_abs = d.u_abs;
    res.curve.push_back(log);
    if (opt.verbose) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "[%s] epoch %zu loss %.5f penalty %.5f dev hr %.4f ndcg %.4f (%.1fs)\n",
                   opt.stage.c_str(), epoch, log.loss, log.penalty, d.hr, d.ndcg, secs);
    }
    if (opt.select_best) {
      if (d.ndcg > best_score) {
        best_score = d.ndcg;
        res.best_epoch = epoch;
        snapshot();
      } else if (opt.patience && epoch - res.best_epoch >= opt.patience) {
        break;
      }
    } else {
      res.best_epoch = epoch;
    }
  }
  if (opt.select_best) {
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = best[k];
  }
  return res;
}

eval::EvalOptions eval_options(const TrainConfig& cfg, std::vector<std::size_t> ks) {
  eval::EvalOptions o;
  o.ks = std::move(ks);
  o.candidates = cfg.eval_candidates;
  o.seed = derive_seed(cfg.split.seed, "eval");
  return o;
}

Evaluation sensitive_eval(const models::Scorer& score, const Experiment& exp, const TrainConfig& cfg,
                          Part part, std::vector<std::size_t> ks) {
  Evaluation ev;
  const auto& pairs = exp.pairs(ItemClass::kSensitive, part);
  ev.ranking = eval::ranked_eval(score, pairs, *exp.all_index[1], exp.num_items(ItemClass::kSensitive),
                                 eval_options(cfg, std::move(ks)));
  try {
    const auto users = exp.users_in(ItemClass::kSensitive, part);
    ev.fairness = fairness::fairness_report(score, users, exp.catalog,
                                            exp.num_items(ItemClass::kSensitive), pairs, cfg.alpha);
  } catch (const ContractError& e) {
    ev.fairness_error = e.what();
  }
  return ev;
}

DevFn sensitive_dev(const models::Scorer& score, const Experiment& exp, const TrainConfig& cfg) {
  return [score, &exp, &cfg]() {
    DevMetrics d;
    if (exp.pairs(ItemClass::kSensitive, Part::kDev).empty()) return d;
    const auto ev = sensitive_eval(score, exp, cfg, Part::kDev, {cfg.early_stop_k});
    d.hr = ev.ranking.hr[0];
    d.ndcg = ev.ranking.ndcg[0];
    if (ev.fairness) {
      d.epsilon = ev.fairness->epsilon_mean;
      d.u_abs = ev.fairness->u_abs;
    }
    return d;
  };
}

std::vector<Gender> genders_of(const Experiment& exp, std::span<const std::uint32_t> users) {
  std::vector<Gender> g;
  g.reserve(users.size());
  for (std::uint32_t u : users) g.push_back(exp.catalog.gender(u));
  return g;
}

PenaltyFn df_penalty_fn(const Experiment& exp, const TrainConfig& cfg, std::uint8_t block) {
  return [&exp, &cfg, block](Tape& tape, Var pred, const Batch& b) {
    std::vector<std::uint8_t> include(b.users.size());
    for (std::size_t r = 0; r < include.size(); ++r) {
      include[r] = b.blocks[r] == block &&
                   (cfg.penalty_instances == fairness::PenaltyInstances::kAll || b.labels[r] > 0.5);
    }
    return fairness::df_penalty(tape, pred, genders_of(exp, b.users), b.local_items, include,
                                exp.num_items(ItemClass::kSensitive),
                                {.alpha = cfg.alpha, .epsilon0 = cfg.epsilon0});
  };
}

LoopOptions pretrain_options(const TrainConfig& cfg, std::string stage) {
  LoopOptions o;
  o.stage = std::move(stage);
  o.epochs = cfg.pretrain_epochs;
  o.batch = cfg.pretrain_batch;
  o.lr = cfg.pretrain_lr;
  o.negatives = cfg.negatives;
  o.mean = cfg.mean_reduction;
  o.select_best = true;
  o.patience = cfg.patience;
  o.verbose = cfg.verbose;
  return o;
}

LoopOptions finetune_options(const TrainConfig& cfg, std::string stage) {
  LoopOptions o;
  o.stage = std::move(stage);
  o.epochs = cfg.finetune_epochs;
  o.batch = cfg.finetune_batch;
  o.lr = cfg.finetune_lr;
  o.negatives = cfg.negatives;
  o.mean = cfg.mean_reduction;
  o.select_best = cfg.finetune_select_best;
  o.patience = cfg.finetune_select_best ? cfg.patience : 0;
  o.lambda = cfg.lambda;
  o.verbose = cfg.verbose;
  return o;
}

std::vector<Positive> positives_of(std::span<const Pair> pairs, std::uint8_t block) {
  std::vector<Positive> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({p.user, p.item, block});
  return out;
}

template <class P>
ForwardFn forward_of(const P& params) {
  return [&params](Tape& t, std::span<const std::uint32_t> u, std::span<const std::uint32_t> i) {
    return models::forward(t, params, u, i);
  };
}

StageResult to_stage(StoredModel m, LoopResult r) {
  StageResult s;
  s.model = std::move(m);
  s.curve = std::move(r.curve);
  s.best_epoch = r.best_epoch;
  s.clamped = r.clamped;
  return s;
}

}  // namespace

// ---------------------------------------------------------------- stages

StageResult pretrain(const Experiment& exp, const TrainConfig& cfg) {
  cfg.validate();
  const auto& train = exp.pairs(ItemClass::kNonSensitive, Part::kTrain);
  if (train.empty()) throw ContractError("pretrain: no non-sensitive training pairs");
  const std::size_t n_items = exp.num_items(ItemClass::kNonSensitive);
  const std::uint64_t init_seed = derive_seed(cfg.seed, "pretrain-init");
  data::Rng rng(derive_seed(cfg.seed, "pretrain"));
  const std::vector<Block> blocks = {{0, n_items, exp.train_index[0].get()}};
  const auto positives = positives_of(train, 0);
  const auto& dev_pairs = exp.pairs(ItemClass::kNonSensitive, Part::kDev);

  StoredModel m;
  m.scope = models::ItemScope::kNonSensitive;
  m.seed = cfg.seed;
  m.info = {{"stage", "pretrain"}, {"model", to_string(cfg.model)}};
  auto run = [&](auto& params) {
    const auto score = models::make_scorer(params);
    DevFn dev = [&]() {
      DevMetrics d;
      if (dev_pairs.empty()) return d;
      const auto r = eval::ranked_eval(score, dev_pairs, *exp.all_index[0], n_items,
                                       eval_options(cfg, {cfg.early_stop_k}));
      d.hr = r.hr[0];
      d.ndcg = r.ndcg[0];
      return d;
    };
    auto opts = pretrain_options(cfg, "pretrain");
    if (dev_pairs.empty()) opts.select_best = false;
    return fit(models::parameters(params), forward_of(params), positives, blocks, opts, rng, {}, dev);
  };
  const models::InitOptions init{cfg.embedding_std};
  LoopResult r;
  if (cfg.model == ModelKind::kNcf) {
    auto p = models::init_ncf(exp.ds.num_users(), n_items, cfg.dim, cfg.widths, init_seed, init);
    r = run(p);
    m.model = std::move(p);
  } else {
    auto p = models::init_mf(exp.ds.num_users(), n_items, cfg.dim, init_seed, init);
    r = run(p);
    m.model = std::move(p);
  }
  m.info["best_epoch"] = r.best_epoch;
  return to_stage(std::move(m), std::move(r));
}

const Matrix& user_table(const StoredModel& m) {
  if (const auto* n = std::get_if<models::NcfParams>(&m.model)) return n->users.value;
  if (const auto* f = std::get_if<models::MfParams>(&m.model)) return f->users.value;
  throw ContractError("model has no user embedding table");
}

fairness::BiasVector debias_model(StoredModel& m, const data::UserCatalog& catalog) {
  Matrix& users = const_cast<Matrix&>(user_table(m));
  // A table that was already projected has a zero gender gap up to rounding,
  // so recomputing v_B would give a noise direction. Reuse the recorded one.
  fairness::BiasVector b;
  if (m.info.contains("bias_vector") &&
      m.info["bias_vector"].size() == static_cast<std::size_t>(users.cols())) {
    b.v = m.info["bias_vector"].get<std::vector<double>>();
  } else {
    b = fairness::bias_vector(users, catalog);
  }
  users = fairness::debias_table(users, b);
  m.info["bias_vector"] = b.v;
  return b;
}

StageResult finetune(const StoredModel& pretrained, const Experiment& exp, const TrainConfig& cfg,
                     bool penalty) {
  cfg.validate();
  const auto& train = exp.pairs(ItemClass::kSensitive, Part::kTrain);
  if (train.empty()) throw ContractError("finetune: no sensitive training pairs");
  const std::size_t n_items = exp.num_items(ItemClass::kSensitive);
  const std::uint64_t init_seed = derive_seed(cfg.seed, "finetune-init");
  data::Rng rng(derive_seed(cfg.seed, "finetune"));
  const std::vector<Block> blocks = {{0, n_items, exp.train_index[1].get()}};
  const auto positives = positives_of(train, 0);
  const models::TransferOptions topts{cfg.transfer_output, {cfg.embedding_std}};

  StoredModel m;
  m.scope = models::ItemScope::kSensitive;
  m.seed = cfg.seed;
  m.info = {{"stage", "finetune"}, {"penalty", penalty}, {"lambda", penalty ? cfg.lambda : 0.0}};
  const PenaltyFn pen = penalty ? df_penalty_fn(exp, cfg, 0) : PenaltyFn{};
  LoopResult r;
  std::visit(
      [&](const auto& pre) {
        using T = std::decay_t<decltype(pre)>;
        if constexpr (std::is_same_v<T, models::ClassifierParams>) {
          throw ContractError("finetune: a classifier cannot be fine-tuned");
        } else {
          auto p = models::transfer_for_finetune(pre, pre.users.value, n_items, init_seed, topts);
          const auto score = models::make_scorer(p);
          r = fit(models::parameters(p), forward_of(p), positives, blocks,
                  finetune_options(cfg, "finetune"), rng, pen, sensitive_dev(score, exp, cfg));
          m.model = std::move(p);
        }
      },
      pretrained.model);
  m.info["best_epoch"] = r.best_epoch;
  return to_stage(std::move(m), std::move(r));
}

StageResult train_combined(const Experiment& exp, const TrainConfig& cfg,
                           const std::vector<std::uint32_t>* users, bool huber) {
  cfg.validate();
  const std::size_t nn = exp.num_items(ItemClass::kNonSensitive);
  const std::size_t ns = exp.num_items(ItemClass::kSensitive);
  std::vector<std::uint8_t> keep;
  if (users) {
    keep.assign(exp.ds.num_users(), 0);
    for (std::uint32_t u : *users) keep.at(u) = 1;
  }
  std::vector<Positive> positives;
  for (ItemClass c : data::kItemClasses) {
    for (const auto& p : exp.pairs(c, Part::kTrain)) {
      if (users && !keep[p.user]) continue;
      positives.push_back({p.user, p.item, static_cast<std::uint8_t>(data::class_slot(c))});
    }
  }
  if (positives.empty()) throw ContractError("train_combined: no training pairs");
  const std::vector<Block> blocks = {{0, nn, exp.train_index[0].get()},
                                     {static_cast<std::uint32_t>(nn), ns, exp.train_index[1].get()}};
  const std::uint64_t init_seed = derive_seed(cfg.seed, "combined-init");
  data::Rng rng(derive_seed(cfg.seed, "combined"));
  const models::InitOptions init{cfg.embedding_std};

  PenaltyFn pen;
  if (huber) {
    pen = [&exp, &cfg](Tape& tape, Var pred, const Batch& b) {
      std::vector<std::uint8_t> include(b.users.size());
      for (std::size_t r = 0; r < include.size(); ++r) include[r] = b.blocks[r] == 1;
      return fairness::huber_uabs_penalty(tape, pred, b.labels, genders_of(exp, b.users),
                                          b.local_items, include, cfg.huber_delta);
    };
  }
  auto opts = pretrain_options(cfg, huber ? "mf_uabs" : "combined");
  opts.lambda = cfg.lambda;
  if (exp.pairs(ItemClass::kSensitive, Part::kDev).empty()) opts.select_best = false;

  StoredModel m;
  m.scope = models::ItemScope::kCombined;
  m.item_offset = static_cast<std::uint32_t>(nn);
  m.seed = cfg.seed;
  m.info = {{"stage", opts.stage}, {"balanced_users", users != nullptr}};
  LoopResult r;
  auto run = [&](auto& p) {
    const auto score = models::make_scorer(p, static_cast<std::uint32_t>(nn));
    return fit(models::parameters(p), forward_of(p), positives, blocks, opts, rng, pen,
               sensitive_dev(score, exp, cfg));
  };
  if (cfg.model == ModelKind::kNcf) {
    auto p = models::init_ncf(exp.ds.num_users(), nn + ns, cfg.dim, cfg.widths, init_seed, init);
    r = run(p);
    m.model = std::move(p);
  } else {
    auto p = models::init_mf(exp.ds.num_users(), nn + ns, cfg.dim, init_seed, init);
    r = run(p);
    m.model = std::move(p);
  }
  m.info["best_epoch"] = r.best_epoch;
  return to_stage(std::move(m), std::move(r));
}

StageResult train_sensitive_scratch(const Experiment& exp, const TrainConfig& cfg) {
  cfg.validate();
  const auto& train = exp.pairs(ItemClass::kSensitive, Part::kTrain);
  if (train.empty()) throw ContractError("train_sensitive_scratch: no sensitive training pairs");
  const std::size_t ns = exp.num_items(ItemClass::kSensitive);
  const std::uint64_t init_seed = derive_seed(cfg.seed, "scratch-init");
  data::Rng rng(derive_seed(cfg.seed, "scratch"));
  const std::vector<Block> blocks = {{0, ns, exp.train_index[1].get()}};
  const auto positives = positives_of(train, 0);
  const models::InitOptions init{cfg.embedding_std};
  const PenaltyFn pen = df_penalty_fn(exp, cfg, 0);

  StoredModel m;
  m.scope = models::ItemScope::kSensitive;
  m.seed = cfg.seed;
  m.info = {{"stage", "scratch"}, {"lambda", cfg.lambda}};
  LoopResult r;
  auto run = [&](auto& p) {
    const auto score = models::make_scorer(p);
    return fit(models::parameters(p), forward_of(p), positives, blocks,
               finetune_options(cfg, "scratch"), rng, pen, sensitive_dev(score, exp, cfg));
  };
  if (cfg.model == ModelKind::kNcf) {
    auto p = models::init_ncf(exp.ds.num_users(), ns, cfg.dim, cfg.widths, init_seed, init);
    r = run(p);
    m.model = std::move(p);
  } else {
    auto p = models::init_mf(exp.ds.num_users(), ns, cfg.dim, init_seed, init);
    r = run(p);
    m.model = std::move(p);
  }
  m.info["best_epoch"] = r.best_epoch;
  return to_stage(std::move(m), std::move(r));
}

void attach_features(StoredModel& m, const Experiment& exp) {
  if (auto* c = std::get_if<models::ClassifierParams>(&m.model)) {
    if (c->input == models::ClassifierInput::kItemBag) c->features = exp.train_index[0];
  }
}

StageResult train_classifier(const Experiment& exp, const TrainConfig& cfg,
                             models::ClassifierInput input, const Matrix* users) {
  cfg.validate();
  const auto& train = exp.pairs(ItemClass::kSensitive, Part::kTrain);
  if (train.empty()) throw ContractError("train_classifier: no sensitive training pairs");
  const std::size_t ns = exp.num_items(ItemClass::kSensitive);
  std::vector<std::size_t> widths;
  if (input == models::ClassifierInput::kUserEmbedding) {
    if (!users) throw ContractError("train_classifier: user table required");
    widths = {users->cols(), ns};
  } else {
    widths.push_back(exp.num_items(ItemClass::kNonSensitive));
    if (!cfg.classifier_hidden.empty()) {
      widths.insert(widths.end(), cfg.classifier_hidden.begin(), cfg.classifier_hidden.end());
    } else {
      widths.insert(widths.end(), cfg.widths.begin() + 1, cfg.widths.end());
    }
    widths.push_back(ns);
  }
  auto p = models::init_classifier(input, widths, derive_seed(cfg.seed, "classifier-init"));
  if (users) p.user_table = diff::Parameter{"user_table", *users, true};
  StoredModel m;
  m.scope = models::ItemScope::kSensitive;
  m.seed = cfg.seed;
  m.info = {{"stage", "classifier"}};
  m.model = std::move(p);
  attach_features(m, exp);
  auto& cp = std::get<models::ClassifierParams>(m.model);

  data::Rng rng(derive_seed(cfg.seed, "classifier"));
  diff::Adam adam(models::parameters(cp), {.lr = cfg.classifier_lr});
  const auto score = models::make_scorer(cp);
  const DevFn dev = sensitive_dev(score, exp, cfg);
  std::vector<Pair> rows(train.begin(), train.end());
  StageResult out;
  std::vector<Matrix> best;
  double best_score = -std::numeric_limits<double>::infinity();
  auto params = models::parameters(cp);
  for (std::size_t epoch = 1; epoch <= cfg.classifier_epochs; ++epoch) {
    std::shuffle(rows.begin(), rows.end(), rng);
    double loss_sum = 0.0;
    std::size_t nb = 0;
    for (std::size_t start = 0; start < rows.size(); start += cfg.classifier_batch) {
      const std::size_t end = std::min(rows.size(), start + cfg.classifier_batch);
      std::vector<std::uint32_t> us, labels;
      for (std::size_t r = start; r < end; ++r) {
        us.push_back(rows[r].user);
        labels.push_back(rows[r].item);
      }
      Tape tape;
      const Var loss = tape.softmax_cross_entropy(models::classifier_logits(tape, cp, us), labels);
      if (!std::isfinite(tape.value(loss)[0])) {
        throw DivergenceError("classifier: non-finite loss at epoch " + std::to_string(epoch));
      }
      loss_sum += tape.value(loss)[0];
      ++nb;
      adam.step(tape.backward(loss));
    }
    EpochLog log;
    log.stage = "classifier";
    log.epoch = epoch;
    log.loss = nb ? loss_sum / static_cast<double>(nb) : 0.0;
    const DevMetrics d = dev();
    log.dev_hr = d.hr;
    log.dev_ndcg = d.ndcg;
    log.dev_epsilon = d.epsilon;
    log.dev_u_abs = d.u_abs;
    out.curve.push_back(log);
    if (cfg.verbose) {
      std::fprintf(stderr, "[classifier] epoch %zu loss %.5f dev hr %.4f\n", epoch, log.loss, d.hr);
    }
    out.best_epoch = epoch;
    if (cfg.finetune_select_best) {
      if (d.ndcg > best_score) {
        best_score = d.ndcg;
        best.clear();
        for (auto* q : params) best.push_back(q->value);
      } else {
        out.best_epoch = 0;
      }
    }
  }
  if (cfg.finetune_select_best && !best.empty()) {
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = best[k];
  }
  out.model = std::move(m);
  return out;
}

// ---------------------------------------------------------------- evaluation

Evaluation evaluate_sensitive(const StoredModel& m, const Experiment& exp, const TrainConfig& cfg,
                              Part part) {
  if (m.scope == models::ItemScope::kNonSensitive) {
    throw ContractError("model does not score sensitive items; fine-tune it first");
  }
  StoredModel local = m;
  attach_features(local, exp);
  return sensitive_eval(models::make_scorer(local), exp, cfg, part, cfg.ks);
}

eval::RankedEvalResult evaluate_nonsensitive(const StoredModel& m, const Experiment& exp,
                                             const TrainConfig& cfg, Part part) {
  if (m.scope == models::ItemScope::kSensitive) {
    throw ContractError("model does not score non-sensitive items");
  }
  return eval::ranked_eval(models::make_scorer(m), exp.pairs(ItemClass::kNonSensitive, part),
                           *exp.all_index[0], exp.num_items(ItemClass::kNonSensitive),
                           eval_options(cfg, cfg.ks));
}

// ---------------------------------------------------------------- pipeline

namespace {

json decisions_record(const TrainConfig& cfg) {
  return {{"alpha", cfg.alpha},
          {"epsilon0", cfg.epsilon0},
          {"penalty_instances", penalty_scope_name(cfg.penalty_instances)},
          {"penalty_item_mean", "all sensitive items, items lacking a gender count 0"},
          {"loss_reduction", cfg.mean_reduction ? "mean" : "sum"},
          {"negatives", "resampled every epoch within the positive's item class"},
          {"early_stopping", "pretraining keeps the best dev NDCG@" +
                                 std::to_string(cfg.early_stop_k) + ", patience " +
                                 std::to_string(cfg.patience)},
          {"finetune_selection", cfg.finetune_select_best ? "best dev NDCG" : "last epoch"},
          {"ties", "seeded random permutation per ranked instance"},
          {"u_abs_groups", "disadvantaged = female, advantaged = male"},
          {"huber_delta", cfg.huber_delta}};
}

}  // namespace

LambdaChoice tune_lambda(const Experiment& exp, const TrainConfig& cfg,
                         const StoredModel& pretrained, std::span<const double> grid,
                         double max_hr_drop) {
  cfg.validate();
  if (grid.empty()) throw ContractError("lambda grid is empty");
  StoredModel base = pretrained;
  if (cfg.use_debias) debias_model(base, exp.catalog);
  auto trial = [&](double lambda) {
    TrainConfig c = cfg;
    c.lambda = lambda;
    const auto m = finetune(base, exp, c, true).model;
    const auto ev = evaluate_sensitive(m, exp, c, Part::kDev);
    LambdaTrial t{lambda, ev.ranking.hr_at(cfg.early_stop_k),
                  std::numeric_limits<double>::quiet_NaN()};
    if (ev.fairness) t.dev_epsilon = ev.fairness->epsilon_mean;
    return t;
  };
  LambdaChoice out;
  const LambdaTrial ref = trial(0.0);
  out.reference_hr = ref.dev_hr;
  out.trials.push_back(ref);
  LambdaTrial best = ref;
  for (double l : grid) {
    const LambdaTrial t = trial(l);
    out.trials.push_back(t);
    if (t.dev_hr + max_hr_drop < ref.dev_hr || !std::isfinite(t.dev_epsilon)) continue;
    if (!std::isfinite(best.dev_epsilon) || t.dev_epsilon < best.dev_epsilon) best = t;
  }
  out.lambda = best.lambda;
  return out;
}

RunArtifacts run_variant(const Experiment& exp, const TrainConfig& cfg, const StoredModel* pretrained) {
  cfg.validate();
  RunArtifacts a;
  a.manifest = json::object();
  a.config = cfg;
  auto take = [&a](StageResult&& s) {
    a.curve.insert(a.curve.end(), s.curve.begin(), s.curve.end());
    a.manifest["clamped_probabilities"] =
        a.manifest.value("clamped_probabilities", std::size_t{0}) + s.clamped;
    return std::move(s.model);
  };
  auto get_pretrained = [&]() -> StoredModel {
    if (pretrained) {
      a.pretrained = *pretrained;
      return *pretrained;
    }
    auto s = pretrain(exp, cfg);
    a.pretrained = s.model;
    a.curve.insert(a.curve.end(), s.curve.begin(), s.curve.end());
    return std::move(s.model);
  };

  switch (cfg.variant) {
    case Variant::kNfcf: {
      if (!cfg.use_pretrain) {
        a.model = take(train_sensitive_scratch(exp, cfg));
        break;
      }
      StoredModel base = get_pretrained();
      if (cfg.use_debias) a.bias = debias_model(base, exp.catalog);
      a.model = take(finetune(base, exp, cfg, true));
      break;
    }
    case Variant::kNfcfEmbd: {
      StoredModel base = get_pretrained();
      a.bias = fairness::bias_vector(user_table(base), exp.catalog);
      a.model = take(finetune(base, exp, cfg, false));
      Matrix& users = const_cast<Matrix&>(user_table(a.model));
      users = fairness::debias_table(users, *a.bias);
      break;
    }
    case Variant::kTypical: {
      if (cfg.use_pretrain) {
        a.model = take(finetune(get_pretrained(), exp, cfg, false));
      } else {
        a.model = take(train_combined(exp, cfg, nullptr, false));
      }
      break;
    }
    case Variant::kResampling: {
      // Balanced user sample drawn over the training pairs of both classes.
      std::array<std::vector<Pair>, 2> train{exp.pairs(ItemClass::kNonSensitive, Part::kTrain),
                                            exp.pairs(ItemClass::kSensitive, Part::kTrain)};
      data::InteractionDataset train_ds(exp.ds.user_ids(),
                                        {exp.ds.item_ids(ItemClass::kNonSensitive),
                                         exp.ds.item_ids(ItemClass::kSensitive)},
                                        std::move(train));
      data::Rng rng(derive_seed(cfg.seed, "resample"));
      const auto balanced = data::resample_balanced(train_ds, exp.catalog, rng);
      std::vector<std::uint32_t> users;
      for (ItemClass c : data::kItemClasses) {
        const auto act = balanced.active_users(c);
        users.insert(users.end(), act.begin(), act.end());
      }
      std::sort(users.begin(), users.end());
      users.erase(std::unique(users.begin(), users.end()), users.end());
      a.manifest["balanced_users"] = users.size();
      a.model = take(train_combined(exp, cfg, &users, false));
      break;
    }
    case Variant::kMfUabs:
      a.model = take(train_combined(exp, cfg, nullptr, true));
      break;
    case Variant::kProjectionCf: {
      StoredModel base = get_pretrained();
      a.bias = debias_model(base, exp.catalog);
      a.model = take(train_classifier(exp, cfg, models::ClassifierInput::kUserEmbedding,
                                      &user_table(base)));
      break;
    }
    case Variant::kDnnClassifier:
      a.model = take(train_classifier(exp, cfg, models::ClassifierInput::kItemBag, nullptr));
      break;
  }
  a.model.info["variant"] = to_string(cfg.variant);
  a.test = evaluate_sensitive(a.model, exp, cfg, Part::kTest);
  a.manifest["config"] = cfg.to_json();
  a.manifest["decisions"] = decisions_record(cfg);
  a.manifest["split_warnings"] = exp.split.warnings;
  a.manifest["model_info"] = a.model.info;
  return a;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochLog>& curve) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out.precision(10);
  auto cell = [&out](double v) {
    if (!std::isnan(v)) out << v;
  };
  out << "stage,epoch,loss,penalty,dev_hr,dev_ndcg,dev_epsilon_mean,dev_u_abs\n";
  for (const auto& e : curve) {
    out << e.stage << ',' << e.epoch << ',';
    cell(e.loss);
    out << ',';
    cell(e.penalty);
    out << ',';
    cell(e.dev_hr);
    out << ',';
    cell(e.dev_ndcg);
    out << ',';
    cell(e.dev_epsilon);
    out << ',';
    cell(e.dev_u_abs);
    out << '\n';
  }
}

}  // namespace nfcf::training
