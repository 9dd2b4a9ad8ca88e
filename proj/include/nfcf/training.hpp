#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nfcf/checkpoint.hpp"
#include "nfcf/dataset.hpp"
#include "nfcf/eval.hpp"
#include "nfcf/fairness.hpp"
#include "nfcf/loaders.hpp"
#include "nfcf/split.hpp"

namespace nfcf::training {

using data::ItemClass;
using data::Pair;
using data::Part;
using models::StoredModel;

enum class ModelKind { kNcf, kMf };
enum class Variant {
  kNfcf,
  kNfcfEmbd,
  kTypical,
  kResampling,
  kMfUabs,
  kProjectionCf,
  kDnnClassifier,
};

std::string to_string(ModelKind k);
std::string to_string(Variant v);
ModelKind parse_model_kind(const std::string& s);
Variant parse_variant(const std::string& s);

struct TrainConfig {
  Variant variant = Variant::kNfcf;
  ModelKind model = ModelKind::kNcf;
  // Pipeline switches (ablations).
  bool use_pretrain = true;
  bool use_debias = true;

  std::size_t dim = 128;
  std::vector<std::size_t> widths = {256, 64, 32, 16};
  double embedding_std = 0.01;
  bool transfer_output = true;

  std::size_t pretrain_epochs = 20;
  std::size_t pretrain_batch = 2048;
  double pretrain_lr = 0.001;
  std::size_t patience = 5;

  std::size_t finetune_epochs = 50;
  std::size_t finetune_batch = 256;
  double finetune_lr = 0.001;
  // Keep the best fine-tuning epoch on dev NDCG instead of the last one.
  bool finetune_select_best = false;

  std::size_t negatives = 5;
  bool mean_reduction = true;

  double lambda = 0.1;
  double epsilon0 = 0.0;
  double alpha = 1.0;
  // Rows of the batch the penalty counts: every row (positives and sampled
  // negatives) or positives only.
  fairness::PenaltyInstances penalty_instances = fairness::PenaltyInstances::kAll;
  double huber_delta = 1.0;

  // Hidden widths of the DNN classifier; empty means the tower widths after
  // the input.
  std::vector<std::size_t> classifier_hidden;
  std::size_t classifier_epochs = 50;
  std::size_t classifier_batch = 256;
  double classifier_lr = 0.001;

  std::vector<std::size_t> ks = {5, 7, 10};
  std::size_t early_stop_k = 10;
  std::size_t eval_candidates = 100;

  std::size_t min_item_count = 5;
  data::SplitSpec split;
  std::uint64_t seed = 1;
  bool verbose = false;

  // Every problem found, joined into one ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  // Unknown keys are errors; missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

TrainConfig load_config(const std::filesystem::path& path);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

// A loaded, preprocessed and split dataset with the lookups training needs.
struct Experiment {
  data::InteractionDataset ds;
  data::UserCatalog catalog;
  data::DataSplit split;
  data::LoadStats stats;
  std::array<std::array<std::vector<Pair>, 3>, 2> parts;  // [class][part]
  // Every known pair of a class, for candidate exclusion.
  std::array<std::shared_ptr<data::UserItemIndex>, 2> all_index;
  std::array<std::shared_ptr<data::UserItemIndex>, 2> train_index;

  const std::vector<Pair>& pairs(ItemClass c, Part p) const {
    return parts[data::class_slot(c)][static_cast<std::size_t>(p)];
  }
  std::size_t num_items(ItemClass c) const { return ds.num_items(c); }
  // Users with at least one pair in the given class and part.
  std::vector<std::uint32_t> users_in(ItemClass c, Part p) const;
};

Experiment prepare_experiment(data::LoadedData loaded, const TrainConfig& cfg,
                              bool is_movielens = false);
Experiment load_experiment(const std::filesystem::path& dir, const TrainConfig& cfg);
// Reuses an existing split instead of drawing one.
Experiment prepare_experiment(data::LoadedData loaded, const TrainConfig& cfg, bool is_movielens,
                              const data::DataSplit& split);

// Mean (or summed) binary cross-entropy of a B x 1 probability column.
// Probabilities are clamped to [1e-12, 1 - 1e-12]; clamped rows get no
// gradient and are counted into *clamped.
diff::Var bce_loss(diff::Tape& tape, diff::Var probs, std::span<const double> labels, bool mean,
                   std::size_t* clamped = nullptr);

struct EpochLog {
  std::string stage;
  std::size_t epoch = 0;
  double loss = 0.0;
  double penalty = 0.0;
  // Dev metrics at early_stop_k; NaN when not measured.
  double dev_hr = 0.0;
  double dev_ndcg = 0.0;
  double dev_epsilon = 0.0;
  double dev_u_abs = 0.0;
};

struct StageResult {
  StoredModel model;
  std::vector<EpochLog> curve;
  std::size_t best_epoch = 0;  // 0 = initial parameters
  std::size_t clamped = 0;
};

// Non-sensitive stage: NCF or MF on the non-sensitive train pairs, best dev
// NDCG checkpoint with early stopping.
StageResult pretrain(const Experiment& exp, const TrainConfig& cfg);

// Replaces the user table of an NCF/MF model by its debiased version and
// returns the bias vector computed from it.
fairness::BiasVector debias_model(StoredModel& m, const data::UserCatalog& catalog);
const diff::Matrix& user_table(const StoredModel& m);

// Sensitive stage on top of a pretrained model: frozen users, fresh items.
// The differential-fairness penalty is recorded when `penalty` is set and
// weighted by cfg.lambda.
StageResult finetune(const StoredModel& pretrained, const Experiment& exp, const TrainConfig& cfg,
                     bool penalty);
// NCF/MF from scratch on the combined vocabulary (sensitive items offset by
// the non-sensitive count). With `users` only those users' pairs are used;
// `huber` adds the smoothed absolute-unfairness penalty on sensitive rows.
StageResult train_combined(const Experiment& exp, const TrainConfig& cfg,
                           const std::vector<std::uint32_t>* users, bool huber);
// From scratch on sensitive items only, users trainable, with the penalty.
StageResult train_sensitive_scratch(const Experiment& exp, const TrainConfig& cfg);
// Softmax classifier over sensitive items: either on a fixed user table or on
// bags of non-sensitive train interactions.
StageResult train_classifier(const Experiment& exp, const TrainConfig& cfg,
                             models::ClassifierInput input, const diff::Matrix* users);
// Bag classifiers need their features recomputed after loading.
void attach_features(StoredModel& m, const Experiment& exp);

struct Evaluation {
  eval::RankedEvalResult ranking;
  std::optional<fairness::FairnessReport> fairness;
  std::string fairness_error;
};
// Ranking and fairness on the sensitive pairs of one part.
Evaluation evaluate_sensitive(const StoredModel& m, const Experiment& exp, const TrainConfig& cfg,
                              Part part = Part::kTest);
eval::RankedEvalResult evaluate_nonsensitive(const StoredModel& m, const Experiment& exp,
                                             const TrainConfig& cfg, Part part = Part::kTest);

struct RunArtifacts {
  TrainConfig config;
  std::optional<StoredModel> pretrained;
  std::optional<fairness::BiasVector> bias;
  StoredModel model;
  std::vector<EpochLog> curve;
  Evaluation test;
  nlohmann::json manifest;
};

// Full pipeline for one variant. A pretrained model may be supplied to skip
// the non-sensitive stage; it must come from the same config and data.
RunArtifacts run_variant(const Experiment& exp, const TrainConfig& cfg,
                         const StoredModel* pretrained = nullptr);

struct LambdaTrial {
  double lambda = 0.0;
  double dev_hr = 0.0;
  double dev_epsilon = 0.0;
};
struct LambdaChoice {
  double lambda = 0.0;
  double reference_hr = 0.0;  // dev HR with lambda 0
  std::vector<LambdaTrial> trials;
};
// Picks the lambda with the lowest dev epsilon among those whose dev HR at
// early_stop_k is at most `max_hr_drop` below the lambda-0 run. The test
// split is never looked at. `pretrained` is the non-sensitive model, before
// debiasing.
LambdaChoice tune_lambda(const Experiment& exp, const TrainConfig& cfg,
                         const StoredModel& pretrained, std::span<const double> grid,
                         double max_hr_drop = 0.02);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochLog>& curve);

}  // namespace nfcf::training
