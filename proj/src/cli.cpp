#include "nfcf/cli.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "nfcf/errors.hpp"
#include "nfcf/synth.hpp"

namespace nfcf::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using training::Experiment;
using training::TrainConfig;

training::TrainConfig resolve_config(const CommandOptions& o) {
  json j = json::object();
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw ConfigError("cannot open config " + o.config.string());
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config " + o.config.string() + " is not valid JSON: " + e.what());
    }
  }
  if (o.seed) j["seed"] = *o.seed;
  if (o.variant) j["variant"] = *o.variant;
  if (o.lambda) j["lambda"] = *o.lambda;
  if (o.alpha) j["alpha"] = *o.alpha;
  if (o.ks) j["ks"] = *o.ks;
  return TrainConfig::from_json(j);
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw LoadError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return fnv1a(ss.str());
}

namespace {

std::string hex(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << v;
  return ss.str();
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

void prepare_out(const CommandOptions& o) {
  require(!o.out_dir.empty(), "--out-dir is required");
  fs::create_directories(o.out_dir);
}

fs::path output(const CommandOptions& o, const std::string& name) {
  const fs::path p = o.out_dir / name;
  // Earlier stages' artifacts are inputs, never outputs.
  if (!o.checkpoint.empty() && fs::exists(o.checkpoint) && fs::exists(p) &&
      fs::equivalent(p, o.checkpoint)) {
    throw ConfigError("refusing to overwrite input checkpoint " + o.checkpoint.string());
  }
  return p;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw LoadError("cannot write " + p.string());
  out << std::setw(2) << j << '\n';
}

json data_fingerprint(const fs::path& dir) {
  json j = json::object();
  const bool ml = data::detect_format(dir) == data::DataFormat::kMovieLens;
  for (const char* f : ml ? std::vector<const char*>{"ratings.dat", "users.dat"}
                          : std::vector<const char*>{"interactions.csv", "users.csv"}) {
    j[f] = {{"fnv1a", hex(file_hash(dir / f))}, {"bytes", fs::file_size(dir / f)}};
  }
  return j;
}

Experiment load(const CommandOptions& o, const TrainConfig& cfg) {
  require(!o.data_dir.empty(), "--data-dir is required");
  return training::load_experiment(o.data_dir, cfg);
}

models::StoredModel load_input_checkpoint(const CommandOptions& o) {
  require(!o.checkpoint.empty(), "--checkpoint is required");
  return models::load_checkpoint(o.checkpoint);
}

json manifest(const std::string& command, const CommandOptions& o, const TrainConfig& cfg) {
  const std::string cfg_text = cfg.to_json().dump();
  json m;
  m["command"] = command;
  m["version"] = kVersion;
  m["config"] = cfg.to_json();
  m["config_hash"] = hex(fnv1a(cfg_text));
  m["seeds"] = {{"seed", cfg.seed}, {"split_seed", cfg.split.seed}};
  if (!o.data_dir.empty()) m["data"] = data_fingerprint(o.data_dir);
  if (!o.checkpoint.empty()) {
    m["input_checkpoint"] = {{"path", o.checkpoint.string()},
                             {"fnv1a", hex(file_hash(o.checkpoint))}};
  }
  return m;
}

void write_evaluation(const CommandOptions& o, const training::Evaluation& ev, json& man) {
  write_json(output(o, "eval.json"), ev.ranking.to_json());
  ev.ranking.write_csv(output(o, "eval.csv"));
  if (ev.fairness) {
    write_json(output(o, "fairness.json"), ev.fairness->to_json());
    man["test"]["epsilon_mean"] = ev.fairness->epsilon_mean;
    man["test"]["u_abs"] = ev.fairness->u_abs;
  } else {
    man["test"]["fairness_error"] = ev.fairness_error;
  }
  man["test"]["ranking"] = ev.ranking.to_json();
}

json split_summary(const Experiment& exp) {
  json j;
  for (auto c : data::kItemClasses) {
    const auto& p = exp.split.of(c);
    j[std::string(data::to_string(c))] = {
        {"train", p.train.size()}, {"dev", p.dev.size()}, {"test", p.test.size()}};
  }
  return j;
}

// Shared tail of the training commands.
void finish_training(const CommandOptions& o, const std::string& command, const TrainConfig& cfg,
                     const Experiment& exp, const std::vector<training::EpochLog>& curve,
                     const models::StoredModel& model, const std::string& ckpt_name,
                     const training::Evaluation* ev, json extra = json::object()) {
  json man = manifest(command, o, cfg);
  man["split"] = split_summary(exp);
  man["split_warnings"] = exp.split.warnings;
  data::save_split(exp.split, output(o, "split.json"));
  training::write_metrics_csv(output(o, "metrics.csv"), curve);
  models::save_checkpoint(model, output(o, ckpt_name));
  man["outputs"] = {ckpt_name, "metrics.csv", "split.json"};
  if (ev) write_evaluation(o, *ev, man);
  man["model_info"] = model.info;
  man.update(extra);
  write_json(output(o, "manifest.json"), man);
}

}  // namespace

int cmd_pretrain(const CommandOptions& o, std::ostream& err) {
  const auto cfg = resolve_config(o);
  prepare_out(o);
  const auto exp = load(o, cfg);
  auto stage = training::pretrain(exp, cfg);
  const auto rank = training::evaluate_nonsensitive(stage.model, exp, cfg, data::Part::kTest);
  write_json(output(o, "eval.json"), rank.to_json());
  rank.write_csv(output(o, "eval.csv"));
  json extra = {{"best_epoch", stage.best_epoch},
                {"clamped_probabilities", stage.clamped},
                {"test_nonsensitive", rank.to_json()}};
  finish_training(o, "pretrain", cfg, exp, stage.curve, stage.model, "pretrained.ckpt", nullptr,
                  extra);
  err << "pretrain: best epoch " << stage.best_epoch << ", test HR@" << rank.ks.back() << " "
      << rank.hr.back() << '\n';
  return 0;
}

int cmd_debias(const CommandOptions& o, std::ostream& err) {
  const auto cfg = resolve_config(o);
  prepare_out(o);
  require(!o.data_dir.empty(), "--data-dir is required");
  auto model = load_input_checkpoint(o);
  const auto loaded = data::load_directory(o.data_dir);
  const auto b = training::debias_model(model, loaded.catalog);
  model.info["debiased"] = true;
  models::save_checkpoint(model, output(o, "debiased.ckpt"));
  write_json(output(o, "bias_vector.json"), {{"v_B", b.v}, {"dim", b.v.size()}});
  json man = manifest("debias", o, cfg);
  man["outputs"] = {"debiased.ckpt", "bias_vector.json"};
  write_json(output(o, "manifest.json"), man);
  err << "debias: projected " << training::user_table(model).rows() << " user embeddings\n";
  return 0;
}

int cmd_finetune(const CommandOptions& o, std::ostream& err) {
  const auto cfg = resolve_config(o);
  prepare_out(o);
  const auto exp = load(o, cfg);
  const auto pre = load_input_checkpoint(o);
  if (pre.scope != models::ItemScope::kNonSensitive) {
    throw ConfigError("finetune expects a pretrained (non-sensitive) checkpoint");
  }
  const bool penalty = cfg.variant == training::Variant::kNfcf;
  auto stage = training::finetune(pre, exp, cfg, penalty);
  stage.model.info["variant"] = training::to_string(cfg.variant);
  const auto ev = training::evaluate_sensitive(stage.model, exp, cfg);
  finish_training(o, "finetune", cfg, exp, stage.curve, stage.model, "finetuned.ckpt", &ev,
                  {{"penalty", penalty}, {"clamped_probabilities", stage.clamped}});
  err << "finetune: test HR@" << ev.ranking.ks.front() << " " << ev.ranking.hr.front();
  if (ev.fairness) err << ", epsilon_mean " << ev.fairness->epsilon_mean;
  err << '\n';
  return 0;
}

int cmd_evaluate(const CommandOptions& o, std::ostream& err) {
  const auto cfg = resolve_config(o);
  prepare_out(o);
  const auto exp = load(o, cfg);
  const auto model = load_input_checkpoint(o);
  json man = manifest("evaluate", o, cfg);
  if (model.scope == models::ItemScope::kNonSensitive) {
    const auto r = training::evaluate_nonsensitive(model, exp, cfg, data::Part::kTest);
    write_json(output(o, "eval.json"), r.to_json());
    r.write_csv(output(o, "eval.csv"));
    man["test"]["ranking"] = r.to_json();
    err << "evaluate: HR@" << r.ks.back() << " " << r.hr.back() << '\n';
  } else {
    const auto ev = training::evaluate_sensitive(model, exp, cfg);
    write_evaluation(o, ev, man);
    err << "evaluate: HR@" << ev.ranking.ks.front() << " " << ev.ranking.hr.front();
    if (ev.fairness) err << ", epsilon_mean " << ev.fairness->epsilon_mean;
    if (!ev.fairness_error.empty()) err << " (fairness undefined: " << ev.fairness_error << ")";
    err << '\n';
  }
  write_json(output(o, "manifest.json"), man);
  return 0;
}

int cmd_audit(const CommandOptions& o, std::ostream& err) {
  const auto cfg = resolve_config(o);
  prepare_out(o);
  const auto exp = load(o, cfg);
  const auto& names = exp.ds.item_ids(data::ItemClass::kSensitive);
  const auto observed = eval::dataset_audit(exp.ds, exp.catalog, data::ItemClass::kSensitive);
  observed.write_csv(output(o, "dataset_audit.csv"), names);
  write_json(output(o, "dataset_audit.json"), observed.to_json(names));
  json man = manifest("audit", o, cfg);
  if (!o.checkpoint.empty()) {
    auto model = models::load_checkpoint(o.checkpoint);
    if (model.scope == models::ItemScope::kNonSensitive) {
      throw ConfigError("audit needs a model that scores sensitive items");
    }
    training::attach_features(model, exp);
    const auto users = exp.users_in(data::ItemClass::kSensitive, data::Part::kTest);
    const auto a = eval::gender_audit(models::make_scorer(model), users, exp.catalog,
                                      *exp.all_index[1], exp.num_items(data::ItemClass::kSensitive),
                                      training::derive_seed(cfg.seed, "audit"));
    a.write_csv(output(o, "audit.csv"), names);
    write_json(output(o, "audit.json"), a.to_json(names));
    man["outputs"] = {"dataset_audit.csv", "dataset_audit.json", "audit.csv", "audit.json"};
  } else {
    man["outputs"] = {"dataset_audit.csv", "dataset_audit.json"};
  }
  write_json(output(o, "manifest.json"), man);
  err << "audit: written to " << o.out_dir.string() << '\n';
  return 0;
}

int cmd_baseline(const CommandOptions& o, std::ostream& err) {
  const auto cfg = resolve_config(o);
  prepare_out(o);
  const auto exp = load(o, cfg);
  std::optional<models::StoredModel> pre;
  if (!o.checkpoint.empty()) pre = load_input_checkpoint(o);
  auto art = training::run_variant(exp, cfg, pre ? &*pre : nullptr);
  json extra = art.manifest;
  if (art.bias) {
    write_json(output(o, "bias_vector.json"), {{"v_B", art.bias->v}, {"dim", art.bias->v.size()}});
  }
  if (art.pretrained && !pre) models::save_checkpoint(*art.pretrained, output(o, "pretrained.ckpt"));
  finish_training(o, "baseline", cfg, exp, art.curve, art.model, "model.ckpt", &art.test, extra);
  err << training::to_string(cfg.variant) << ": test HR@" << art.test.ranking.ks.front() << " "
      << art.test.ranking.hr.front();
  if (art.test.fairness) err << ", epsilon_mean " << art.test.fairness->epsilon_mean;
  err << '\n';
  return 0;
}

int cmd_tune(const CommandOptions& o, std::ostream& err) {
  const auto cfg = resolve_config(o);
  prepare_out(o);
  const auto exp = load(o, cfg);
  const auto pre = load_input_checkpoint(o);
  if (pre.scope != models::ItemScope::kNonSensitive) {
    throw ConfigError("tune expects a pretrained (non-sensitive) checkpoint");
  }
  if (pre.info.value("debiased", false)) {
    throw ConfigError("tune expects the checkpoint from pretrain, before debias");
  }
  const auto choice = training::tune_lambda(exp, cfg, pre, o.lambda_grid, o.max_hr_drop);
  json trials = json::array();
  for (const auto& t : choice.trials) {
    trials.push_back({{"lambda", t.lambda}, {"dev_hr", t.dev_hr},
                      {"dev_epsilon_mean", std::isfinite(t.dev_epsilon) ? json(t.dev_epsilon)
                                                                        : json(nullptr)}});
  }
  write_json(output(o, "lambda.json"), {{"lambda", choice.lambda},
                                        {"k", cfg.early_stop_k},
                                        {"max_hr_drop", o.max_hr_drop},
                                        {"reference_dev_hr", choice.reference_hr},
                                        {"trials", trials}});
  json man = manifest("tune", o, cfg);
  man["outputs"] = {"lambda.json"};
  write_json(output(o, "manifest.json"), man);
  err << "tune: lambda " << choice.lambda << '\n';
  return 0;
}

int cmd_synth(const CommandOptions& o, std::ostream& err) {
  prepare_out(o);
  const auto d = data::synthesize(o.synth);
  data::write_csv(o.out_dir / "interactions.csv", o.out_dir / "users.csv", d.dataset, d.catalog);
  err << "synth: " << d.dataset.num_users() << " users, " << d.dataset.num_pairs() << " pairs\n";
  return 0;
}

int run_command(const std::string& name, const CommandOptions& o, std::ostream& err) {
  try {
    if (name == "pretrain") return cmd_pretrain(o, err);
    if (name == "debias") return cmd_debias(o, err);
    if (name == "finetune") return cmd_finetune(o, err);
    if (name == "evaluate") return cmd_evaluate(o, err);
    if (name == "audit") return cmd_audit(o, err);
    if (name == "baseline") return cmd_baseline(o, err);
    if (name == "tune") return cmd_tune(o, err);
    if (name == "synth") return cmd_synth(o, err);
    err << "error: unknown command '" << name << "'\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace nfcf::cli
