#include <iostream>

#include "CLI11.hpp"
#include "nfcf/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Fair neural collaborative filtering"};
  app.set_version_flag("--version", nfcf::cli::kVersion);
  app.require_subcommand(1);

  nfcf::cli::CommandOptions o;
  std::uint64_t seed = 0;
  std::string variant;
  double lambda = 0.0, alpha = 0.0;
  std::vector<std::size_t> ks;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"pretrain", "Train NCF/MF on non-sensitive interactions"},
      {"debias", "Project user embeddings off the gender direction"},
      {"finetune", "Fine-tune a pretrained model on sensitive items"},
      {"tune", "Pick lambda on the dev split from a pretrained checkpoint"},
      {"evaluate", "Ranking and fairness metrics for a checkpoint"},
      {"audit", "Gender distribution of observed and recommended sensitive items"},
      {"baseline", "Run a complete variant (nfcf, typical, resampling, ...)"},
      {"synth", "Write a synthetic dataset with planted gender bias"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    if (name == "synth") {
      auto& s = o.synth;
      sub->add_option("--users", s.users, "Number of users")->capture_default_str();
      sub->add_option("--clusters", s.clusters, "Latent taste clusters")->capture_default_str();
      sub->add_option("--items", s.nonsensitive_items, "Non-sensitive items")->capture_default_str();
      sub->add_option("--per-group", s.sensitive_per_group,
                      "Sensitive items per (cluster, gender type)")
          ->capture_default_str();
      sub->add_option("--interactions", s.interactions_per_user,
                      "Non-sensitive interactions per user")
          ->capture_default_str();
      sub->add_option("--concordance", s.concordance,
                      "Probability that a user's sensitive item matches their gender")
          ->capture_default_str();
      sub->add_option("--lean-opposite", s.lean_opposite,
                      "Acceptance weight of items leaning to the other gender")
          ->capture_default_str();
      sub->add_option("--seed", s.seed, "Generator seed")->capture_default_str();
      sub->add_option("--out-dir", o.out_dir, "Output directory")->required();
      continue;
    }
    sub->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--data-dir", o.data_dir, "Directory with ratings.dat/users.dat or CSVs");
    sub->add_option("--out-dir", o.out_dir, "Output directory")->required();
    sub->add_option("--checkpoint", o.checkpoint, "Input checkpoint");
    sub->add_option("--seed", seed, "Training seed");
    sub->add_option("--variant", variant, "Pipeline variant");
    sub->add_option("--lambda", lambda, "Fairness penalty weight");
    sub->add_option("--alpha", alpha, "Smoothing for the fairness estimates");
    sub->add_option("--k-list", ks, "Cutoffs K for HR/NDCG")->delimiter(',');
    if (name == "tune") {
      sub->add_option("--grid", o.lambda_grid, "Candidate lambdas")
          ->delimiter(',')
          ->capture_default_str();
      sub->add_option("--max-hr-drop", o.max_hr_drop,
                      "Allowed dev HR loss against lambda 0 (absolute)")
          ->capture_default_str();
    }
  }

  CLI11_PARSE(app, argc, argv);
  CLI::App* sub = app.get_subcommands().front();
  if (sub->get_name() != "synth") {
    if (sub->count("--seed")) o.seed = seed;
    if (sub->count("--variant")) o.variant = variant;
    if (sub->count("--lambda")) o.lambda = lambda;
    if (sub->count("--alpha")) o.alpha = alpha;
    if (sub->count("--k-list")) o.ks = ks;
  }
  return nfcf::cli::run_command(sub->get_name(), o, std::cerr);
}
