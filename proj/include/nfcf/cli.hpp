#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "nfcf/synth.hpp"
#include "nfcf/training.hpp"

namespace nfcf::cli {

inline constexpr const char* kVersion = "0.1.0";

struct CommandOptions {
  std::filesystem::path config;
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  std::filesystem::path checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<double> lambda;
  std::optional<double> alpha;
  std::optional<std::vector<std::size_t>> ks;
  // tune only
  std::vector<double> lambda_grid = {0.01, 0.03, 0.1, 0.3, 1.0, 3.0};
  double max_hr_drop = 0.02;
  // synth only
  data::SynthSpec synth;
};

// Config file (or defaults) with command-line overrides applied.
training::TrainConfig resolve_config(const CommandOptions& o);

std::uint64_t fnv1a(std::string_view bytes);
std::uint64_t file_hash(const std::filesystem::path& p);

// Each command writes into out_dir and returns a process exit status;
// failures are reported on `err`.
int cmd_pretrain(const CommandOptions& o, std::ostream& err);
int cmd_debias(const CommandOptions& o, std::ostream& err);
int cmd_finetune(const CommandOptions& o, std::ostream& err);
int cmd_evaluate(const CommandOptions& o, std::ostream& err);
int cmd_audit(const CommandOptions& o, std::ostream& err);
int cmd_baseline(const CommandOptions& o, std::ostream& err);
int cmd_tune(const CommandOptions& o, std::ostream& err);
int cmd_synth(const CommandOptions& o, std::ostream& err);

int run_command(const std::string& name, const CommandOptions& o, std::ostream& err);

}  // namespace nfcf::cli
