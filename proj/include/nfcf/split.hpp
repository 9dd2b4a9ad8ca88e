#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nfcf/dataset.hpp"

namespace nfcf::data {

struct SplitSpec {
  // Held-out test share of each class's pairs.
  double test_nonsensitive = 0.01;
  double test_sensitive = 0.30;
  // Dev share of what remains after the test hold-out.
  double dev_nonsensitive = 0.01;
  double dev_sensitive = 0.20;
  bool stratify_sensitive_by_gender = true;
  std::uint64_t seed = 42;

  double test_fraction(ItemClass c) const {
    return c == ItemClass::kSensitive ? test_sensitive : test_nonsensitive;
  }
  double dev_fraction(ItemClass c) const {
    return c == ItemClass::kSensitive ? dev_sensitive : dev_nonsensitive;
  }
  void validate() const;
};

enum class Part { kTrain, kDev, kTest };

// Indices into InteractionDataset::pairs(c), one partition per item class.
struct PairPartition {
  std::vector<std::uint32_t> train, dev, test;
  const std::vector<std::uint32_t>& part(Part p) const {
    return p == Part::kTrain ? train : p == Part::kDev ? dev : test;
  }
};

struct DataSplit {
  SplitSpec spec;
  std::array<PairPartition, 2> classes;
  std::vector<std::string> warnings;
  // Set when a gender has no sensitive test pairs; fairness on test is then
  // undefined.
  bool sensitive_test_missing_gender = false;

  const PairPartition& of(ItemClass c) const { return classes[class_slot(c)]; }
  std::vector<Pair> pairs(const InteractionDataset& ds, ItemClass c, Part p) const;
};

// Pair-level random partition. Sensitive pairs are partitioned within each
// gender group when stratification is on.
DataSplit split(const InteractionDataset& ds, const UserCatalog& catalog, const SplitSpec& spec);

void save_split(const DataSplit& s, const std::filesystem::path& path);
DataSplit load_split(const std::filesystem::path& path);

}  // namespace nfcf::data
