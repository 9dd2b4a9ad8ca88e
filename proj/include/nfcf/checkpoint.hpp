#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "nfcf/models.hpp"

namespace nfcf::models {

// What the model's item axis covers.
enum class ItemScope { kNonSensitive, kSensitive, kCombined };

std::string to_string(ItemScope s);
ItemScope parse_item_scope(const std::string& s);

using AnyModel = std::variant<NcfParams, MfParams, ClassifierParams>;

struct StoredModel {
  AnyModel model;
  ItemScope scope = ItemScope::kNonSensitive;
  // For kCombined: sensitive item j lives at model item index offset + j.
  std::uint32_t item_offset = 0;
  std::uint64_t seed = 0;
  // Free-form provenance recorded into the manifest (stage, variant, ...).
  nlohmann::json info = nlohmann::json::object();
};

std::string kind_name(const AnyModel& m);

// Scores sensitive items when the model covers them, otherwise the model's
// own items. Bag classifiers need their features attached first.
Scorer make_scorer(const StoredModel& m);

inline constexpr std::uint32_t kCheckpointVersion = 1;

// File layout: 8-byte magic "NFCFCKPT", u32 version, u64 manifest length,
// JSON manifest, then every tensor listed in the manifest as little-endian
// float64 in manifest order.
void save_checkpoint(const StoredModel& m, const std::filesystem::path& path);
// Throws LoadError on bad magic, version mismatch, truncation or a manifest
// that does not describe the payload.
StoredModel load_checkpoint(const std::filesystem::path& path);

}  // namespace nfcf::models
