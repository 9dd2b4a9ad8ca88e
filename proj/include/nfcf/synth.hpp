#pragma once

#include <cstdint>

#include "nfcf/loaders.hpp"

namespace nfcf::data {

// Planted-bias generator. Users fall into latent taste clusters; movies-like
// non-sensitive items belong to a cluster and lean male, female or neither.
// Sensitive items come in groups of `sensitive_per_group` per (cluster,
// gender type), and each user gets exactly one: the gender type matches the
// user's gender with probability `concordance`, the cluster is the user's own
// except with probability `cluster_noise`.
struct SynthSpec {
  std::size_t users = 1000;
  std::size_t clusters = 8;
  std::size_t nonsensitive_items = 300;
  std::size_t sensitive_per_group = 3;
  std::size_t interactions_per_user = 30;
  double cluster_affinity = 0.8;
  // Acceptance weights of a non-sensitive item by lean relative to the user.
  double lean_same = 1.0;
  double lean_neutral = 0.6;
  double lean_opposite = 0.2;
  double concordance = 0.9;
  double cluster_noise = 0.2;
  std::uint64_t seed = 11;
};

LoadedData synthesize(const SynthSpec& spec);

}  // namespace nfcf::data
