#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "nfcf/dataset.hpp"
#include "nfcf/tape.hpp"

namespace nfcf::models {

using diff::Matrix;
using diff::Parameter;

struct Dense {
  Parameter weight;  // fan_in x fan_out
  Parameter bias;    // 1 x fan_out
};

// Embeddings concatenated into a ReLU tower; sigmoid(h . z_L) on top.
struct NcfParams {
  std::size_t dim = 0;
  // widths[0] is the concatenated input (2 * dim); each following entry is a
  // hidden layer.
  std::vector<std::size_t> widths;
  Parameter users;  // M x dim
  Parameter items;  // N x dim
  std::vector<Dense> layers;
  Parameter output;  // widths.back() x 1
};

// sigmoid(q_i . p_u + mu + b_i + b_u)
struct MfParams {
  std::size_t dim = 0;
  Parameter users;
  Parameter items;
  Parameter user_bias;  // M x 1
  Parameter item_bias;  // N x 1
  Parameter global_mean;  // 1 x 1
};

enum class ClassifierInput { kUserEmbedding, kItemBag };

// Softmax over the sensitive items. With kUserEmbedding the input is a fixed
// user table (the projection-based baseline); with kItemBag it is the binary
// vector of the user's non-sensitive interactions, applied as a summed bag of
// first-layer rows (the DNN classifier).
struct ClassifierParams {
  ClassifierInput input = ClassifierInput::kUserEmbedding;
  std::vector<std::size_t> widths;  // input width, hidden widths..., classes
  Parameter user_table;  // kUserEmbedding only, always frozen
  Dense bag;             // kItemBag only: num_features x widths[1]
  std::vector<Dense> layers;
  // Item bags per user for kItemBag; attached from the dataset, not saved.
  std::shared_ptr<const data::UserItemIndex> features;
};

struct InitOptions {
  double embedding_std = 0.01;
};

NcfParams init_ncf(std::size_t num_users, std::size_t num_items, std::size_t dim,
                   std::vector<std::size_t> widths, std::uint64_t seed, InitOptions opts = {});
MfParams init_mf(std::size_t num_users, std::size_t num_items, std::size_t dim, std::uint64_t seed,
                 InitOptions opts = {});
// widths = {input, hidden..., classes}; the input width must match the user
// table's columns or the number of bag features.
ClassifierParams init_classifier(ClassifierInput input, std::vector<std::size_t> widths,
                                 std::uint64_t seed);

std::vector<Parameter*> parameters(NcfParams& p);
std::vector<Parameter*> parameters(MfParams& p);
std::vector<Parameter*> parameters(ClassifierParams& p);
std::vector<const Parameter*> parameters(const NcfParams& p);
std::vector<const Parameter*> parameters(const MfParams& p);
std::vector<const Parameter*> parameters(const ClassifierParams& p);

// B x 1 interaction probabilities.
diff::Var ncf_forward(diff::Tape& tape, const NcfParams& p, std::span<const std::uint32_t> users,
                      std::span<const std::uint32_t> items);
diff::Var mf_forward(diff::Tape& tape, const MfParams& p, std::span<const std::uint32_t> users,
                     std::span<const std::uint32_t> items);
// B x classes logits.
diff::Var classifier_logits(diff::Tape& tape, const ClassifierParams& p,
                            std::span<const std::uint32_t> users);

inline diff::Var forward(diff::Tape& t, const NcfParams& p, std::span<const std::uint32_t> u,
                         std::span<const std::uint32_t> i) {
  return ncf_forward(t, p, u, i);
}
inline diff::Var forward(diff::Tape& t, const MfParams& p, std::span<const std::uint32_t> u,
                         std::span<const std::uint32_t> i) {
  return mf_forward(t, p, u, i);
}

double mf_score(const MfParams& p, std::uint32_t user, std::uint32_t item);

// Scores a batch of (user, item) pairs; items are in the model's own index
// space shifted by item_offset.
using Scorer = std::function<std::vector<double>(std::span<const std::uint32_t> users,
                                                 std::span<const std::uint32_t> items)>;

// The returned scorers reference the parameters, which must outlive them.
Scorer make_scorer(const NcfParams& p, std::uint32_t item_offset = 0);
Scorer make_scorer(const MfParams& p, std::uint32_t item_offset = 0);
Scorer make_scorer(const ClassifierParams& p);

struct TransferOptions {
  // Copy the output weights h along with the tower; otherwise h is
  // re-initialized.
  bool transfer_output = true;
  InitOptions init;
};

// Tower (and h) copied from the pretrained model, user table replaced by
// `users` and frozen, a fresh item table with num_items rows.
NcfParams transfer_for_finetune(const NcfParams& pretrained, const Matrix& users,
                                std::size_t num_items, std::uint64_t seed,
                                TransferOptions opts = {});
// p_u copied and frozen; b_u and mu carried over and trainable; fresh q_i and b_i.
MfParams transfer_for_finetune(const MfParams& pretrained, const Matrix& users,
                               std::size_t num_items, std::uint64_t seed,
                               TransferOptions opts = {});

}  // namespace nfcf::models
