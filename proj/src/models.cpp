#include "nfcf/models.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "nfcf/errors.hpp"

namespace nfcf::models {

namespace {

using Rng = std::mt19937_64;

Parameter normal_table(std::string name, std::size_t rows, std::size_t cols, double std_dev,
                       Rng& rng) {
  Parameter p{std::move(name), Matrix(rows, cols), false};
  std::normal_distribution<double> dist(0.0, std_dev);
  for (double& v : p.value.data()) v = dist(rng);
  return p;
}

Parameter glorot(std::string name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Parameter p{std::move(name), Matrix(fan_in, fan_out), false};
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& v : p.value.data()) v = dist(rng);
  return p;
}

Dense dense(const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return {glorot(name + ".weight", fan_in, fan_out, rng),
          Parameter{name + ".bias", Matrix(1, fan_out), false}};
}

void validate_tower(std::size_t dim, const std::vector<std::size_t>& widths) {
  if (dim < 1) throw ConfigError("embedding dimension must be >= 1");
  if (widths.size() < 2) throw ConfigError("tower needs an input width and at least one layer");
  if (widths[0] != 2 * dim) {
    throw ConfigError("tower input width " + std::to_string(widths[0]) + " must equal 2 x " +
                      std::to_string(dim));
  }
  for (std::size_t l = 1; l < widths.size(); ++l) {
    if (widths[l] >= widths[l - 1] || widths[l] == 0) {
      throw ConfigError("tower widths must be strictly decreasing and positive");
    }
  }
}

void check_indices(std::span<const std::uint32_t> users, std::span<const std::uint32_t> items,
                   std::size_t num_users, std::size_t num_items) {
  if (users.size() != items.size()) {
    throw ContractError("user batch of " + std::to_string(users.size()) + " vs item batch of " +
                        std::to_string(items.size()));
  }
  for (std::size_t k = 0; k < users.size(); ++k) {
    if (users[k] >= num_users || items[k] >= num_items) {
      throw ContractError("user/item index out of range");
    }
  }
}

constexpr std::size_t kScoreChunk = 4096;

}  // namespace

NcfParams init_ncf(std::size_t num_users, std::size_t num_items, std::size_t dim,
                   std::vector<std::size_t> widths, std::uint64_t seed, InitOptions opts) {
  validate_tower(dim, widths);
  Rng rng(seed);
  NcfParams p;
  p.dim = dim;
  p.widths = std::move(widths);
  p.users = normal_table("users", num_users, dim, opts.embedding_std, rng);
  p.items = normal_table("items", num_items, dim, opts.embedding_std, rng);
  for (std::size_t l = 0; l + 1 < p.widths.size(); ++l) {
    p.layers.push_back(dense("layer" + std::to_string(l), p.widths[l], p.widths[l + 1], rng));
  }
  p.output = glorot("output", p.widths.back(), 1, rng);
  return p;
}

MfParams init_mf(std::size_t num_users, std::size_t num_items, std::size_t dim, std::uint64_t seed,
                 InitOptions opts) {
  if (dim < 1) throw ConfigError("embedding dimension must be >= 1");
  Rng rng(seed);
  MfParams p;
  p.dim = dim;
  p.users = normal_table("users", num_users, dim, opts.embedding_std, rng);
  p.items = normal_table("items", num_items, dim, opts.embedding_std, rng);
  p.user_bias = Parameter{"user_bias", Matrix(num_users, 1), false};
  p.item_bias = Parameter{"item_bias", Matrix(num_items, 1), false};
  p.global_mean = Parameter{"global_mean", Matrix(1, 1), false};
  return p;
}

ClassifierParams init_classifier(ClassifierInput input, std::vector<std::size_t> widths,
                                 std::uint64_t seed) {
  if (widths.size() < 2) throw ConfigError("classifier needs input and output widths");
  for (std::size_t w : widths) {
    if (w == 0) throw ConfigError("classifier widths must be positive");
  }
  Rng rng(seed);
  ClassifierParams p;
  p.input = input;
  p.widths = std::move(widths);
  std::size_t first = 0;
  if (input == ClassifierInput::kItemBag) {
    if (p.widths.size() < 3) throw ConfigError("bag classifier needs a hidden layer");
    p.bag = dense("bag", p.widths[0], p.widths[1], rng);
    first = 1;
  } else {
    p.user_table = Parameter{"user_table", Matrix(0, p.widths[0]), true};
  }
  for (std::size_t l = first; l + 1 < p.widths.size(); ++l) {
    p.layers.push_back(dense("layer" + std::to_string(l), p.widths[l], p.widths[l + 1], rng));
  }
  return p;
}

std::vector<Parameter*> parameters(NcfParams& p) {
  std::vector<Parameter*> out{&p.users, &p.items};
  for (Dense& d : p.layers) {
    out.push_back(&d.weight);
    out.push_back(&d.bias);
  }
  out.push_back(&p.output);
  return out;
}

std::vector<Parameter*> parameters(MfParams& p) {
  return {&p.users, &p.items, &p.user_bias, &p.item_bias, &p.global_mean};
}

std::vector<Parameter*> parameters(ClassifierParams& p) {
  std::vector<Parameter*> out;
  if (p.input == ClassifierInput::kUserEmbedding) {
    out.push_back(&p.user_table);
  } else {
    out.push_back(&p.bag.weight);
    out.push_back(&p.bag.bias);
  }
  for (Dense& d : p.layers) {
    out.push_back(&d.weight);
    out.push_back(&d.bias);
  }
  return out;
}

template <class P>
static std::vector<const Parameter*> const_params(const P& p) {
  auto mut = parameters(const_cast<P&>(p));
  return {mut.begin(), mut.end()};
}

std::vector<const Parameter*> parameters(const NcfParams& p) { return const_params(p); }
std::vector<const Parameter*> parameters(const MfParams& p) { return const_params(p); }
std::vector<const Parameter*> parameters(const ClassifierParams& p) { return const_params(p); }

diff::Var ncf_forward(diff::Tape& tape, const NcfParams& p, std::span<const std::uint32_t> users,
                      std::span<const std::uint32_t> items) {
  check_indices(users, items, p.users.value.rows(), p.items.value.rows());
  diff::Var z = tape.concat(tape.gather_rows(p.users, users), tape.gather_rows(p.items, items));
  for (const Dense& d : p.layers) {
    z = tape.relu(tape.affine(z, tape.param(d.weight), tape.param(d.bias)));
  }
  diff::Var logit = tape.affine(z, tape.param(p.output), tape.constant(Matrix(1, 1)));
  return tape.sigmoid(logit);
}

diff::Var mf_forward(diff::Tape& tape, const MfParams& p, std::span<const std::uint32_t> users,
                     std::span<const std::uint32_t> items) {
  check_indices(users, items, p.users.value.rows(), p.items.value.rows());
  diff::Var dot = tape.row_dot(tape.gather_rows(p.users, users), tape.gather_rows(p.items, items));
  diff::Var s = tape.add(dot, tape.gather_rows(p.user_bias, users));
  s = tape.add(s, tape.gather_rows(p.item_bias, items));
  s = tape.add(s, tape.param(p.global_mean));
  return tape.sigmoid(s);
}

diff::Var classifier_logits(diff::Tape& tape, const ClassifierParams& p,
                            std::span<const std::uint32_t> users) {
  diff::Var z;
  if (p.input == ClassifierInput::kUserEmbedding) {
    z = tape.gather_rows(p.user_table, users);
  } else {
    if (!p.features) throw ContractError("bag classifier has no user features attached");
    std::vector<std::vector<std::uint32_t>> bags;
    bags.reserve(users.size());
    for (std::uint32_t u : users) {
      auto its = p.features->items(u);
      bags.emplace_back(its.begin(), its.end());
    }
    z = tape.relu(tape.add(tape.gather_sum(p.bag.weight, bags), tape.param(p.bag.bias)));
  }
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const Dense& d = p.layers[l];
    z = tape.affine(z, tape.param(d.weight), tape.param(d.bias));
    if (l + 1 < p.layers.size()) z = tape.relu(z);
  }
  return z;
}

double mf_score(const MfParams& p, std::uint32_t user, std::uint32_t item) {
  if (user >= p.users.value.rows() || item >= p.items.value.rows()) {
    throw ContractError("mf_score: index out of range");
  }
  const double s = diff::dot(p.users.value.row_span(user), p.items.value.row_span(item)) +
                   p.global_mean.value[0] + p.item_bias.value[item] + p.user_bias.value[user];
  return 1.0 / (1.0 + std::exp(-s));
}

namespace {

template <class P>
Scorer pointwise_scorer(const P& p, std::uint32_t item_offset) {
  return [&p, item_offset](std::span<const std::uint32_t> users,
                           std::span<const std::uint32_t> items) {
    std::vector<double> out(users.size());
    std::vector<std::uint32_t> shifted;
    for (std::size_t start = 0; start < users.size(); start += kScoreChunk) {
      const std::size_t n = std::min(kScoreChunk, users.size() - start);
      shifted.assign(items.begin() + start, items.begin() + start + n);
      for (auto& i : shifted) i += item_offset;
      diff::Tape tape;
      const diff::Var y = forward(tape, p, users.subspan(start, n), shifted);
      const Matrix& v = tape.value(y);
      std::copy(v.data().begin(), v.data().end(), out.begin() + start);
    }
    return out;
  };
}

}  // namespace

Scorer make_scorer(const NcfParams& p, std::uint32_t item_offset) {
  return pointwise_scorer(p, item_offset);
}

Scorer make_scorer(const MfParams& p, std::uint32_t item_offset) {
  return pointwise_scorer(p, item_offset);
}

Scorer make_scorer(const ClassifierParams& p) {
  return [&p](std::span<const std::uint32_t> users, std::span<const std::uint32_t> items) {
    if (users.size() != items.size()) throw ContractError("scorer: batch size mismatch");
    std::vector<double> out(users.size());
    for (std::size_t start = 0; start < users.size(); start += kScoreChunk) {
      const std::size_t n = std::min(kScoreChunk, users.size() - start);
      diff::Tape tape;
      const diff::Var probs = tape.softmax(classifier_logits(tape, p, users.subspan(start, n)));
      const Matrix& v = tape.value(probs);
      for (std::size_t r = 0; r < n; ++r) {
        if (items[start + r] >= v.cols()) throw ContractError("scorer: item out of range");
        out[start + r] = v(r, items[start + r]);
      }
    }
    return out;
  };
}

NcfParams transfer_for_finetune(const NcfParams& pretrained, const Matrix& users,
                                std::size_t num_items, std::uint64_t seed, TransferOptions opts) {
  if (users.cols() != pretrained.dim) {
    throw ContractError("transfer: user table has " + std::to_string(users.cols()) +
                        " columns, pretrained dimension is " + std::to_string(pretrained.dim));
  }
  Rng rng(seed);
  NcfParams p;
  p.dim = pretrained.dim;
  p.widths = pretrained.widths;
  p.users = Parameter{"users", users, true};
  p.items = normal_table("items", num_items, p.dim, opts.init.embedding_std, rng);
  p.layers = pretrained.layers;
  p.output = opts.transfer_output ? pretrained.output
                                  : glorot("output", p.widths.back(), 1, rng);
  return p;
}

MfParams transfer_for_finetune(const MfParams& pretrained, const Matrix& users,
                               std::size_t num_items, std::uint64_t seed, TransferOptions opts) {
  if (users.cols() != pretrained.dim) {
    throw ContractError("transfer: user table has " + std::to_string(users.cols()) +
                        " columns, pretrained dimension is " + std::to_string(pretrained.dim));
  }
  Rng rng(seed);
  MfParams p;
  p.dim = pretrained.dim;
  p.users = Parameter{"users", users, true};
  p.items = normal_table("items", num_items, p.dim, opts.init.embedding_std, rng);
  p.user_bias = pretrained.user_bias;
  p.user_bias.frozen = false;
  p.item_bias = Parameter{"item_bias", Matrix(num_items, 1), false};
  p.global_mean = pretrained.global_mean;
  return p;
}

}  // namespace nfcf::models
