#pragma once

// Reverse-mode gradient tape over dense matrices.
//
// Operations are recorded in evaluation order; backward() replays them in
// reverse and accumulates parameter gradients into a Gradients map. Batches
// are laid out one example per row, so a layer computes x * W + b with W of
// shape fan_in x fan_out.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nfcf/matrix.hpp"

namespace nfcf::diff {

struct Parameter {
  std::string name;
  Matrix value;
  bool frozen = false;
};

// Handle to a node on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

// Parameter gradients keyed by parameter identity, kept in first-touch order.
class Gradients {
 public:
  const Matrix* find(const Parameter& p) const;
  Matrix& slot(const Parameter& p);
  std::size_t size() const { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<std::pair<const Parameter*, Matrix>> entries_;
  std::unordered_map<const Parameter*, std::size_t> index_;
};

class Tape {
 public:
  // Receives the gradient of the node's output and one slot per input; a slot
  // is null when that input does not require a gradient.
  using BackwardFn = std::function<void(const Matrix& out_grad, std::span<Matrix* const> in_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // Frozen parameters are recorded as constants.
  Var param(const Parameter& p);
  // Rows of an embedding table, one per index.
  Var gather_rows(const Parameter& table, std::span<const std::uint32_t> rows);
  // Sum of table rows per bag: bags[b] lists the rows summed into output row b.
  Var gather_sum(const Parameter& table, std::span<const std::vector<std::uint32_t>> bags);

  Var affine(Var x, Var w, Var b);
  Var relu(Var x);
  Var sigmoid(Var x);
  Var concat(Var a, Var b);
  // Per-row inner product of two equally shaped matrices: B x 1.
  Var row_dot(Var a, Var b);
  // Elementwise sum; b may also be 1 x 1 or 1 x cols and is broadcast.
  Var add(Var a, Var b);
  Var scale(Var a, double factor);
  Var sum(Var a);
  Var mean(Var a);
  // Picks out(r, 0) = x(r, cols[r]).
  Var pick(Var x, std::span<const std::uint32_t> cols);
  // Row-wise softmax.
  Var softmax(Var x);
  // Mean over rows of -log softmax(logits)[r, labels[r]].
  Var softmax_cross_entropy(Var logits, std::span<const std::uint32_t> labels);

  // Records a custom operation with an explicit backward.
  Var record(std::vector<Var> inputs, Matrix value, BackwardFn backward);

  const Matrix& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Gradients of a 1 x 1 loss with respect to every non-frozen parameter
  // that was recorded on this tape. Parameters the loss does not reach get a
  // zero gradient.
  Gradients backward(Var loss) const;

 private:
  enum class Kind { kConstant, kParam, kGather, kGatherSum, kOp };
  struct Node {
    Kind kind = Kind::kOp;
    Matrix value;
    std::vector<Var> inputs;
    BackwardFn backward;
    const Parameter* param = nullptr;
    std::vector<std::uint32_t> rows;
    std::vector<std::vector<std::uint32_t>> bags;
    bool requires_grad = false;
  };

  const Node& node(Var v) const;
  Var push(Node n);

  std::vector<Node> nodes_;
};

}  // namespace nfcf::diff
