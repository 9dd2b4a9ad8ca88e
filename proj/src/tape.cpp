#include "nfcf/tape.hpp"

#include <algorithm>
#include <cmath>

#include "nfcf/errors.hpp"

namespace nfcf::diff {

const Matrix* Gradients::find(const Parameter& p) const {
  auto it = index_.find(&p);
  return it == index_.end() ? nullptr : &entries_[it->second].second;
}

Matrix& Gradients::slot(const Parameter& p) {
  auto [it, inserted] = index_.try_emplace(&p, entries_.size());
  if (inserted) entries_.emplace_back(&p, Matrix(p.value.rows(), p.value.cols()));
  return entries_[it->second].second;
}

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw ContractError("tape: invalid variable handle");
  return nodes_[v.id];
}

Var Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Matrix& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Var Tape::constant(Matrix value) {
  Node n;
  n.kind = Kind::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::param(const Parameter& p) {
  Node n;
  n.kind = p.frozen ? Kind::kConstant : Kind::kParam;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = !p.frozen;
  return push(std::move(n));
}

Var Tape::gather_rows(const Parameter& table, std::span<const std::uint32_t> rows) {
  const std::size_t cols = table.value.cols();
  Node n;
  n.kind = table.frozen ? Kind::kConstant : Kind::kGather;
  n.value = Matrix(rows.size(), cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= table.value.rows()) {
      throw ContractError("gather_rows: index " + std::to_string(rows[r]) + " out of range for " +
                          table.name + " (" + table.value.shape_string() + ")");
    }
    auto src = table.value.row_span(rows[r]);
    std::copy(src.begin(), src.end(), n.value.row_span(r).begin());
  }
  n.param = &table;
  n.rows.assign(rows.begin(), rows.end());
  n.requires_grad = !table.frozen;
  return push(std::move(n));
}

Var Tape::gather_sum(const Parameter& table, std::span<const std::vector<std::uint32_t>> bags) {
  const std::size_t cols = table.value.cols();
  Node n;
  n.kind = table.frozen ? Kind::kConstant : Kind::kGatherSum;
  n.value = Matrix(bags.size(), cols);
  for (std::size_t r = 0; r < bags.size(); ++r) {
    auto dst = n.value.row_span(r);
    for (std::uint32_t idx : bags[r]) {
      if (idx >= table.value.rows()) {
        throw ContractError("gather_sum: index " + std::to_string(idx) + " out of range for " +
                            table.name);
      }
      auto src = table.value.row_span(idx);
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
  }
  n.param = &table;
  n.bags.assign(bags.begin(), bags.end());
  n.requires_grad = !table.frozen;
  return push(std::move(n));
}

Var Tape::record(std::vector<Var> inputs, Matrix value, BackwardFn backward) {
  Node n;
  n.kind = Kind::kOp;
  n.value = std::move(value);
  for (Var v : inputs) n.requires_grad = n.requires_grad || node(v).requires_grad;
  n.inputs = std::move(inputs);
  n.backward = std::move(backward);
  return push(std::move(n));
}

Var Tape::affine(Var x, Var w, Var b) {
  const Matrix& xv = value(x);
  const Matrix& wv = value(w);
  const Matrix& bv = value(b);
  if (xv.cols() != wv.rows()) {
    throw ShapeError("affine: input " + xv.shape_string() + " incompatible with weight " +
                     wv.shape_string());
  }
  if (bv.rows() != 1 || bv.cols() != wv.cols()) {
    throw ShapeError("affine: bias " + bv.shape_string() + " incompatible with weight " +
                     wv.shape_string());
  }
  Matrix out(xv.rows(), wv.cols());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row_span(r);
    std::copy(bv.data().begin(), bv.data().end(), row.begin());
  }
  gemm_accumulate(xv, wv, out);
  const Tape* self = this;
  return record({x, w, b}, std::move(out),
                [self, x, w](const Matrix& g, std::span<Matrix* const> grads) {
                  if (grads[0]) gemm_nt_accumulate(g, self->value(w), *grads[0]);
                  if (grads[1]) gemm_tn_accumulate(self->value(x), g, *grads[1]);
                  if (grads[2]) {
                    Matrix& gb = *grads[2];
                    for (std::size_t r = 0; r < g.rows(); ++r) {
                      for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
                    }
                  }
                });
}

Var Tape::relu(Var x) {
  Matrix out = value(x);
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  const Tape* self = this;
  return record({x}, std::move(out), [self, x](const Matrix& g, std::span<Matrix* const> grads) {
    if (!grads[0]) return;
    const Matrix& xv = self->value(x);
    Matrix& gx = *grads[0];
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];
    }
  });
}

Var Tape::sigmoid(Var x) {
  Matrix out = value(x);
  for (double& v : out.data()) v = stable_sigmoid(v);
  const Tape* self = this;
  const std::size_t out_id = nodes_.size();
  return record({x}, std::move(out),
                [self, out_id](const Matrix& g, std::span<Matrix* const> grads) {
                  if (!grads[0]) return;
                  const Matrix& s = self->value(Var{out_id});
                  Matrix& gx = *grads[0];
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s[i] * (1.0 - s[i]);
                });
}

Var Tape::concat(Var a, Var b) {
  const Matrix& av = value(a);
  const Matrix& bv = value(b);
  const bool a_empty = av.cols() == 0;
  const bool b_empty = bv.cols() == 0;
  std::size_t rows = av.rows();
  if (a_empty && av.rows() == 0) rows = bv.rows();
  if (!(a_empty && av.rows() == 0) && !(b_empty && bv.rows() == 0) && av.rows() != bv.rows()) {
    throw ShapeError("concat: batch mismatch " + av.shape_string() + " vs " + bv.shape_string());
  }
  const std::size_t ac = av.cols(), bc = bv.cols();
  Matrix out(rows, ac + bc);
  for (std::size_t r = 0; r < rows; ++r) {
    auto dst = out.row_span(r);
    if (ac) std::copy_n(av.row_span(r).begin(), ac, dst.begin());
    if (bc) std::copy_n(bv.row_span(r).begin(), bc, dst.begin() + ac);
  }
  return record({a, b}, std::move(out), [ac, bc](const Matrix& g, std::span<Matrix* const> grads) {
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto src = g.row_span(r);
      if (grads[0] && ac) {
        auto dst = grads[0]->row_span(r);
        for (std::size_t c = 0; c < ac; ++c) dst[c] += src[c];
      }
      if (grads[1] && bc) {
        auto dst = grads[1]->row_span(r);
        for (std::size_t c = 0; c < bc; ++c) dst[c] += src[ac + c];
      }
    }
  });
}

Var Tape::row_dot(Var a, Var b) {
  const Matrix& av = value(a);
  const Matrix& bv = value(b);
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
    throw ShapeError("row_dot: " + av.shape_string() + " vs " + bv.shape_string());
  }
  Matrix out(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) out[r] = dot(av.row_span(r), bv.row_span(r));
  const Tape* self = this;
  return record({a, b}, std::move(out),
                [self, a, b](const Matrix& g, std::span<Matrix* const> grads) {
                  const Matrix& av = self->value(a);
                  const Matrix& bv = self->value(b);
                  for (std::size_t r = 0; r < av.rows(); ++r) {
                    const double gr = g[r];
                    if (grads[0]) {
                      auto dst = grads[0]->row_span(r);
                      auto src = bv.row_span(r);
                      for (std::size_t c = 0; c < av.cols(); ++c) dst[c] += gr * src[c];
                    }
                    if (grads[1]) {
                      auto dst = grads[1]->row_span(r);
                      auto src = av.row_span(r);
                      for (std::size_t c = 0; c < av.cols(); ++c) dst[c] += gr * src[c];
                    }
                  }
                });
}

Var Tape::add(Var a, Var b) {
  const Matrix& av = value(a);
  const Matrix& bv = value(b);
  enum class Mode { kSame, kScalar, kRow } mode;
  if (bv.rows() == av.rows() && bv.cols() == av.cols()) {
    mode = Mode::kSame;
  } else if (bv.rows() == 1 && bv.cols() == 1) {
    mode = Mode::kScalar;
  } else if (bv.rows() == 1 && bv.cols() == av.cols()) {
    mode = Mode::kRow;
  } else {
    throw ShapeError("add: " + av.shape_string() + " vs " + bv.shape_string());
  }
  Matrix out = av;
  const std::size_t cols = av.cols();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += mode == Mode::kSame ? bv[i] : mode == Mode::kScalar ? bv[0] : bv[i % cols];
  }
  return record({a, b}, std::move(out),
                [mode, cols](const Matrix& g, std::span<Matrix* const> grads) {
                  if (grads[0]) add_inplace(*grads[0], g);
                  if (!grads[1]) return;
                  Matrix& gb = *grads[1];
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    if (mode == Mode::kSame) {
                      gb[i] += g[i];
                    } else if (mode == Mode::kScalar) {
                      gb[0] += g[i];
                    } else {
                      gb[i % cols] += g[i];
                    }
                  }
                });
}

Var Tape::scale(Var a, double factor) {
  Matrix out = value(a);
  for (double& v : out.data()) v *= factor;
  return record({a}, std::move(out), [factor](const Matrix& g, std::span<Matrix* const> grads) {
    // A zero factor contributes nothing, not even signed zeros.
    if (!grads[0] || factor == 0.0) return;
    Matrix& ga = *grads[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

Var Tape::sum(Var a) {
  double s = 0.0;
  for (double v : value(a).data()) s += v;
  return record({a}, Matrix::scalar(s), [](const Matrix& g, std::span<Matrix* const> grads) {
    if (!grads[0]) return;
    for (double& v : grads[0]->data()) v += g[0];
  });
}

Var Tape::mean(Var a) {
  const std::size_t n = value(a).size();
  if (n == 0) throw ContractError("mean of an empty matrix");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var Tape::pick(Var x, std::span<const std::uint32_t> cols) {
  const Matrix& xv = value(x);
  if (cols.size() != xv.rows()) {
    throw ShapeError("pick: " + std::to_string(cols.size()) + " indices for " + xv.shape_string());
  }
  Matrix out(xv.rows(), 1);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    if (cols[r] >= xv.cols()) throw ContractError("pick: column index out of range");
    out[r] = xv(r, cols[r]);
  }
  std::vector<std::uint32_t> idx(cols.begin(), cols.end());
  return record({x}, std::move(out),
                [idx = std::move(idx)](const Matrix& g, std::span<Matrix* const> grads) {
                  if (!grads[0]) return;
                  for (std::size_t r = 0; r < idx.size(); ++r) (*grads[0])(r, idx[r]) += g[r];
                });
}

namespace {

Matrix row_softmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto src = x.row_span(r);
    auto dst = out.row_span(r);
    const double mx = *std::max_element(src.begin(), src.end());
    double z = 0.0;
    for (std::size_t c = 0; c < src.size(); ++c) {
      dst[c] = std::exp(src[c] - mx);
      z += dst[c];
    }
    for (double& v : dst) v /= z;
  }
  return out;
}

}  // namespace

Var Tape::softmax(Var x) {
  if (value(x).cols() == 0) throw ShapeError("softmax over zero columns");
  Matrix out = row_softmax(value(x));
  const Tape* self = this;
  const std::size_t out_id = nodes_.size();
  return record({x}, std::move(out),
                [self, out_id](const Matrix& g, std::span<Matrix* const> grads) {
                  if (!grads[0]) return;
                  const Matrix& s = self->value(Var{out_id});
                  for (std::size_t r = 0; r < s.rows(); ++r) {
                    auto sr = s.row_span(r);
                    auto gr = g.row_span(r);
                    const double inner = dot(sr, gr);
                    auto dst = grads[0]->row_span(r);
                    for (std::size_t c = 0; c < sr.size(); ++c) dst[c] += sr[c] * (gr[c] - inner);
                  }
                });
}

Var Tape::softmax_cross_entropy(Var logits, std::span<const std::uint32_t> labels) {
  const Matrix& lv = value(logits);
  if (labels.size() != lv.rows() || lv.rows() == 0) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     lv.shape_string());
  }
  Matrix probs = row_softmax(lv);
  double loss = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (labels[r] >= lv.cols()) throw ContractError("softmax_cross_entropy: label out of range");
    loss -= std::log(std::max(probs(r, labels[r]), 1e-300));
  }
  const double inv_n = 1.0 / static_cast<double>(lv.rows());
  std::vector<std::uint32_t> idx(labels.begin(), labels.end());
  return record({logits}, Matrix::scalar(loss * inv_n),
                [probs = std::move(probs), idx = std::move(idx), inv_n](
                    const Matrix& g, std::span<Matrix* const> grads) {
                  if (!grads[0]) return;
                  Matrix& gl = *grads[0];
                  for (std::size_t r = 0; r < probs.rows(); ++r) {
                    for (std::size_t c = 0; c < probs.cols(); ++c) {
                      const double target = c == idx[r] ? 1.0 : 0.0;
                      gl(r, c) += g[0] * inv_n * (probs(r, c) - target);
                    }
                  }
                });
}

Gradients Tape::backward(Var loss) const {
  const Node& root = node(loss);
  if (root.value.rows() != 1 || root.value.cols() != 1) {
    throw ContractError("backward: loss must be 1x1, got " + root.value.shape_string());
  }
  Gradients out;
  // Every trainable parameter on the tape gets an entry, reached or not.
  for (const Node& n : nodes_) {
    if (n.kind == Kind::kParam || n.kind == Kind::kGather || n.kind == Kind::kGatherSum) {
      out.slot(*n.param);
    }
  }
  if (!root.requires_grad) return out;

  std::vector<Matrix> grads(loss.id + 1);
  grads[loss.id] = Matrix::scalar(1.0);
  std::vector<Matrix*> slots;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    Matrix& g = grads[id];
    if (g.empty() || !n.requires_grad) continue;
    switch (n.kind) {
      case Kind::kConstant:
        break;
      case Kind::kParam:
        add_inplace(out.slot(*n.param), g);
        break;
      case Kind::kGather: {
        Matrix& table = out.slot(*n.param);
        for (std::size_t r = 0; r < n.rows.size(); ++r) {
          auto dst = table.row_span(n.rows[r]);
          auto src = g.row_span(r);
          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
        }
        break;
      }
      case Kind::kGatherSum: {
        Matrix& table = out.slot(*n.param);
        for (std::size_t r = 0; r < n.bags.size(); ++r) {
          auto src = g.row_span(r);
          for (std::uint32_t idx : n.bags[r]) {
            auto dst = table.row_span(idx);
            for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
          }
        }
        break;
      }
      case Kind::kOp: {
        slots.assign(n.inputs.size(), nullptr);
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Node& in = nodes_[n.inputs[k].id];
          if (!in.requires_grad) continue;
          Matrix& gi = grads[n.inputs[k].id];
          if (gi.empty() && in.value.size() > 0) gi = Matrix(in.value.rows(), in.value.cols());
          slots[k] = &gi;
        }
        n.backward(g, slots);
        break;
      }
    }
    g = Matrix();
  }
  return out;
}

}  // namespace nfcf::diff
