#include "nfcf/adam.hpp"

#include <cmath>

namespace nfcf::diff {

Adam::Adam(std::vector<Parameter*> params, AdamOptions options) : options_(options) {
  for (Parameter* p : params) {
    if (p == nullptr || p->frozen) continue;
    slots_.push_back({p, Matrix(p->value.rows(), p->value.cols()),
                      Matrix(p->value.rows(), p->value.cols())});
  }
}

bool Adam::tracks(const Parameter& p) const {
  for (const Slot& s : slots_) {
    if (s.param == &p) return true;
  }
  return false;
}

void Adam::step(const Gradients& grads) {
  for (const Slot& s : slots_) {
    const Matrix* g = grads.find(*s.param);
    if (g && (g->rows() != s.param->value.rows() || g->cols() != s.param->value.cols())) {
      throw ShapeError("adam: gradient " + g->shape_string() + " for parameter " + s.param->name +
                       " of shape " + s.param->value.shape_string());
    }
  }
  ++step_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double step_size = options_.lr / c1;
  const double inv_sqrt_c2 = 1.0 / std::sqrt(c2);
  for (Slot& s : slots_) {
    const Matrix* g = grads.find(*s.param);
    double* w = s.param->value.data().data();
    double* m = s.m.data().data();
    double* v = s.v.data().data();
    const std::size_t n = s.param->value.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_c2 + options_.eps);
    }
  }
}

}  // namespace nfcf::diff
