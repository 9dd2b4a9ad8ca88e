#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "nfcf/tape.hpp"

namespace testing {

using nfcf::diff::Matrix;
using nfcf::diff::Parameter;
using nfcf::diff::Tape;
using nfcf::diff::Var;

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

struct GradCheck {
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0;
};

// Central finite differences for every entry of every listed parameter,
// compared with the tape's gradients.
inline GradCheck check_gradients(const std::vector<Parameter*>& params,
                                 const std::function<Var(Tape&)>& build, double h = 1e-5) {
  GradCheck out;
  Tape tape;
  const auto grads = tape.backward(build(tape));
  auto eval = [&] {
    Tape t;
    const Var v = build(t);
    return t.value(v)[0];
  };
  for (Parameter* p : params) {
    if (p->frozen) continue;
    const Matrix* g = grads.find(*p);
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      const double keep = p->value[k];
      p->value[k] = keep + h;
      const double up = eval();
      p->value[k] = keep - h;
      const double down = eval();
      p->value[k] = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = g ? (*g)[k] : 0.0;
      const double e = rel_err(analytic, numeric);
      ++out.checked;
      if (e > out.worst) {
        out.worst = e;
        out.where = p->name + "[" + std::to_string(k) + "] analytic " + std::to_string(analytic) +
                    " numeric " + std::to_string(numeric);
      }
    }
  }
  return out;
}

inline Parameter random_param(const std::string& name, std::size_t r, std::size_t c,
                              std::mt19937_64& rng, double scale = 0.5) {
  std::normal_distribution<double> d(0.0, scale);
  Parameter p{name, Matrix(r, c), false};
  for (double& v : p.value.data()) v = d(rng);
  return p;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("nfcf_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
