#pragma once

#include <cstdint>
#include <vector>

#include "nfcf/matrix.hpp"
#include "nfcf/tape.hpp"

namespace nfcf::diff {

struct AdamOptions {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moments are allocated only for the parameters
// handed to the constructor that are not frozen.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions options = {});

  // Parameters missing from grads are treated as having a zero gradient.
  void step(const Gradients& grads);

  std::int64_t steps() const { return step_; }
  const AdamOptions& options() const { return options_; }
  std::size_t tracked() const { return slots_.size(); }
  bool tracks(const Parameter& p) const;

 private:
  struct Slot {
    Parameter* param;
    Matrix m;
    Matrix v;
  };
  AdamOptions options_;
  std::vector<Slot> slots_;
  std::int64_t step_ = 0;
};

}  // namespace nfcf::diff
