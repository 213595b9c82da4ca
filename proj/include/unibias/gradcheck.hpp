#pragma once

#include <functional>
#include <string>
#include <vector>

#include "unibias/tensor.hpp"

namespace unibias {

struct GradcheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  bool ok = true;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 0.0;

  bool ok() const;
  double max_rel_error() const;
  std::string summary() const;
};

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  // Denominator floor: rel = |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-3;
};

// Compares tape gradients of the scalar produced by `loss` against central
// differences (f(p + h) - f(p - h)) / 2h, perturbing every element of every
// parameter. `loss` must be deterministic and build its graph from `params`.
GradcheckReport gradcheck(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                          const GradcheckOptions& options = {});

}  // namespace unibias
