#pragma once

#include <functional>
#include <vector>

#include "sgi/autograd.hpp"
#include "sgi/rng.hpp"

namespace sgi::testing {

struct GradCheck {
  double max_rel_error = 0.0;  // normwise: max|analytic - numeric| / max|numeric|
  double max_abs_error = 0.0;
};

/// Compares backward() of a scalar function against central differences on every
/// entry of `leaves`. The function is re-evaluated from scratch for each probe.
GradCheck check_gradients(const std::function<Var()>& f, const std::vector<Var>& leaves, double step = 1e-6);

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0);
Var random_leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0);

}  // namespace sgi::testing
