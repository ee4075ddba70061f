#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace sgi::testing {

GradCheck check_gradients(const std::function<Var()>& f, const std::vector<Var>& leaves, double step) {
  for (auto leaf : leaves) leaf.zero_grad();
  Var out = f();
  out.backward();

  GradCheck result;
  for (auto leaf : leaves) {
    Tensor analytic = leaf.has_grad() ? leaf.grad() : Tensor::zeros(leaf.shape());
    Tensor& value = leaf.mutable_value();
    double max_num = 0.0, max_diff = 0.0;
    for (int64_t i = 0; i < value.numel(); ++i) {
      const double saved = value[i];
      value[i] = saved + step;
      double fp, fm;
      {
        NoGradGuard guard;
        fp = f().item();
        value[i] = saved - step;
        fm = f().item();
      }
      value[i] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      max_num = std::max(max_num, std::abs(numeric));
      max_diff = std::max(max_diff, std::abs(numeric - analytic[i]));
    }
    result.max_abs_error = std::max(result.max_abs_error, max_diff);
    result.max_rel_error = std::max(result.max_rel_error, max_diff / std::max(max_num, 1e-12));
  }
  return result;
}

Tensor random_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = uniform_real(rng, lo, hi);
  return t;
}

Var random_leaf(Shape shape, Rng& rng, double lo, double hi) {
  return Var(random_tensor(std::move(shape), rng, lo, hi), true);
}

}  // namespace sgi::testing
