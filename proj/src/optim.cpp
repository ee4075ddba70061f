#include "sgi/optim.hpp"

#include <cmath>

namespace sgi::nn {

Adam::Adam(std::vector<ParamRef> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
  for (const auto& p : params_) {
    m_.emplace(p.name, Tensor::zeros(p.var.shape()));
    v_.emplace(p.name, Tensor::zeros(p.var.shape()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (auto& p : params_) {
    if (!p.var.has_grad()) continue;
    const Tensor& g = p.var.grad();
    Tensor& m = m_.at(p.name);
    Tensor& v = v_.at(p.name);
    Tensor& w = p.var.mutable_value();
    for (int64_t i = 0; i < w.numel(); ++i) {
      m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
      v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
    }
  }
}

}  // namespace sgi::nn
