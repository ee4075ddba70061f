#pragma once

#include <map>
#include <string>
#include <vector>

#include "sgi/layers.hpp"

namespace sgi::nn {

struct AdamOptions {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed parameter list; state is keyed by parameter name.
class Adam {
 public:
  Adam(std::vector<ParamRef> params, AdamOptions opt);

  /// Applies one update to every parameter that has a gradient.
  void step();
  void zero_grad() { zero_grads(params_); }

  const std::vector<ParamRef>& params() const { return params_; }
  const AdamOptions& options() const { return opt_; }
  void set_lr(double lr) { opt_.lr = lr; }
  int64_t steps() const { return t_; }

  // State access for checkpointing.
  void set_steps(int64_t t) { t_ = t; }
  std::map<std::string, Tensor>& first_moments() { return m_; }
  std::map<std::string, Tensor>& second_moments() { return v_; }

 private:
  std::vector<ParamRef> params_;
  AdamOptions opt_;
  int64_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace sgi::nn
