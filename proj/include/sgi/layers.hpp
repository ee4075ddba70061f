#pragma once

#include <string>
#include <vector>

#include "sgi/ops.hpp"
#include "sgi/rng.hpp"

namespace sgi::nn {

struct ParamRef {
  std::string name;
  Var var;
};

struct BufferRef {
  std::string name;
  Tensor* tensor;
};

/// Collects named parameters and persistent buffers of a module tree.
class Registry {
 public:
  void param(const std::string& name, const Var& v) { params_.push_back({prefix_ + name, v}); }
  void buffer(const std::string& name, Tensor* t) { buffers_.push_back({prefix_ + name, t}); }

  template <class Module>
  void child(const std::string& name, Module& m) {
    const std::string saved = prefix_;
    prefix_ += name + ".";
    m.visit(*this);
    prefix_ = saved;
  }

  const std::vector<ParamRef>& params() const { return params_; }
  const std::vector<BufferRef>& buffers() const { return buffers_; }

 private:
  std::string prefix_;
  std::vector<ParamRef> params_;
  std::vector<BufferRef> buffers_;
};

template <class Module>
std::vector<ParamRef> parameters_of(Module& m, const std::string& root = "") {
  Registry r;
  if (root.empty()) {
    m.visit(r);
  } else {
    r.child(root, m);
  }
  return r.params();
}

void zero_grads(const std::vector<ParamRef>& params);
int64_t count_parameters(const std::vector<ParamRef>& params);

/// Weights ~ N(0, std), biases zero.
struct InitOptions {
  double weight_std = 0.02;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in, int out, int kernel, ConvOptions opt = {}, bool bias = true);

  Var operator()(const Var& x) const { return conv2d(x, weight, bias, opt); }
  void init(Rng& rng, const InitOptions& o = {});
  void visit(Registry& r);

  int in_channels = 0, out_channels = 0, kernel = 0;
  ConvOptions opt;
  Var weight, bias;
};

class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(int in, int out, int kernel, int stride, int padding, bool bias = true);

  Var operator()(const Var& x) const { return conv_transpose2d(x, weight, bias, stride, padding); }
  void init(Rng& rng, const InitOptions& o = {});
  void visit(Registry& r);

  int in_channels = 0, out_channels = 0, kernel = 0, stride = 1, padding = 0;
  Var weight, bias;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, bool bias = true);

  Var operator()(const Var& x) const { return linear(x, weight, bias); }
  void init(Rng& rng, const InitOptions& o = {});
  void visit(Registry& r);

  int in_features = 0, out_features = 0;
  Var weight, bias;
};

/// Convolution whose weight is divided by its largest singular value,
/// estimated by power iteration on persistent vectors u, v.
class SNConv2d {
 public:
  SNConv2d() = default;
  SNConv2d(int in, int out, int kernel, ConvOptions opt = {}, bool bias = true);

  Var operator()(const Var& x);
  void init(Rng& rng, const InitOptions& o = {});
  void visit(Registry& r);
  void power_iteration(int steps = 1);
  /// Current normalized weight (no graph).
  Tensor normalized_weight() const;
  double sigma() const;

  Conv2d conv;
  Tensor u, v;
  bool update_estimate = true;
};

}  // namespace sgi::nn
