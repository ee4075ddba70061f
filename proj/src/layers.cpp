#include "sgi/layers.hpp"

#include <cmath>

namespace sgi::nn {

namespace {

void fill_normal(Tensor& t, Rng& rng, double stddev) {
  for (auto& v : t.values()) v = normal(rng, 0.0, stddev);
}

void normalize_vec(Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  s = std::sqrt(s) + 1e-12;
  for (auto& v : t.values()) v /= s;
}

}  // namespace

void zero_grads(const std::vector<ParamRef>& params) {
  for (const auto& p : params) {
    Var v = p.var;
    v.zero_grad();
  }
}

int64_t count_parameters(const std::vector<ParamRef>& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.var.value().numel();
  return n;
}

Conv2d::Conv2d(int in, int out, int k, ConvOptions o, bool with_bias)
    : in_channels(in), out_channels(out), kernel(k), opt(o) {
  weight = Var(Tensor({out, in, k, k}), true);
  if (with_bias) bias = Var(Tensor({out}), true);
}

void Conv2d::init(Rng& rng, const InitOptions& o) {
  fill_normal(weight.mutable_value(), rng, o.weight_std);
  if (bias.defined()) bias.mutable_value().fill(0.0);
}

void Conv2d::visit(Registry& r) {
  r.param("weight", weight);
  if (bias.defined()) r.param("bias", bias);
}

ConvTranspose2d::ConvTranspose2d(int in, int out, int k, int s, int p, bool with_bias)
    : in_channels(in), out_channels(out), kernel(k), stride(s), padding(p) {
  weight = Var(Tensor({in, out, k, k}), true);
  if (with_bias) bias = Var(Tensor({out}), true);
}

void ConvTranspose2d::init(Rng& rng, const InitOptions& o) {
  fill_normal(weight.mutable_value(), rng, o.weight_std);
  if (bias.defined()) bias.mutable_value().fill(0.0);
}

void ConvTranspose2d::visit(Registry& r) {
  r.param("weight", weight);
  if (bias.defined()) r.param("bias", bias);
}

Linear::Linear(int in, int out, bool with_bias) : in_features(in), out_features(out) {
  weight = Var(Tensor({out, in}), true);
  if (with_bias) bias = Var(Tensor({out}), true);
}

void Linear::init(Rng& rng, const InitOptions& o) {
  fill_normal(weight.mutable_value(), rng, o.weight_std);
  if (bias.defined()) bias.mutable_value().fill(0.0);
}

void Linear::visit(Registry& r) {
  r.param("weight", weight);
  if (bias.defined()) r.param("bias", bias);
}

SNConv2d::SNConv2d(int in, int out, int k, ConvOptions o, bool with_bias) : conv(in, out, k, o, with_bias) {
  u = Tensor({out});
  v = Tensor({static_cast<int64_t>(in) * k * k});
}

void SNConv2d::init(Rng& rng, const InitOptions& o) {
  conv.init(rng, o);
  fill_normal(u, rng, 1.0);
  normalize_vec(u);
  fill_normal(v, rng, 1.0);
  normalize_vec(v);
  power_iteration(1);
}

void SNConv2d::visit(Registry& r) {
  r.param("weight", conv.weight);
  if (conv.bias.defined()) r.param("bias", conv.bias);
  r.buffer("sn_u", &u);
  r.buffer("sn_v", &v);
}

void SNConv2d::power_iteration(int steps) {
  const Tensor& w = conv.weight.value();
  const int64_t rows = w.dim(0);
  const int64_t cols = w.numel() / rows;
  for (int s = 0; s < steps; ++s) {
    for (int64_t c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int64_t r = 0; r < rows; ++r) acc += w[r * cols + c] * u[r];
      v[c] = acc;
    }
    normalize_vec(v);
    for (int64_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (int64_t c = 0; c < cols; ++c) acc += w[r * cols + c] * v[c];
      u[r] = acc;
    }
    normalize_vec(u);
  }
}

double SNConv2d::sigma() const {
  const Tensor& w = conv.weight.value();
  const int64_t rows = w.dim(0);
  const int64_t cols = w.numel() / rows;
  double s = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int64_t c = 0; c < cols; ++c) acc += w[r * cols + c] * v[c];
    s += u[r] * acc;
  }
  return s;
}

Tensor SNConv2d::normalized_weight() const {
  Tensor w = conv.weight.value();
  w *= 1.0 / sigma();
  return w;
}

Var SNConv2d::operator()(const Var& x) {
  if (update_estimate) power_iteration(1);
  Var w = spectral_normalize(conv.weight, u, v);
  return conv2d(x, w, conv.bias, conv.opt);
}

}  // namespace sgi::nn
