#include "sgi/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace sgi::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;
using SMapM = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CSMapM = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

struct Geometry {
  int channels, height, width, kh, kw, out_h, out_w;
  ConvOptions opt;
};

// Columns for output rows [oh0, oh1).
void im2col(const double* x, const Geometry& g, int oh0, int oh1, double* col) {
  const int plane = (oh1 - oh0) * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        double* dst = col + static_cast<int64_t>((c * g.kh + ki) * g.kw + kj) * plane;
        for (int oh = oh0; oh < oh1; ++oh) {
          const int ih = oh * g.opt.stride - g.opt.padding + ki * g.opt.dilation;
          double* row = dst + (oh - oh0) * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(row, row + g.out_w, 0.0);
            continue;
          }
          const double* src = x + static_cast<int64_t>(c * g.height + ih) * g.width;
          const int off = kj * g.opt.dilation - g.opt.padding;
          if (g.opt.stride == 1) {
            for (int ow = 0; ow < g.out_w; ++ow) {
              const int iw = ow + off;
              row[ow] = (iw >= 0 && iw < g.width) ? src[iw] : 0.0;
            }
          } else {
            for (int ow = 0; ow < g.out_w; ++ow) {
              const int iw = ow * g.opt.stride + off;
              row[ow] = (iw >= 0 && iw < g.width) ? src[iw] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im(const double* col, const Geometry& g, int oh0, int oh1, double* x) {
  const int plane = (oh1 - oh0) * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const double* src = col + static_cast<int64_t>((c * g.kh + ki) * g.kw + kj) * plane;
        for (int oh = oh0; oh < oh1; ++oh) {
          const int ih = oh * g.opt.stride - g.opt.padding + ki * g.opt.dilation;
          if (ih < 0 || ih >= g.height) continue;
          double* dst = x + static_cast<int64_t>(c * g.height + ih) * g.width;
          const double* row = src + (oh - oh0) * g.out_w;
          const int off = kj * g.opt.dilation - g.opt.padding;
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.opt.stride + off;
            if (iw >= 0 && iw < g.width) dst[iw] += row[ow];
          }
        }
      }
    }
  }
}

// Output rows per im2col band, keeping the column buffer near 4 MB.
int band_rows(const Geometry& g, int64_t rows) {
  const int64_t target = (int64_t{1} << 19) / std::max<int64_t>(rows, 1);
  return static_cast<int>(std::clamp<int64_t>(target / g.out_w, 1, g.out_h));
}

void require4(const Var& x, const char* what) { require_rank(x.value(), 4, what); }

template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (int64_t i = 0; i < in.numel(); ++i) out[i] = f(in[i]);
  return make_result(std::move(out), {x}, [df](Node& self) {
    Node* xn = grad_input(self, 0);
    if (!xn) return;
    const Tensor& xin = xn->value;
    Tensor& gx = xn->grad_buffer();
    for (int64_t i = 0; i < xin.numel(); ++i) gx[i] += self.grad[i] * df(xin[i], self.value[i]);
  });
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, const ConvOptions& opt) {
  require4(x, "conv2d input");
  require4(w, "conv2d weight");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws[1] != xs[1]) {
    throw ShapeError("conv2d: input has " + std::to_string(xs[1]) + " channels, weight expects " +
                     std::to_string(ws[1]));
  }
  const int n_batch = static_cast<int>(xs[0]);
  const int cout = static_cast<int>(ws[0]);
  Geometry g{static_cast<int>(xs[1]), static_cast<int>(xs[2]), static_cast<int>(xs[3]),
             static_cast<int>(ws[2]), static_cast<int>(ws[3]), 0, 0, opt};
  g.out_h = (g.height + 2 * opt.padding - opt.dilation * (g.kh - 1) - 1) / opt.stride + 1;
  g.out_w = (g.width + 2 * opt.padding - opt.dilation * (g.kw - 1) - 1) / opt.stride + 1;
  if (g.out_h <= 0 || g.out_w <= 0) throw ShapeError("conv2d: input " + shape_str(xs) + " too small");
  if (b.defined() && b.value().numel() != cout) throw ShapeError("conv2d: bias size mismatch");

  const int64_t rows = static_cast<int64_t>(g.channels) * g.kh * g.kw;
  const int64_t cols = static_cast<int64_t>(g.out_h) * g.out_w;
  const int64_t in_plane = static_cast<int64_t>(g.channels) * g.height * g.width;
  const bool direct = g.kh == 1 && g.kw == 1 && opt.stride == 1 && opt.padding == 0;

  Tensor out({n_batch, cout, g.out_h, g.out_w});
  CMapM wm(w.value().data(), cout, rows);
  const int bh = direct ? g.out_h : band_rows(g, rows);
  std::vector<double> col(direct ? 0 : static_cast<size_t>(rows * bh * g.out_w));
  for (int n = 0; n < n_batch; ++n) {
    const double* xn = x.value().data() + n * in_plane;
    for (int oh0 = 0; oh0 < g.out_h; oh0 += bh) {
      const int oh1 = std::min(g.out_h, oh0 + bh);
      const int64_t c0 = static_cast<int64_t>(oh0) * g.out_w, len = static_cast<int64_t>(oh1 - oh0) * g.out_w;
      if (!direct) im2col(xn, g, oh0, oh1, col.data());
      CSMapM cm(direct ? xn + c0 : col.data(), rows, len, Eigen::OuterStride<>(direct ? cols : len));
      SMapM ob(out.data() + n * cout * cols + c0, cout, len, Eigen::OuterStride<>(cols));
      ob.noalias() = wm * cm;
    }
    if (b.defined()) {
      MapM om(out.data() + n * cout * cols, cout, cols);
      for (int c = 0; c < cout; ++c) om.row(c).array() += b.value()[c];
    }
  }

  return make_result(std::move(out), {x, w, b}, [g, rows, cols, in_plane, direct, bh, n_batch, cout](Node& self) {
    Node* xn = grad_input(self, 0);
    Node* wn = grad_input(self, 1);
    Node* bn = grad_input(self, 2);
    const Tensor& go = self.grad;
    std::vector<double> col(direct ? 0 : static_cast<size_t>(rows * bh * g.out_w));
    const Tensor& wv = self.inputs[1]->value;
    const Tensor& xv = self.inputs[0]->value;
    CMapM wm(wv.data(), cout, rows);
    if (wn || xn) {
      RowMat dcol;
      for (int n = 0; n < n_batch; ++n) {
        const double* xp = xv.data() + n * in_plane;
        for (int oh0 = 0; oh0 < g.out_h; oh0 += bh) {
          const int oh1 = std::min(g.out_h, oh0 + bh);
          const int64_t c0 = static_cast<int64_t>(oh0) * g.out_w, len = static_cast<int64_t>(oh1 - oh0) * g.out_w;
          CSMapM gm(go.data() + n * cout * cols + c0, cout, len, Eigen::OuterStride<>(cols));
          if (wn) {
            if (!direct) im2col(xp, g, oh0, oh1, col.data());
            CSMapM cm(direct ? xp + c0 : col.data(), rows, len, Eigen::OuterStride<>(direct ? cols : len));
            MapM gw(wn->grad_buffer().data(), cout, rows);
            gw.noalias() += gm * cm.transpose();
          }
          if (xn) {
            Tensor& gx = xn->grad_buffer();
            if (direct) {
              SMapM gxm(gx.data() + n * in_plane + c0, rows, len, Eigen::OuterStride<>(cols));
              gxm.noalias() += wm.transpose() * gm;
            } else {
              dcol.noalias() = wm.transpose() * gm;
              col2im(dcol.data(), g, oh0, oh1, gx.data() + n * in_plane);
            }
          }
        }
      }
    }
    if (bn) {
      Tensor& gb = bn->grad_buffer();
      for (int n = 0; n < n_batch; ++n) {
        for (int c = 0; c < cout; ++c) {
          const double* p = go.data() + (static_cast<int64_t>(n) * cout + c) * cols;
          double s = 0.0;
          for (int64_t i = 0; i < cols; ++i) s += p[i];
          gb[c] += s;
        }
      }
    }
  });
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride, int padding) {
  require4(x, "conv_transpose2d input");
  require4(w, "conv_transpose2d weight");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws[0] != xs[1]) throw ShapeError("conv_transpose2d: channel mismatch " + shape_str(xs) + " vs " + shape_str(ws));
  const int n_batch = static_cast<int>(xs[0]);
  const int cin = static_cast<int>(xs[1]);
  const int h = static_cast<int>(xs[2]);
  const int wd = static_cast<int>(xs[3]);
  const int cout = static_cast<int>(ws[1]);
  const int k = static_cast<int>(ws[2]);
  const int out_h = (h - 1) * stride - 2 * padding + k;
  const int out_w = (wd - 1) * stride - 2 * padding + static_cast<int>(ws[3]);
  if (out_h <= 0 || out_w <= 0) throw ShapeError("conv_transpose2d: empty output");
  if (b.defined() && b.value().numel() != cout) throw ShapeError("conv_transpose2d: bias size mismatch");
  // Geometry of the adjoint convolution: output canvas plays the input role.
  Geometry g{cout, out_h, out_w, k, static_cast<int>(ws[3]), h, wd, ConvOptions{stride, padding, 1}};
  const int64_t rows = static_cast<int64_t>(cout) * g.kh * g.kw;
  const int64_t cols = static_cast<int64_t>(h) * wd;
  const int64_t out_plane = static_cast<int64_t>(cout) * out_h * out_w;

  Tensor out({n_batch, cout, out_h, out_w});
  CMapM wm(w.value().data(), cin, rows);
  const int bh = band_rows(g, rows);
  RowMat col;
  for (int n = 0; n < n_batch; ++n) {
    double* op = out.data() + n * out_plane;
    for (int r0 = 0; r0 < h; r0 += bh) {
      const int r1 = std::min(h, r0 + bh);
      const int64_t c0 = static_cast<int64_t>(r0) * wd, len = static_cast<int64_t>(r1 - r0) * wd;
      CSMapM xm(x.value().data() + n * cin * cols + c0, cin, len, Eigen::OuterStride<>(cols));
      col.noalias() = wm.transpose() * xm;
      col2im(col.data(), g, r0, r1, op);
    }
    if (b.defined()) {
      for (int c = 0; c < cout; ++c) {
        double* p = op + static_cast<int64_t>(c) * out_h * out_w;
        for (int64_t i = 0; i < static_cast<int64_t>(out_h) * out_w; ++i) p[i] += b.value()[c];
      }
    }
  }

  return make_result(std::move(out), {x, w, b}, [g, rows, cols, out_plane, n_batch, cin, cout, bh](Node& self) {
    Node* xn = grad_input(self, 0);
    Node* wn = grad_input(self, 1);
    Node* bn = grad_input(self, 2);
    const Tensor& go = self.grad;
    const Tensor& xv = self.inputs[0]->value;
    CMapM wm(self.inputs[1]->value.data(), cin, rows);
    const int h = g.out_h, wd = g.out_w;
    std::vector<double> col(static_cast<size_t>(rows * bh * wd));
    for (int n = 0; n < n_batch; ++n) {
      if (!xn && !wn) break;
      for (int r0 = 0; r0 < h; r0 += bh) {
        const int r1 = std::min(h, r0 + bh);
        const int64_t c0 = static_cast<int64_t>(r0) * wd, len = static_cast<int64_t>(r1 - r0) * wd;
        im2col(go.data() + n * out_plane, g, r0, r1, col.data());
        CMapM cm(col.data(), rows, len);
        if (xn) {
          SMapM gx(xn->grad_buffer().data() + n * cin * cols + c0, cin, len, Eigen::OuterStride<>(cols));
          gx.noalias() += wm * cm;
        }
        if (wn) {
          MapM gw(wn->grad_buffer().data(), cin, rows);
          CSMapM xm(xv.data() + n * cin * cols + c0, cin, len, Eigen::OuterStride<>(cols));
          gw.noalias() += xm * cm.transpose();
        }
      }
    }
    if (bn) {
      Tensor& gb = bn->grad_buffer();
      const int64_t plane = static_cast<int64_t>(g.height) * g.width;
      for (int n = 0; n < n_batch; ++n) {
        for (int c = 0; c < cout; ++c) {
          const double* p = go.data() + n * out_plane + c * plane;
          double s = 0.0;
          for (int64_t i = 0; i < plane; ++i) s += p[i];
          gb[c] += s;
        }
      }
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_rank(x.value(), 2, "linear input");
  require_rank(w.value(), 2, "linear weight");
  const int64_t n = x.dim(0), f = x.dim(1), o = w.dim(0);
  if (w.dim(1) != f) {
    throw ShapeError("linear: input width " + std::to_string(f) + " vs weight " + shape_str(w.shape()));
  }
  Tensor out({n, o});
  CMapM xm(x.value().data(), n, f);
  CMapM wm(w.value().data(), o, f);
  MapM om(out.data(), n, o);
  om.noalias() = xm * wm.transpose();
  if (b.defined()) {
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < o; ++j) om(i, j) += b.value()[j];
  }
  return make_result(std::move(out), {x, w, b}, [n, f, o](Node& self) {
    CMapM gm(self.grad.data(), n, o);
    if (Node* xn = grad_input(self, 0)) {
      MapM gx(xn->grad_buffer().data(), n, f);
      gx.noalias() += gm * CMapM(self.inputs[1]->value.data(), o, f);
    }
    if (Node* wn = grad_input(self, 1)) {
      MapM gw(wn->grad_buffer().data(), o, f);
      gw.noalias() += gm.transpose() * CMapM(self.inputs[0]->value.data(), n, f);
    }
    if (Node* bn = grad_input(self, 2)) {
      Tensor& gb = bn->grad_buffer();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < o; ++j) gb[j] += gm(i, j);
    }
  });
}

namespace {

// Normalizes groups of `group_len` strided elements. Each group is described by
// (outer index, channel): elements x[(o * C + c) * inner + i] for o in [0, outer).
Var normalize_impl(const Var& x, double eps, bool per_sample) {
  require4(x, "normalization input");
  const auto& s = x.shape();
  const int64_t n = s[0], c = s[1], plane = s[2] * s[3];
  const int64_t groups = per_sample ? n * c : c;
  const int64_t outer = per_sample ? 1 : n;
  const double count = static_cast<double>(per_sample ? plane : n * plane);
  Tensor out(s);
  std::vector<double> inv_std(static_cast<size_t>(groups));
  const Tensor& in = x.value();
  auto base = [per_sample, plane, c](int64_t gidx, int64_t o) {
    // per-sample: group gidx = n*C + c; batch: group gidx = c, iterate o over samples
    return per_sample ? gidx * plane : (o * c + gidx) * plane;
  };
  for (int64_t gi = 0; gi < groups; ++gi) {
    double mu = 0.0;
    for (int64_t o = 0; o < outer; ++o) {
      const double* p = in.data() + base(gi, o);
      for (int64_t i = 0; i < plane; ++i) mu += p[i];
    }
    mu /= count;
    double var = 0.0;
    for (int64_t o = 0; o < outer; ++o) {
      const double* p = in.data() + base(gi, o);
      for (int64_t i = 0; i < plane; ++i) var += (p[i] - mu) * (p[i] - mu);
    }
    var /= count;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(gi)] = is;
    for (int64_t o = 0; o < outer; ++o) {
      const double* p = in.data() + base(gi, o);
      double* q = out.data() + base(gi, o);
      for (int64_t i = 0; i < plane; ++i) q[i] = (p[i] - mu) * is;
    }
  }
  return make_result(std::move(out), {x}, [inv_std = std::move(inv_std), groups, outer, plane, count, base](Node& self) {
    Node* xn = grad_input(self, 0);
    if (!xn) return;
    Tensor& gx = xn->grad_buffer();
    const Tensor& y = self.value;
    const Tensor& gy = self.grad;
    for (int64_t gi = 0; gi < groups; ++gi) {
      double mg = 0.0, mgy = 0.0;
      for (int64_t o = 0; o < outer; ++o) {
        const int64_t b0 = base(gi, o);
        for (int64_t i = 0; i < plane; ++i) {
          mg += gy[b0 + i];
          mgy += gy[b0 + i] * y[b0 + i];
        }
      }
      mg /= count;
      mgy /= count;
      const double is = inv_std[static_cast<size_t>(gi)];
      for (int64_t o = 0; o < outer; ++o) {
        const int64_t b0 = base(gi, o);
        for (int64_t i = 0; i < plane; ++i) gx[b0 + i] += is * (gy[b0 + i] - mg - y[b0 + i] * mgy);
      }
    }
  });
}

}  // namespace

Var instance_norm(const Var& x, double eps) { return normalize_impl(x, eps, true); }
Var batch_norm(const Var& x, double eps) { return normalize_impl(x, eps, false); }

Var relu(const Var& x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& x, double slope) {
  return unary(
      x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

Var elu(const Var& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : std::expm1(v); }, [](double v, double y) { return v > 0 ? 1.0 : y + 1.0; });
}

Var sigmoid(const Var& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(const Var& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(const Var& x, double eps) {
  return unary(
      x, [eps](double v) { return std::log(v + eps); }, [eps](double v, double) { return 1.0 / (v + eps); });
}

Var abs(const Var& x) {
  return unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Var square(const Var& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var softmax_channels(const Var& x) {
  require4(x, "softmax input");
  const auto& s = x.shape();
  const int64_t n = s[0], c = s[1], plane = s[2] * s[3];
  Tensor out(s);
  const Tensor& in = x.value();
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t i = 0; i < plane; ++i) {
      const int64_t b0 = b * c * plane + i;
      double mx = in[b0];
      for (int64_t k = 1; k < c; ++k) mx = std::max(mx, in[b0 + k * plane]);
      double z = 0.0;
      for (int64_t k = 0; k < c; ++k) {
        const double e = std::exp(in[b0 + k * plane] - mx);
        out[b0 + k * plane] = e;
        z += e;
      }
      for (int64_t k = 0; k < c; ++k) out[b0 + k * plane] /= z;
    }
  }
  return make_result(std::move(out), {x}, [n, c, plane](Node& self) {
    Node* xn = grad_input(self, 0);
    if (!xn) return;
    Tensor& gx = xn->grad_buffer();
    const Tensor& y = self.value;
    const Tensor& gy = self.grad;
    for (int64_t b = 0; b < n; ++b) {
      for (int64_t i = 0; i < plane; ++i) {
        const int64_t b0 = b * c * plane + i;
        double dot = 0.0;
        for (int64_t k = 0; k < c; ++k) dot += y[b0 + k * plane] * gy[b0 + k * plane];
        for (int64_t k = 0; k < c; ++k) gx[b0 + k * plane] += y[b0 + k * plane] * (gy[b0 + k * plane] - dot);
      }
    }
  });
}

Var pixel_shuffle(const Var& x, int r) {
  require4(x, "pixel_shuffle input");
  const auto& s = x.shape();
  if (s[1] % (r * r) != 0) throw ShapeError("pixel_shuffle: channels not divisible by r^2 in " + shape_str(s));
  const int64_t n = s[0], cin = s[1], h = s[2], w = s[3], c = cin / (r * r);
  Tensor out({n, c, h * r, w * r});
  // index map: out flat -> in flat
  auto src_index = [=](int64_t b, int64_t ch, int64_t oh, int64_t ow) {
    const int64_t i = oh % r, j = ow % r;
    return ((b * cin + ch * r * r + i * r + j) * h + oh / r) * w + ow / r;
  };
  const Tensor& in = x.value();
  int64_t o = 0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t oh = 0; oh < h * r; ++oh)
        for (int64_t ow = 0; ow < w * r; ++ow) out[o++] = in[src_index(b, ch, oh, ow)];
  return make_result(std::move(out), {x}, [=](Node& self) {
    Node* xn = grad_input(self, 0);
    if (!xn) return;
    Tensor& gx = xn->grad_buffer();
    int64_t o2 = 0;
    for (int64_t b = 0; b < n; ++b)
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t oh = 0; oh < h * r; ++oh)
          for (int64_t ow = 0; ow < w * r; ++ow) gx[src_index(b, ch, oh, ow)] += self.grad[o2++];
  });
}

namespace {

void require_same(const Var& a, const Var& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_bcast(const Var& x, const Var& m, const char* what) {
  require4(x, what);
  require4(m, what);
  const auto& xs = x.shape();
  const auto& ms = m.shape();
  if (ms[0] != xs[0] || ms[1] != 1 || ms[2] != xs[2] || ms[3] != xs[3]) {
    throw ShapeError(std::string(what) + ": cannot broadcast " + shape_str(ms) + " over " + shape_str(xs));
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (Node* an = grad_input(self, 0)) an->accumulate(self.grad);
    if (Node* bn = grad_input(self, 1)) bn->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (Node* an = grad_input(self, 0)) an->accumulate(self.grad);
    if (Node* bn = grad_input(self, 1)) {
      Tensor& g = bn->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Node* an = grad_input(self, 0)) {
      Tensor& g = an->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (Node* bn = grad_input(self, 1)) {
      Tensor& g = bn->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& x, double s) {
  Tensor out = x.value();
  out *= s;
  return make_result(std::move(out), {x}, [s](Node& self) {
    if (Node* xn = grad_input(self, 0)) {
      Tensor g = self.grad;
      g *= s;
      xn->accumulate_moved(std::move(g));
    }
  });
}

Var add_scalar(const Var& x, double s) {
  Tensor out = x.value();
  for (auto& v : out.values()) v += s;
  return make_result(std::move(out), {x}, [](Node& self) {
    if (Node* xn = grad_input(self, 0)) xn->accumulate(self.grad);
  });
}

Var mul_bcast(const Var& x, const Var& m) {
  require_bcast(x, m, "mul_bcast");
  const auto& s = x.shape();
  const int64_t n = s[0], c = s[1], plane = s[2] * s[3];
  Tensor out(s);
  for (int64_t b = 0; b < n; ++b)
    for (int64_t k = 0; k < c; ++k)
      for (int64_t i = 0; i < plane; ++i)
        out[(b * c + k) * plane + i] = x.value()[(b * c + k) * plane + i] * m.value()[b * plane + i];
  return make_result(std::move(out), {x, m}, [n, c, plane](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& mv = self.inputs[1]->value;
    Node* xn = grad_input(self, 0);
    Node* mn = grad_input(self, 1);
    for (int64_t b = 0; b < n; ++b)
      for (int64_t k = 0; k < c; ++k)
        for (int64_t i = 0; i < plane; ++i) {
          const int64_t idx = (b * c + k) * plane + i;
          if (xn) xn->grad_buffer()[idx] += self.grad[idx] * mv[b * plane + i];
          if (mn) mn->grad_buffer()[b * plane + i] += self.grad[idx] * xv[idx];
        }
  });
}

Var div_bcast(const Var& x, const Var& d) {
  require_bcast(x, d, "div_bcast");
  const auto& s = x.shape();
  const int64_t n = s[0], c = s[1], plane = s[2] * s[3];
  Tensor out(s);
  for (int64_t b = 0; b < n; ++b)
    for (int64_t k = 0; k < c; ++k)
      for (int64_t i = 0; i < plane; ++i)
        out[(b * c + k) * plane + i] = x.value()[(b * c + k) * plane + i] / d.value()[b * plane + i];
  return make_result(std::move(out), {x, d}, [n, c, plane](Node& self) {
    const Tensor& dv = self.inputs[1]->value;
    Node* xn = grad_input(self, 0);
    Node* dn = grad_input(self, 1);
    for (int64_t b = 0; b < n; ++b)
      for (int64_t k = 0; k < c; ++k)
        for (int64_t i = 0; i < plane; ++i) {
          const int64_t idx = (b * c + k) * plane + i;
          const double den = dv[b * plane + i];
          if (xn) xn->grad_buffer()[idx] += self.grad[idx] / den;
          if (dn) dn->grad_buffer()[b * plane + i] -= self.grad[idx] * self.value[idx] / den;
        }
  });
}

Var sum_channels(const Var& x) {
  require4(x, "sum_channels");
  const auto& s = x.shape();
  const int64_t n = s[0], c = s[1], plane = s[2] * s[3];
  Tensor out({n, 1, s[2], s[3]});
  for (int64_t b = 0; b < n; ++b)
    for (int64_t k = 0; k < c; ++k)
      for (int64_t i = 0; i < plane; ++i) out[b * plane + i] += x.value()[(b * c + k) * plane + i];
  return make_result(std::move(out), {x}, [n, c, plane](Node& self) {
    Node* xn = grad_input(self, 0);
    if (!xn) return;
    Tensor& g = xn->grad_buffer();
    for (int64_t b = 0; b < n; ++b)
      for (int64_t k = 0; k < c; ++k)
        for (int64_t i = 0; i < plane; ++i) g[(b * c + k) * plane + i] += self.grad[b * plane + i];
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return make_result(Tensor::scalar(s), {x}, [](Node& self) {
    Node* xn = grad_input(self, 0);
    if (!xn) return;
    const double g = self.grad[0];
    for (auto& v : xn->grad_buffer().values()) v += g;
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    Node* xn = grad_input(self, 0);
    if (!xn) return;
    Tensor& g = xn->grad_buffer();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& s0 = xs[0].shape();
  int64_t total = 0;
  for (const auto& x : xs) {
    require4(x, "concat_channels");
    const auto& s = x.shape();
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw ShapeError("concat_channels: incompatible " + shape_str(s) + " vs " + shape_str(s0));
    }
    total += s[1];
  }
  const int64_t n = s0[0], plane = s0[2] * s0[3];
  Tensor out({n, total, s0[2], s0[3]});
  std::vector<int64_t> widths;
  for (int64_t b = 0; b < n; ++b) {
    int64_t off = 0;
    for (const auto& x : xs) {
      const int64_t c = x.dim(1);
      std::copy_n(x.value().data() + b * c * plane, c * plane, out.data() + (b * total + off) * plane);
      off += c;
    }
  }
  for (const auto& x : xs) widths.push_back(x.dim(1));
  return make_result(std::move(out), xs, [widths, n, total, plane](Node& self) {
    int64_t off = 0;
    for (size_t i = 0; i < widths.size(); ++i) {
      const int64_t c = widths[i];
      if (Node* xn = grad_input(self, i)) {
        Tensor& g = xn->grad_buffer();
        for (int64_t b = 0; b < n; ++b) {
          const double* src = self.grad.data() + (b * total + off) * plane;
          double* dst = g.data() + b * c * plane;
          for (int64_t k = 0; k < c * plane; ++k) dst[k] += src[k];
        }
      }
      off += c;
    }
  });
}

Var concat_batch(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_batch: no inputs");
  Shape s = xs[0].shape();
  int64_t total = 0;
  std::vector<int64_t> sizes;
  for (const auto& x : xs) {
    Shape t = x.shape();
    if (t.size() != s.size() || !std::equal(t.begin() + 1, t.end(), s.begin() + 1)) {
      throw ShapeError("concat_batch: incompatible " + shape_str(t) + " vs " + shape_str(s));
    }
    total += t[0];
    sizes.push_back(x.value().numel());
  }
  s[0] = total;
  Tensor out(s);
  int64_t off = 0;
  for (const auto& x : xs) {
    std::copy_n(x.value().data(), x.value().numel(), out.data() + off);
    off += x.value().numel();
  }
  return make_result(std::move(out), xs, [sizes](Node& self) {
    int64_t off2 = 0;
    for (size_t i = 0; i < sizes.size(); ++i) {
      if (Node* xn = grad_input(self, i)) {
        Tensor& g = xn->grad_buffer();
        for (int64_t k = 0; k < sizes[i]; ++k) g[k] += self.grad[off2 + k];
      }
      off2 += sizes[i];
    }
  });
}

Var slice_batch(const Var& x, int64_t begin, int64_t count) {
  Shape s = x.shape();
  if (begin < 0 || count < 0 || begin + count > s[0]) throw ShapeError("slice_batch: range out of bounds");
  const int64_t per = x.value().numel() / s[0];
  s[0] = count;
  Tensor out(s);
  std::copy_n(x.value().data() + begin * per, count * per, out.data());
  return make_result(std::move(out), {x}, [begin, per, count](Node& self) {
    Node* xn = grad_input(self, 0);
    if (!xn) return;
    Tensor& g = xn->grad_buffer();
    for (int64_t k = 0; k < count * per; ++k) g[begin * per + k] += self.grad[k];
  });
}

Var slice_channels(const Var& x, int64_t begin, int64_t count) {
  require4(x, "slice_channels");
  const auto& s = x.shape();
  if (begin < 0 || count < 0 || begin + count > s[1]) throw ShapeError("slice_channels: range out of bounds");
  const int64_t n = s[0], c = s[1], plane = s[2] * s[3];
  Tensor out({n, count, s[2], s[3]});
  for (int64_t b = 0; b < n; ++b)
    std::copy_n(x.value().data() + (b * c + begin) * plane, count * plane, out.data() + b * count * plane);
  return make_result(std::move(out), {x}, [n, c, plane, begin, count](Node& self) {
    Node* xn = grad_input(self, 0);
    if (!xn) return;
    Tensor& g = xn->grad_buffer();
    for (int64_t b = 0; b < n; ++b)
      for (int64_t k = 0; k < count * plane; ++k) g[(b * c + begin) * plane + k] += self.grad[b * count * plane + k];
  });
}

Var avg_pool2d(const Var& x, int kernel, int stride, int padding) {
  require4(x, "avg_pool2d");
  const auto& s = x.shape();
  const int64_t nc = s[0] * s[1];
  const int h = static_cast<int>(s[2]), w = static_cast<int>(s[3]);
  const int oh = (h + 2 * padding - kernel) / stride + 1;
  const int ow = (w + 2 * padding - kernel) / stride + 1;
  Tensor out({s[0], s[1], oh, ow});
  auto window = [=](int o, int limit) {
    const int lo = std::max(0, o * stride - padding);
    const int hi = std::min(limit, o * stride - padding + kernel);
    return std::pair<int, int>(lo, hi);
  };
  for (int64_t p = 0; p < nc; ++p) {
    const double* src = x.value().data() + p * h * w;
    for (int i = 0; i < oh; ++i) {
      auto [r0, r1] = window(i, h);
      for (int j = 0; j < ow; ++j) {
        auto [c0, c1] = window(j, w);
        double acc = 0.0;
        for (int r = r0; r < r1; ++r)
          for (int c = c0; c < c1; ++c) acc += src[r * w + c];
        out[(p * oh + i) * ow + j] = acc / static_cast<double>((r1 - r0) * (c1 - c0));
      }
    }
  }
  return make_result(std::move(out), {x}, [=](Node& self) {
    Node* xn = grad_input(self, 0);
    if (!xn) return;
    Tensor& g = xn->grad_buffer();
    for (int64_t p = 0; p < nc; ++p) {
      double* dst = g.data() + p * h * w;
      for (int i = 0; i < oh; ++i) {
        auto [r0, r1] = window(i, h);
        for (int j = 0; j < ow; ++j) {
          auto [c0, c1] = window(j, w);
          const double gv = self.grad[(p * oh + i) * ow + j] / static_cast<double>((r1 - r0) * (c1 - c0));
          for (int r = r0; r < r1; ++r)
            for (int c = c0; c < c1; ++c) dst[r * w + c] += gv;
        }
      }
    }
  });
}

namespace {

struct Interp {
  int i0, i1;
  double w1;
};

std::vector<Interp> interp_table(int in, int out) {
  std::vector<Interp> t(static_cast<size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    t[static_cast<size_t>(o)] = {i0, i1, src - i0};
  }
  return t;
}

}  // namespace

Var upsample_bilinear(const Var& x, int out_h, int out_w) {
  require4(x, "upsample_bilinear");
  const auto& s = x.shape();
  const int64_t nc = s[0] * s[1];
  const int h = static_cast<int>(s[2]), w = static_cast<int>(s[3]);
  auto ty = interp_table(h, out_h);
  auto tx = interp_table(w, out_w);
  Tensor out({s[0], s[1], out_h, out_w});
  for (int64_t p = 0; p < nc; ++p) {
    const double* src = x.value().data() + p * h * w;
    double* dst = out.data() + p * out_h * out_w;
    for (int i = 0; i < out_h; ++i) {
      const auto& a = ty[static_cast<size_t>(i)];
      for (int j = 0; j < out_w; ++j) {
        const auto& b = tx[static_cast<size_t>(j)];
        const double top = src[a.i0 * w + b.i0] * (1 - b.w1) + src[a.i0 * w + b.i1] * b.w1;
        const double bot = src[a.i1 * w + b.i0] * (1 - b.w1) + src[a.i1 * w + b.i1] * b.w1;
        dst[i * out_w + j] = top * (1 - a.w1) + bot * a.w1;
      }
    }
  }
  return make_result(std::move(out), {x}, [=](Node& self) {
    Node* xn = grad_input(self, 0);
    if (!xn) return;
    Tensor& g = xn->grad_buffer();
    for (int64_t p = 0; p < nc; ++p) {
      double* dst = g.data() + p * h * w;
      const double* go = self.grad.data() + p * out_h * out_w;
      for (int i = 0; i < out_h; ++i) {
        const auto& a = ty[static_cast<size_t>(i)];
        for (int j = 0; j < out_w; ++j) {
          const auto& b = tx[static_cast<size_t>(j)];
          const double gv = go[i * out_w + j];
          dst[a.i0 * w + b.i0] += gv * (1 - a.w1) * (1 - b.w1);
          dst[a.i0 * w + b.i1] += gv * (1 - a.w1) * b.w1;
          dst[a.i1 * w + b.i0] += gv * a.w1 * (1 - b.w1);
          dst[a.i1 * w + b.i1] += gv * a.w1 * b.w1;
        }
      }
    }
  });
}

Var gram(const Var& x) {
  require4(x, "gram");
  const auto& s = x.shape();
  const int64_t n = s[0], c = s[1], hw = s[2] * s[3];
  const double norm = static_cast<double>(c * hw);
  Tensor out({n, c, c});
  for (int64_t b = 0; b < n; ++b) {
    CMapM psi(x.value().data() + b * c * hw, c, hw);
    MapM gm(out.data() + b * c * c, c, c);
    gm.noalias() = psi * psi.transpose();
    gm /= norm;
  }
  return make_result(std::move(out), {x}, [n, c, hw, norm](Node& self) {
    Node* xn = grad_input(self, 0);
    if (!xn) return;
    Tensor& g = xn->grad_buffer();
    for (int64_t b = 0; b < n; ++b) {
      CMapM psi(self.inputs[0]->value.data() + b * c * hw, c, hw);
      CMapM gg(self.grad.data() + b * c * c, c, c);
      MapM gx(g.data() + b * c * hw, c, hw);
      RowMat sym = (gg + gg.transpose()) / norm;
      gx.noalias() += sym * psi;
    }
  });
}

Var place_canonical(const Var& m, const std::vector<Affine>& thetas, int out_h, int out_w) {
  require4(m, "place_canonical");
  const auto& s = m.shape();
  if (s[1] != 1) throw ShapeError("place_canonical: expected single-channel maps, got " + shape_str(s));
  if (static_cast<int64_t>(thetas.size()) != s[0]) throw ShapeError("place_canonical: one affine per sample required");
  const int64_t n = s[0];
  const int h = static_cast<int>(s[2]), w = static_cast<int>(s[3]);
  const int64_t plane = static_cast<int64_t>(out_h) * out_w;
  // index[b*plane + p] = source index within the sample or -1
  std::vector<int32_t> index(static_cast<size_t>(n * plane), -1);
  for (int64_t b = 0; b < n; ++b) {
    const auto& t = thetas[static_cast<size_t>(b)];
    const double det = t[0] * t[4] - t[1] * t[3];
    if (std::abs(det) < 1e-12) throw std::invalid_argument("place_canonical: singular affine");
    for (int y = 0; y < out_h; ++y) {
      for (int x = 0; x < out_w; ++x) {
        const double px = x + 0.5 - t[2];
        const double py = y + 0.5 - t[5];
        const double u = (t[4] * px - t[1] * py) / det;
        const double v = (-t[3] * px + t[0] * py) / det;
        if (u >= 0 && v >= 0 && u < w && v < h) {
          index[static_cast<size_t>(b * plane + y * out_w + x)] =
              static_cast<int32_t>(static_cast<int>(v) * w + static_cast<int>(u));
        }
      }
    }
  }
  Tensor out({n, 1, out_h, out_w});
  const int64_t src_plane = static_cast<int64_t>(h) * w;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t p = 0; p < plane; ++p) {
      const int32_t k = index[static_cast<size_t>(b * plane + p)];
      if (k >= 0) out[b * plane + p] = m.value()[b * src_plane + k];
    }
  return make_result(std::move(out), {m}, [index = std::move(index), n, plane, src_plane](Node& self) {
    Node* mn = grad_input(self, 0);
    if (!mn) return;
    Tensor& g = mn->grad_buffer();
    for (int64_t b = 0; b < n; ++b)
      for (int64_t p = 0; p < plane; ++p) {
        const int32_t k = index[static_cast<size_t>(b * plane + p)];
        if (k >= 0) g[b * src_plane + k] += self.grad[b * plane + p];
      }
  });
}

Var spectral_normalize(const Var& w, const Tensor& u, const Tensor& v) {
  const int64_t rows = w.dim(0);
  const int64_t cols = w.value().numel() / rows;
  if (u.numel() != rows || v.numel() != cols) throw ShapeError("spectral_normalize: u/v size mismatch");
  CMapM wm(w.value().data(), rows, cols);
  Eigen::Map<const Eigen::VectorXd> uv(u.data(), rows), vv(v.data(), cols);
  const double sigma = uv.dot(wm * vv);
  Tensor out = w.value();
  out *= 1.0 / sigma;
  return make_result(std::move(out), {w}, [u, v, sigma, rows, cols](Node& self) {
    Node* wn = grad_input(self, 0);
    if (!wn) return;
    const Tensor& wv = self.inputs[0]->value;
    double inner = 0.0;
    for (int64_t i = 0; i < wv.numel(); ++i) inner += self.grad[i] * wv[i];
    Tensor& g = wn->grad_buffer();
    const double k = inner / (sigma * sigma);
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < cols; ++c) {
        const int64_t i = r * cols + c;
        g[i] += self.grad[i] / sigma - k * u[r] * v[c];
      }
  });
}

}  // namespace sgi::nn
