#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "simcmf/core/gemm.hpp"
#include "simcmf/core/tensor.hpp"

// Differentiable operators. Every function returns a fresh tensor; gradients
// flow to inputs that require them when gradient mode is on.
namespace simcmf::ops {

namespace detail {

using simcmf::detail::Node;

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

inline Node& in(Node& n, std::size_t i) { return *n.inputs[i]; }

inline bool wants(Node& n, std::size_t i) { return n.inputs[i]->requires_grad; }

}  // namespace detail

using simcmf::detail::make_result;

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants(n, k)) continue;
      auto& g = detail::in(n, k).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(),
                  "sub: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& n) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants(n, k)) continue;
      auto& g = detail::in(n, k).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * n.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(),
                  "mul: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& n) {
    auto& x = detail::in(n, 0);
    auto& y = detail::in(n, 1);
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * y.data[i];
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * x.data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return make_result(a.shape(), std::move(out), {&a}, [s](detail::Node& n) {
    auto& g = detail::in(n, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
  });
}

// x[..., D] + row[D], broadcast over leading dimensions.
inline Tensor add_row(const Tensor& x, const Tensor& row) {
  const std::int64_t d = row.numel();
  detail::require(x.ndim() >= 1 && x.dim(-1) == d,
                  "add_row: " + shape_str(x.shape()) + " + " + shape_str(row.shape()));
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto r = row.data();
  const std::int64_t rows = x.numel() / d;
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < d; ++j) out[i * d + j] += r[j];
  return make_result(x.shape(), std::move(out), {&x, &row}, [rows, d](detail::Node& n) {
    if (detail::wants(n, 0)) {
      auto& g = detail::in(n, 0).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (detail::wants(n, 1)) {
      auto& g = detail::in(n, 1).grad_buffer();
      for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < d; ++j) g[j] += n.grad[i * d + j];
    }
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::require(shape_numel(shape) == x.numel(),
                  "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {&x}, [](detail::Node& n) {
    auto& g = detail::in(n, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

// [A, B] -> [B, A]
inline Tensor transpose2d(const Tensor& x) {
  detail::require(x.ndim() == 2, "transpose2d: expected 2-D, got " + shape_str(x.shape()));
  const auto a = x.dim(0), b = x.dim(1);
  auto out = simcmf::detail::transposed(x.ptr(), a, b);
  return make_result({b, a}, std::move(out), {&x}, [a, b](detail::Node& n) {
    auto& g = detail::in(n, 0).grad_buffer();
    for (std::int64_t i = 0; i < a; ++i)
      for (std::int64_t j = 0; j < b; ++j) g[i * b + j] += n.grad[j * a + i];
  });
}

// Copy of y[N, C] with delta[N, L] added to columns [offset, offset + L).
inline Tensor add_columns(const Tensor& y, const Tensor& delta, std::int64_t offset) {
  detail::require(y.ndim() == 2 && delta.ndim() == 2 && y.dim(0) == delta.dim(0) &&
                      offset >= 0 && offset + delta.dim(1) <= y.dim(1),
                  "add_columns: " + shape_str(y.shape()) + " += " + shape_str(delta.shape()) +
                      " at " + std::to_string(offset));
  const auto rows = y.dim(0), cols = y.dim(1), len = delta.dim(1);
  std::vector<double> out(y.data().begin(), y.data().end());
  const auto dd = delta.data();
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < len; ++j) out[i * cols + offset + j] += dd[i * len + j];
  return make_result(y.shape(), std::move(out), {&y, &delta},
                     [rows, cols, len, offset](detail::Node& n) {
                       if (detail::wants(n, 0)) {
                         auto& g = detail::in(n, 0).grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                       }
                       if (detail::wants(n, 1)) {
                         auto& g = detail::in(n, 1).grad_buffer();
                         for (std::int64_t i = 0; i < rows; ++i)
                           for (std::int64_t j = 0; j < len; ++j)
                             g[i * len + j] += n.grad[i * cols + offset + j];
                       }
                     });
}

// x[N, in] W[out, in]^T + bias[out]
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor()) {
  detail::require(x.ndim() == 2 && weight.ndim() == 2 && x.dim(1) == weight.dim(1),
                  "linear: input " + shape_str(x.shape()) + " weight " +
                      shape_str(weight.shape()));
  const auto rows = x.dim(0), fin = x.dim(1), fout = weight.dim(0);
  std::vector<double> out(static_cast<std::size_t>(rows * fout));
  simcmf::detail::gemm_nt(rows, fout, fin, x.ptr(), weight.ptr(), out.data(), false);
  const bool has_bias = bias.defined();
  if (has_bias) {
    detail::require(bias.numel() == fout, "linear: bias " + shape_str(bias.shape()));
    const auto bd = bias.data();
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < fout; ++j) out[i * fout + j] += bd[j];
  }
  auto backward = [rows, fin, fout, has_bias](detail::Node& n) {
    auto& xn = detail::in(n, 0);
    auto& wn = detail::in(n, 1);
    if (xn.requires_grad)
      simcmf::detail::gemm_nn(rows, fin, fout, n.grad.data(), wn.data.data(),
                              xn.grad_buffer().data(), true);
    if (wn.requires_grad)
      simcmf::detail::gemm_tn(fout, fin, rows, n.grad.data(), xn.data.data(),
                              wn.grad_buffer().data(), true);
    if (has_bias && detail::wants(n, 2)) {
      auto& g = detail::in(n, 2).grad_buffer();
      for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < fout; ++j) g[j] += n.grad[i * fout + j];
    }
  };
  if (has_bias) return make_result({rows, fout}, std::move(out), {&x, &weight, &bias}, backward);
  return make_result({rows, fout}, std::move(out), {&x, &weight}, backward);
}

// a[M, K] b[K, N]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                  "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), nn = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * nn));
  simcmf::detail::gemm_nn(m, nn, k, a.ptr(), b.ptr(), out.data(), false);
  return make_result({m, nn}, std::move(out), {&a, &b}, [m, k, nn](detail::Node& n) {
    auto& an = detail::in(n, 0);
    auto& bn = detail::in(n, 1);
    if (an.requires_grad)
      simcmf::detail::gemm_nt(m, k, nn, n.grad.data(), bn.data.data(), an.grad_buffer().data(),
                              true);
    if (bn.requires_grad)
      simcmf::detail::gemm_tn(k, nn, m, an.data.data(), n.grad.data(), bn.grad_buffer().data(),
                              true);
  });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0 || std::isnan(v) ? v : 0.0;  // NaN propagates
  return make_result(x.shape(), std::move(out), {&x}, [](detail::Node& n) {
    auto& xn = detail::in(n, 0);
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xn.data[i] > 0.0) g[i] += n.grad[i];
  });
}

// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  return make_result(x.shape(), std::move(out), {&x}, [](detail::Node& n) {
    auto& xn = detail::in(n, 0);
    auto& g = xn.grad_buffer();
    const double inv_sqrt_2pi = 0.5 * M_2_SQRTPI * M_SQRT1_2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xn.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += n.grad[i] * (cdf + v * pdf);
    }
  });
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = sigmoid_value(v);
  auto result = make_result(x.shape(), out, {&x}, [](detail::Node& n) {
    auto& g = detail::in(n, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = n.data[i];
      g[i] += n.grad[i] * s * (1.0 - s);
    }
  });
  return result;
}

// Normalizes each row of x[N, D] over D.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto d = x.dim(-1);
  detail::require(gamma.numel() == d && beta.numel() == d,
                  "layer_norm: input " + shape_str(x.shape()) + " gamma " +
                      shape_str(gamma.shape()));
  const auto rows = x.numel() / d;
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  std::vector<double> xhat(out.size());
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::int64_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  return make_result(x.shape(), std::move(out), {&x, &gamma, &beta},
                     [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                         detail::Node& n) {
                       auto& xn = detail::in(n, 0);
                       auto& gn = detail::in(n, 1);
                       auto& bn = detail::in(n, 2);
                       if (gn.requires_grad) {
                         auto& g = gn.grad_buffer();
                         for (std::int64_t r = 0; r < rows; ++r)
                           for (std::int64_t j = 0; j < d; ++j)
                             g[j] += n.grad[r * d + j] * xhat[r * d + j];
                       }
                       if (bn.requires_grad) {
                         auto& g = bn.grad_buffer();
                         for (std::int64_t r = 0; r < rows; ++r)
                           for (std::int64_t j = 0; j < d; ++j) g[j] += n.grad[r * d + j];
                       }
                       if (xn.requires_grad) {
                         auto& g = xn.grad_buffer();
                         std::vector<double> dxhat(static_cast<std::size_t>(d));
                         for (std::int64_t r = 0; r < rows; ++r) {
                           double mean_dx = 0.0, mean_dxx = 0.0;
                           for (std::int64_t j = 0; j < d; ++j) {
                             dxhat[j] = n.grad[r * d + j] * gn.data[j];
                             mean_dx += dxhat[j];
                             mean_dxx += dxhat[j] * xhat[r * d + j];
                           }
                           mean_dx /= static_cast<double>(d);
                           mean_dxx /= static_cast<double>(d);
                           for (std::int64_t j = 0; j < d; ++j)
                             g[r * d + j] += inv_std[r] *
                                             (dxhat[j] - mean_dx - xhat[r * d + j] * mean_dxx);
                         }
                       }
                     });
}

// Multi-head scaled dot-product attention. q[Nq, D], k[Nk, D], v[Nk, D];
// heads split D evenly. Returns [Nq, D].
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t heads) {
  detail::require(q.ndim() == 2 && k.ndim() == 2 && v.ndim() == 2 && q.dim(1) == k.dim(1) &&
                      k.shape() == v.shape(),
                  "attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " +
                      shape_str(v.shape()));
  const auto nq = q.dim(0), nk = k.dim(0), d = q.dim(1);
  detail::require(heads > 0 && d % heads == 0,
                  "attention: width " + std::to_string(d) + " not divisible by heads " +
                      std::to_string(heads));
  const auto dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> out(static_cast<std::size_t>(nq * d), 0.0);
  std::vector<double> probs(static_cast<std::size_t>(heads * nq * nk));
  using simcmf::detail::dgemm;
  for (std::int64_t h = 0; h < heads; ++h) {
    double* p = probs.data() + h * nq * nk;
    dgemm(CblasNoTrans, CblasTrans, nq, nk, dh, q.ptr() + h * dh, d, k.ptr() + h * dh, d, p, false);
    for (std::int64_t i = 0; i < nq; ++i) {
      double* row = p + i * nk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < nk; ++j) mx = std::max(mx, row[j] * sc);
      double z = 0.0;
      for (std::int64_t j = 0; j < nk; ++j) {
        row[j] = std::exp(row[j] * sc - mx);
        z += row[j];
      }
      for (std::int64_t j = 0; j < nk; ++j) row[j] /= z;
    }
    dgemm(CblasNoTrans, CblasNoTrans, nq, dh, nk, p, nk, v.ptr() + h * dh, d, out.data() + h * dh,
          false, d);
  }
  return make_result(
      {nq, d}, std::move(out), {&q, &k, &v},
      [nq, nk, d, heads, dh, sc, probs = std::move(probs)](detail::Node& n) {
        auto& qn = detail::in(n, 0);
        auto& kn = detail::in(n, 1);
        auto& vn = detail::in(n, 2);
        std::vector<double> ds(static_cast<std::size_t>(nq * nk));
        double* gq = qn.requires_grad ? qn.grad_buffer().data() : nullptr;
        double* gk = kn.requires_grad ? kn.grad_buffer().data() : nullptr;
        double* gv = vn.requires_grad ? vn.grad_buffer().data() : nullptr;
        for (std::int64_t h = 0; h < heads; ++h) {
          const double* p = probs.data() + h * nq * nk;
          const double* go = n.grad.data() + h * dh;
          if (gv) dgemm(CblasTrans, CblasNoTrans, nk, dh, nq, p, nk, go, d, gv + h * dh, true, d);
          if (!gq && !gk) continue;
          // dP = dO V^T, then dS = P * (dP - rowsum(dP * P)) * scale.
          dgemm(CblasNoTrans, CblasTrans, nq, nk, dh, go, d, vn.data.data() + h * dh, d, ds.data(),
                false);
          for (std::int64_t i = 0; i < nq; ++i) {
            double* row = ds.data() + i * nk;
            const double* prow = p + i * nk;
            double dot = 0.0;
            for (std::int64_t j = 0; j < nk; ++j) dot += row[j] * prow[j];
            for (std::int64_t j = 0; j < nk; ++j) row[j] = prow[j] * (row[j] - dot) * sc;
          }
          if (gq)
            dgemm(CblasNoTrans, CblasNoTrans, nq, dh, nk, ds.data(), nk, kn.data.data() + h * dh, d,
                  gq + h * dh, true, d);
          if (gk)
            dgemm(CblasTrans, CblasNoTrans, nk, dh, nq, ds.data(), nk, qn.data.data() + h * dh, d,
                  gk + h * dh, true, d);
        }
      });
}

namespace detail {

struct ConvGeometry {
  std::int64_t channels, height, width, kh, kw, stride, pad, out_h, out_w;
  std::int64_t rows() const { return channels * kh * kw; }
  std::int64_t cols() const { return out_h * out_w; }
};

inline std::vector<double> im2col(const double* x, const ConvGeometry& g) {
  std::vector<double> col(static_cast<std::size_t>(g.rows() * g.cols()), 0.0);
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t a = 0; a < g.kh; ++a)
      for (std::int64_t b = 0; b < g.kw; ++b) {
        double* dst = col.data() + ((c * g.kh + a) * g.kw + b) * g.cols();
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + a;
          if (iy < 0 || iy >= g.height) continue;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + b;
            if (ix < 0 || ix >= g.width) continue;
            dst[oy * g.out_w + ox] = x[(c * g.height + iy) * g.width + ix];
          }
        }
      }
  return col;
}

inline void col2im_add(const double* col, const ConvGeometry& g, double* x) {
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t a = 0; a < g.kh; ++a)
      for (std::int64_t b = 0; b < g.kw; ++b) {
        const double* src = col + ((c * g.kh + a) * g.kw + b) * g.cols();
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + a;
          if (iy < 0 || iy >= g.height) continue;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + b;
            if (ix < 0 || ix >= g.width) continue;
            x[(c * g.height + iy) * g.width + ix] += src[oy * g.out_w + ox];
          }
        }
      }
}

}  // namespace detail

// x[C, H, W] * weight[O, C, kh, kw] (+ bias[O]) -> [O, Ho, Wo], symmetric zero
// padding.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor(),
                     std::int64_t stride = 1, std::int64_t pad = 0) {
  detail::require(x.ndim() == 3 && weight.ndim() == 4 && weight.dim(1) == x.dim(0),
                  "conv2d: input " + shape_str(x.shape()) + " weight " +
                      shape_str(weight.shape()));
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), weight.dim(2), weight.dim(3),
                         stride,   pad,      0,        0};
  g.out_h = (g.height + 2 * pad - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kw) / stride + 1;
  detail::require(g.out_h > 0 && g.out_w > 0, "conv2d: kernel larger than padded input");
  const auto oc = weight.dim(0);
  auto col = detail::im2col(x.ptr(), g);
  std::vector<double> out(static_cast<std::size_t>(oc * g.cols()));
  simcmf::detail::gemm_nn(oc, g.cols(), g.rows(), weight.ptr(), col.data(), out.data(), false);
  const bool has_bias = bias.defined();
  if (has_bias) {
    detail::require(bias.numel() == oc, "conv2d: bias " + shape_str(bias.shape()));
    for (std::int64_t o = 0; o < oc; ++o)
      for (std::int64_t p = 0; p < g.cols(); ++p) out[o * g.cols() + p] += bias.data()[o];
  }
  // The column buffer is only needed for the weight gradient.
  if (!weight.requires_grad()) col.clear();
  auto backward = [g, oc, has_bias, col = std::move(col)](detail::Node& n) {
    auto& xn = detail::in(n, 0);
    auto& wn = detail::in(n, 1);
    if (wn.requires_grad)
      simcmf::detail::gemm_nt(oc, g.rows(), g.cols(), n.grad.data(), col.data(),
                              wn.grad_buffer().data(), true);
    if (xn.requires_grad) {
      std::vector<double> dcol(static_cast<std::size_t>(g.rows() * g.cols()));
      simcmf::detail::gemm_tn(g.rows(), g.cols(), oc, wn.data.data(), n.grad.data(),
                              dcol.data(), false);
      detail::col2im_add(dcol.data(), g, xn.grad_buffer().data());
    }
    if (has_bias && detail::wants(n, 2)) {
      auto& gb = detail::in(n, 2).grad_buffer();
      for (std::int64_t o = 0; o < oc; ++o)
        for (std::int64_t p = 0; p < g.cols(); ++p) gb[o] += n.grad[o * g.cols() + p];
    }
  };
  Shape shape{oc, g.out_h, g.out_w};
  if (has_bias) return make_result(shape, std::move(out), {&x, &weight, &bias}, backward);
  return make_result(shape, std::move(out), {&x, &weight}, backward);
}

// Transposed convolution with kernel 2 and stride 2: x[C, H, W] with
// weight[C, O, 2, 2] -> [O, 2H, 2W].
inline Tensor conv_transpose2x2(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require(x.ndim() == 3 && weight.ndim() == 4 && weight.dim(0) == x.dim(0) &&
                      weight.dim(2) == 2 && weight.dim(3) == 2 && bias.numel() == weight.dim(1),
                  "conv_transpose2x2: input " + shape_str(x.shape()) + " weight " +
                      shape_str(weight.shape()));
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2), oc = weight.dim(1);
  const auto hw = h * w, o4 = oc * 4;
  std::vector<double> z(static_cast<std::size_t>(o4 * hw));
  simcmf::detail::gemm_tn(o4, hw, c, weight.ptr(), x.ptr(), z.data(), false);
  std::vector<double> out(static_cast<std::size_t>(oc * 4 * hw));
  const auto bd = bias.data();
  for (std::int64_t o = 0; o < oc; ++o)
    for (std::int64_t a = 0; a < 2; ++a)
      for (std::int64_t b = 0; b < 2; ++b) {
        const double* zr = z.data() + (o * 4 + a * 2 + b) * hw;
        for (std::int64_t i = 0; i < h; ++i)
          for (std::int64_t j = 0; j < w; ++j)
            out[(o * 2 * h + 2 * i + a) * 2 * w + 2 * j + b] = zr[i * w + j] + bd[o];
      }
  return make_result({oc, 2 * h, 2 * w}, std::move(out), {&x, &weight, &bias},
                     [c, h, w, oc, hw, o4](detail::Node& n) {
                       std::vector<double> dz(static_cast<std::size_t>(o4 * hw));
                       for (std::int64_t o = 0; o < oc; ++o)
                         for (std::int64_t a = 0; a < 2; ++a)
                           for (std::int64_t b = 0; b < 2; ++b) {
                             double* zr = dz.data() + (o * 4 + a * 2 + b) * hw;
                             for (std::int64_t i = 0; i < h; ++i)
                               for (std::int64_t j = 0; j < w; ++j)
                                 zr[i * w + j] =
                                     n.grad[(o * 2 * h + 2 * i + a) * 2 * w + 2 * j + b];
                           }
                       auto& xn = detail::in(n, 0);
                       auto& wn = detail::in(n, 1);
                       if (xn.requires_grad)
                         simcmf::detail::gemm_nn(c, hw, o4, wn.data.data(), dz.data(),
                                                 xn.grad_buffer().data(), true);
                       if (wn.requires_grad)
                         simcmf::detail::gemm_nt(c, o4, hw, xn.data.data(), dz.data(),
                                                 wn.grad_buffer().data(), true);
                       if (detail::wants(n, 2)) {
                         auto& gb = detail::in(n, 2).grad_buffer();
                         for (std::int64_t o = 0; o < oc; ++o)
                           for (std::int64_t p = 0; p < 4 * hw; ++p) gb[o] += dz[o * 4 * hw + p];
                       }
                     });
}

// Stacks 2-D tensors with equal column counts along dimension 0.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const auto cols = parts.front().dim(1);
  std::int64_t rows = 0;
  std::vector<std::int64_t> offsets;
  for (const auto& p : parts) {
    detail::require(p.ndim() == 2 && p.dim(1) == cols,
                    "concat_rows: part " + shape_str(p.shape()) + " vs width " +
                        std::to_string(cols));
    offsets.push_back(rows * cols);
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(rows * cols));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result({rows, cols}, std::move(out), parts,
                     [offsets = std::move(offsets)](detail::Node& n) {
                       for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                         if (!detail::wants(n, k)) continue;
                         auto& g = detail::in(n, k).grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[offsets[k] + i];
                       }
                     });
}

// Rows [begin, end) of a 2-D tensor.
inline Tensor slice_rows(const Tensor& x, std::int64_t begin, std::int64_t end) {
  detail::require(x.ndim() == 2 && 0 <= begin && begin <= end && end <= x.dim(0),
                  "slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") of " + shape_str(x.shape()));
  const auto cols = x.dim(1);
  std::vector<double> out(x.data().begin() + begin * cols, x.data().begin() + end * cols);
  return make_result({end - begin, cols}, std::move(out), {&x}, [begin, cols](detail::Node& n) {
    auto& g = detail::in(n, 0).grad_buffer();
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[begin * cols + i] += n.grad[i];
  });
}

// Columns [begin, end) of a 2-D tensor.
inline Tensor slice_columns(const Tensor& x, std::int64_t begin, std::int64_t end) {
  detail::require(x.ndim() == 2 && 0 <= begin && begin <= end && end <= x.dim(1),
                  "slice_columns: [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") of " + shape_str(x.shape()));
  const auto rows = x.dim(0), cols = x.dim(1), len = end - begin;
  std::vector<double> out(static_cast<std::size_t>(rows * len));
  const auto xd = x.data();
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < len; ++j) out[i * len + j] = xd[i * cols + begin + j];
  return make_result({rows, len}, std::move(out), {&x}, [rows, cols, len, begin](detail::Node& n) {
    auto& g = detail::in(n, 0).grad_buffer();
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < len; ++j) g[i * cols + begin + j] += n.grad[i * len + j];
  });
}

// Bilinear resampling of x[C, H, W] to [C, out_h, out_w] with half-pixel
// centers (align_corners = false).
inline Tensor resize_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  detail::require(x.ndim() == 3 && out_h > 0 && out_w > 0,
                  "resize_bilinear: input " + shape_str(x.shape()));
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
  struct Tap {
    std::int64_t i0, i1;
    double l1;
  };
  auto taps = [](std::int64_t in, std::int64_t out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double s = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * s - 0.5;
      if (src < 0.0) src = 0.0;
      auto i0 = static_cast<std::int64_t>(std::floor(src));
      if (i0 > in - 1) i0 = in - 1;
      const auto i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
  };
  auto ty = taps(h, out_h);
  auto tx = taps(w, out_w);
  std::vector<double> out(static_cast<std::size_t>(c * out_h * out_w));
  const double* xd = x.ptr();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        const double* base = xd + ch * h * w;
        out[(ch * out_h + oy) * out_w + ox] =
            (1 - a.l1) * ((1 - b.l1) * base[a.i0 * w + b.i0] + b.l1 * base[a.i0 * w + b.i1]) +
            a.l1 * ((1 - b.l1) * base[a.i1 * w + b.i0] + b.l1 * base[a.i1 * w + b.i1]);
      }
    }
  return make_result({c, out_h, out_w}, std::move(out), {&x},
                     [c, h, w, out_h, out_w, ty = std::move(ty), tx = std::move(tx)](
                         detail::Node& n) {
                       auto& g = detail::in(n, 0).grad_buffer();
                       for (std::int64_t ch = 0; ch < c; ++ch)
                         for (std::int64_t oy = 0; oy < out_h; ++oy) {
                           const auto& a = ty[oy];
                           for (std::int64_t ox = 0; ox < out_w; ++ox) {
                             const auto& b = tx[ox];
                             const double go = n.grad[(ch * out_h + oy) * out_w + ox];
                             double* base = g.data() + ch * h * w;
                             base[a.i0 * w + b.i0] += go * (1 - a.l1) * (1 - b.l1);
                             base[a.i0 * w + b.i1] += go * (1 - a.l1) * b.l1;
                             base[a.i1 * w + b.i0] += go * a.l1 * (1 - b.l1);
                             base[a.i1 * w + b.i1] += go * a.l1 * b.l1;
                           }
                         }
                     });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({1}, {s}, {&x}, [](detail::Node& n) {
    auto& g = detail::in(n, 0).grad_buffer();
    for (auto& v : g) v += n.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// Mean sigmoid focal loss over all elements; target in [0, 1].
inline Tensor sigmoid_focal_loss(const Tensor& logits, const Tensor& target, double alpha = 0.25,
                                 double gamma = 2.0) {
  detail::require(logits.numel() == target.numel(),
                  "sigmoid_focal_loss: logits " + shape_str(logits.shape()) + " target " +
                      shape_str(target.shape()));
  const auto n_el = logits.numel();
  const auto xd = logits.data();
  const auto td = target.data();
  std::vector<double> dx(static_cast<std::size_t>(n_el));
  double total = 0.0;
  for (std::int64_t i = 0; i < n_el; ++i) {
    const double x = xd[i], t = td[i];
    const double p = sigmoid_value(x);
    const double ce = std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    const double pt = p * t + (1 - p) * (1 - t);
    const double at = alpha >= 0 ? alpha * t + (1 - alpha) * (1 - t) : 1.0;
    const double m = 1 - pt;
    total += at * ce * std::pow(m, gamma);
    const double dm = -(2 * t - 1) * p * (1 - p);
    const double dmg = gamma == 0.0 ? 0.0 : gamma * std::pow(m, gamma - 1.0) * dm;
    dx[i] = at * ((p - t) * std::pow(m, gamma) + ce * dmg) / static_cast<double>(n_el);
  }
  return make_result({1}, {total / static_cast<double>(n_el)}, {&logits},
                     [dx = std::move(dx)](detail::Node& n) {
                       auto& g = detail::in(n, 0).grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * dx[i];
                     });
}

// 1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1) with p = sigmoid(logits).
inline Tensor dice_loss(const Tensor& logits, const Tensor& target) {
  detail::require(logits.numel() == target.numel(),
                  "dice_loss: logits " + shape_str(logits.shape()) + " target " +
                      shape_str(target.shape()));
  const auto n_el = logits.numel();
  const auto xd = logits.data();
  const auto td = target.data();
  std::vector<double> p(static_cast<std::size_t>(n_el));
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (std::int64_t i = 0; i < n_el; ++i) {
    p[i] = sigmoid_value(xd[i]);
    inter += p[i] * td[i];
    sp += p[i];
    st += td[i];
  }
  const double num = 2 * inter + 1, den = sp + st + 1;
  std::vector<double> dx(static_cast<std::size_t>(n_el));
  for (std::int64_t i = 0; i < n_el; ++i) {
    const double dp = -(2 * td[i] * den - num) / (den * den);
    dx[i] = dp * p[i] * (1 - p[i]);
  }
  return make_result({1}, {1 - num / den}, {&logits}, [dx = std::move(dx)](detail::Node& n) {
    auto& g = detail::in(n, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * dx[i];
  });
}

inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  detail::require(pred.numel() == target.numel(),
                  "mse_loss: pred " + shape_str(pred.shape()) + " target " +
                      shape_str(target.shape()));
  return mean(mul(sub(pred, target), sub(pred, target)));
}

}  // namespace simcmf::ops
