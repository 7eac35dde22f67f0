#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "kernels.hpp"
#include "skillformer/autograd.hpp"
#include "skillformer/error.hpp"

namespace skillformer {

namespace {

Tape& common_tape(Var a, Var b) {
  if (!a.valid() || !b.valid()) throw ContractError("op received an unbound Var");
  if (&a.tape() != &b.tape()) throw ContractError("op mixes values from different tapes");
  return a.tape();
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw ContractError("op received an unbound Var");
  return a.tape();
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

/// Index of `b`'s element feeding each element of `a` under broadcasting.
/// Empty map means identical shapes; `suffix` means b's shape is a trailing
/// block of a's shape, so the index is i % numel(b).
struct Broadcast {
  bool identical = false;
  bool suffix = false;
  std::size_t b_numel = 0;
  std::vector<std::size_t> map;

  [[nodiscard]] std::size_t operator()(std::size_t i) const {
    if (identical) return i;
    if (suffix) return i % b_numel;
    return map[i];
  }
};

Broadcast make_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  bc.b_numel = shape_numel(b);
  if (a == b) {
    bc.identical = true;
    return bc;
  }
  if (b.size() > a.size()) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_to_string(b) + " to " + shape_to_string(a));
  }
  const std::size_t lead = a.size() - b.size();
  bool is_suffix = true;
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i] != a[lead + i]) {
      is_suffix = false;
      if (b[i] != 1) {
        throw DimensionError(std::string(op) + ": cannot broadcast " + shape_to_string(b) + " to " +
                             shape_to_string(a));
      }
    }
  }
  if (is_suffix) {
    bc.suffix = true;
    return bc;
  }
  std::vector<std::size_t> b_strides(a.size(), 0);
  const auto raw = row_major_strides(b);
  for (std::size_t i = 0; i < b.size(); ++i) b_strides[lead + i] = b[i] == 1 ? 0 : raw[i];
  const std::size_t n = shape_numel(a);
  bc.map.resize(n);
  std::vector<std::size_t> idx(a.size(), 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    bc.map[flat] = off;
    for (std::size_t d = a.size(); d-- > 0;) {
      ++idx[d];
      off += b_strides[d];
      if (idx[d] < a[d]) break;
      off -= b_strides[d] * a[d];
      idx[d] = 0;
    }
  }
  return bc;
}

std::size_t last_dim(const Tensor& t, const char* op) {
  if (t.rank() == 0) throw DimensionError(std::string(op) + " needs a tensor of rank >= 1");
  return t.shape().back();
}

void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace

Var add(Var a, Var b) {
  Tape& tape = common_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Broadcast bc = make_broadcast(av.shape(), bv.shape(), "add");
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[bc(i)];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, "add",
                     [ia, ib, bc = std::move(bc)](Tape& t, std::size_t, std::span<const double> g) {
                       if (t.needs_grad(ia)) {
                         auto& da = t.adjoint(ia);
                         for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                       }
                       if (t.needs_grad(ib)) {
                         auto& db = t.adjoint(ib);
                         for (std::size_t i = 0; i < g.size(); ++i) db[bc(i)] += g[i];
                       }
                     });
}

Var sub(Var a, Var b) {
  Tape& tape = common_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Broadcast bc = make_broadcast(av.shape(), bv.shape(), "sub");
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[bc(i)];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, "sub",
                     [ia, ib, bc = std::move(bc)](Tape& t, std::size_t, std::span<const double> g) {
                       if (t.needs_grad(ia)) {
                         auto& da = t.adjoint(ia);
                         for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                       }
                       if (t.needs_grad(ib)) {
                         auto& db = t.adjoint(ib);
                         for (std::size_t i = 0; i < g.size(); ++i) db[bc(i)] -= g[i];
                       }
                     });
}

Var mul(Var a, Var b) {
  Tape& tape = common_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Broadcast bc = make_broadcast(av.shape(), bv.shape(), "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[bc(i)];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, "mul",
                     [ia, ib, bc = std::move(bc)](Tape& t, std::size_t, std::span<const double> g) {
                       const Tensor& x = t.value(ia);
                       const Tensor& y = t.value(ib);
                       if (t.needs_grad(ia)) {
                         auto& da = t.adjoint(ia);
                         for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[bc(i)];
                       }
                       if (t.needs_grad(ib)) {
                         auto& db = t.adjoint(ib);
                         for (std::size_t i = 0; i < g.size(); ++i) db[bc(i)] += g[i] * x[i];
                       }
                     });
}

Var scale(Var a, double factor) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  const std::size_t ia = a.id();
  return tape.record(std::move(out), {a}, "scale", [ia, factor](Tape& t, std::size_t, std::span<const double> g) {
    auto& da = t.adjoint(ia);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * factor;
  });
}

Var matmul(Var a, Var b) {
  Tape& tape = common_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_to_string(av.shape()) + " by " +
                         shape_to_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  kernels::gemm(m, n, k, av.data().data(), k, bv.data().data(), n, out.data().data(), n, false);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, "matmul", [ia, ib, m, n, k](Tape& t, std::size_t, std::span<const double> g) {
    const double* x = t.value(ia).data().data();
    const double* y = t.value(ib).data().data();
    if (t.needs_grad(ia)) {
      std::vector<double> yt(n * k);
      kernels::transpose(k, n, y, yt.data());
      kernels::gemm(m, k, n, g.data(), n, yt.data(), k, t.adjoint(ia).data(), k, true);
    }
    if (t.needs_grad(ib)) {
      std::vector<double> xt(k * m);
      kernels::transpose(m, k, x, xt.data());
      kernels::gemm(k, n, m, xt.data(), m, g.data(), n, t.adjoint(ib).data(), n, true);
    }
  });
}

Var linear(Var x, Var weight, std::optional<Var> bias) {
  Tape& tape = common_tape(x, weight);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (wv.rank() != 2) throw DimensionError("linear: weight must be [out, in], got " + shape_to_string(wv.shape()));
  const std::size_t out_f = wv.dim(0), in_f = wv.dim(1);
  if (xv.rank() == 0 || xv.shape().back() != in_f) {
    throw DimensionError("linear: input " + shape_to_string(xv.shape()) + " does not end in " +
                         std::to_string(in_f));
  }
  if (bias) {
    common_tape(x, *bias);
    if (bias->value().shape() != Shape{out_f}) {
      throw DimensionError("linear: bias must be [" + std::to_string(out_f) + "], got " +
                           shape_to_string(bias->value().shape()));
    }
  }
  const std::size_t rows = xv.numel() / in_f;
  Shape out_shape = xv.shape();
  out_shape.back() = out_f;
  Tensor out(out_shape);
  if (bias) {
    const auto b = bias->value().data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(b.begin(), b.end(), out.data().begin() + r * out_f);
  }
  std::vector<double> wt(in_f * out_f);
  kernels::transpose(out_f, in_f, wv.data().data(), wt.data());
  kernels::gemm(rows, out_f, in_f, xv.data().data(), in_f, wt.data(), out_f, out.data().data(), out_f,
                bias.has_value());

  const std::size_t ix = x.id(), iw = weight.id();
  const std::size_t ib = bias ? bias->id() : 0;
  const bool has_bias = bias.has_value();
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return tape.record(std::move(out), inputs, "linear",
                     [ix, iw, ib, has_bias, rows, in_f, out_f](Tape& t, std::size_t, std::span<const double> g) {
                       if (t.needs_grad(ix)) {
                         kernels::gemm(rows, in_f, out_f, g.data(), out_f, t.value(iw).data().data(), in_f,
                                       t.adjoint(ix).data(), in_f, true);
                       }
                       if (t.needs_grad(iw)) {
                         std::vector<double> gt(out_f * rows);
                         kernels::transpose(rows, out_f, g.data(), gt.data());
                         kernels::gemm(out_f, in_f, rows, gt.data(), rows, t.value(ix).data().data(), in_f,
                                       t.adjoint(iw).data(), in_f, true);
                       }
                       if (has_bias && t.needs_grad(ib)) {
                         auto& db = t.adjoint(ib);
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t o = 0; o < out_f; ++o) db[o] += g[r * out_f + o];
                         }
                       }
                     });
}

Var bmm(Var a, Var b, bool transpose_b) {
  Tape& tape = common_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0)) {
    throw DimensionError("bmm: operands must be [G,m,k] and [G,k,n], got " + shape_to_string(av.shape()) + " and " +
                         shape_to_string(bv.shape()));
  }
  const std::size_t groups = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  if ((transpose_b ? bv.dim(2) : bv.dim(1)) != k) {
    throw DimensionError("bmm: inner extents differ for " + shape_to_string(av.shape()) + " and " +
                         shape_to_string(bv.shape()) + (transpose_b ? " (b transposed)" : ""));
  }
  Tensor out({groups, m, n});
  std::vector<double> scratch(transpose_b ? k * n : 0);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const double* ap = av.data().data() + gi * m * k;
    const double* bp = bv.data().data() + gi * k * n;
    double* cp = out.data().data() + gi * m * n;
    if (transpose_b) {
      kernels::transpose(n, k, bp, scratch.data());
      bp = scratch.data();
    }
    kernels::gemm(m, n, k, ap, k, bp, n, cp, n, false);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(
      std::move(out), {a, b}, "bmm",
      [ia, ib, groups, m, n, k, transpose_b](Tape& t, std::size_t, std::span<const double> g) {
        const double* x = t.value(ia).data().data();
        const double* y = t.value(ib).data().data();
        const bool grad_a = t.needs_grad(ia), grad_b = t.needs_grad(ib);
        double* da = grad_a ? t.adjoint(ia).data() : nullptr;
        double* db = grad_b ? t.adjoint(ib).data() : nullptr;
        std::vector<double> scratch(std::max({m * k, k * n, m * n}));
        for (std::size_t gi = 0; gi < groups; ++gi) {
          const double* gp = g.data() + gi * m * n;
          const double* ap = x + gi * m * k;
          const double* bp = y + gi * k * n;
          if (grad_a) {
            if (transpose_b) {
              kernels::gemm(m, k, n, gp, n, bp, k, da + gi * m * k, k, true);
            } else {
              kernels::transpose(k, n, bp, scratch.data());
              kernels::gemm(m, k, n, gp, n, scratch.data(), k, da + gi * m * k, k, true);
            }
          }
          if (grad_b) {
            if (transpose_b) {
              kernels::transpose(m, n, gp, scratch.data());
              kernels::gemm(n, k, m, scratch.data(), m, ap, k, db + gi * k * n, k, true);
            } else {
              kernels::transpose(m, k, ap, scratch.data());
              kernels::gemm(k, n, m, scratch.data(), m, gp, n, db + gi * k * n, n, true);
            }
          }
        }
      });
}

Var softmax(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  const std::size_t n = last_dim(xv, "softmax");
  require_finite(xv, "softmax");
  Tensor out = xv;
  const std::size_t rows = xv.numel() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data().data() + r * n;
    const double peak = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - peak);
      total += row[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
  }
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, "softmax",
                     [ix, n, rows](Tape& t, std::size_t self, std::span<const double> g) {
                       const Tensor& y = t.value(self);
                       auto& dx = t.adjoint(ix);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* yr = y.data().data() + r * n;
                         const double* gr = g.data() + r * n;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                         for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += yr[j] * (gr[j] - dot);
                       }
                     });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& tape = common_tape(x, gamma);
  common_tape(x, beta);
  const Tensor& xv = x.value();
  const std::size_t d = last_dim(xv, "layer_norm");
  if (gamma.value().shape() != Shape{d} || beta.value().shape() != Shape{d}) {
    throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(d) + "]");
  }
  const std::size_t rows = xv.numel() / d;
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data().data() + r * d;
    double* yr = out.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * rstd * gv[j] + bv[j];
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return tape.record(
      std::move(out), {x, gamma, beta}, "layer_norm",
      [ix, ig, ib, d, rows, eps](Tape& t, std::size_t, std::span<const double> g) {
        const Tensor& xv = t.value(ix);
        const auto gv = t.value(ig).data();
        const bool gx = t.needs_grad(ix), gg = t.needs_grad(ig), gb = t.needs_grad(ib);
        double* dx = gx ? t.adjoint(ix).data() : nullptr;
        double* dg = gg ? t.adjoint(ig).data() : nullptr;
        double* db = gb ? t.adjoint(ib).data() : nullptr;
        std::vector<double> xhat(d);
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = xv.data().data() + r * d;
          const double* gr = g.data() + r * d;
          double mu = 0.0;
          for (std::size_t j = 0; j < d; ++j) mu += xr[j];
          mu *= inv_d;
          double var = 0.0;
          for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
          var *= inv_d;
          const double rstd = 1.0 / std::sqrt(var + eps);
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            xhat[j] = (xr[j] - mu) * rstd;
            const double dxhat = gr[j] * gv[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[j];
            if (gg) dg[j] += gr[j] * xhat[j];
            if (gb) db[j] += gr[j];
          }
          if (gx) {
            mean_dxhat *= inv_d;
            mean_dxhat_xhat *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              dx[r * d + j] += rstd * (gr[j] * gv[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            }
          }
        }
      });
}

Var standardize(Var x, double eps) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  const std::size_t d = last_dim(xv, "standardize");
  const std::size_t rows = xv.numel() / d;
  const double inv_d = 1.0 / static_cast<double>(d);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data().data() + r * d;
    double* yr = out.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu *= inv_d;
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    const double denom = std::sqrt(var * inv_d) + eps;
    for (std::size_t j = 0; j < d; ++j) yr[j] = (xr[j] - mu) / denom;
  }
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, "standardize",
                     [ix, d, rows, eps, inv_d](Tape& t, std::size_t, std::span<const double> g) {
                       const Tensor& xv = t.value(ix);
                       auto& dx = t.adjoint(ix);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* xr = xv.data().data() + r * d;
                         const double* gr = g.data() + r * d;
                         double mu = 0.0;
                         for (std::size_t j = 0; j < d; ++j) mu += xr[j];
                         mu *= inv_d;
                         double var = 0.0, mean_g = 0.0, gc = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           const double c = xr[j] - mu;
                           var += c * c;
                           mean_g += gr[j];
                           gc += gr[j] * c;
                         }
                         mean_g *= inv_d;
                         const double sd = std::sqrt(var * inv_d);
                         const double denom = sd + eps;
                         // d sd / d x_j = c_j / (d * sd); undefined at sd == 0 where every c_j is 0.
                         const double coupling = sd > 0.0 ? gc / (static_cast<double>(d) * sd * denom * denom) : 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           dx[r * d + j] += (gr[j] - mean_g) / denom - (xr[j] - mu) * coupling;
                         }
                       }
                     });
}

Var gelu(Var x) {
  Tape& tape = tape_of(x);
  Tensor out = x.value();
  for (double& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 * 0.5));
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, "gelu", [ix](Tape& t, std::size_t, std::span<const double> g) {
    const Tensor& xv = t.value(ix);
    auto& dx = t.adjoint(ix);
    constexpr double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 * 0.5));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      dx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var sigmoid(Var x) {
  Tape& tape = tape_of(x);
  Tensor out = x.value();
  for (double& v : out.data()) {
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, "sigmoid", [ix](Tape& t, std::size_t self, std::span<const double> g) {
    const Tensor& y = t.value(self);
    auto& dx = t.adjoint(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var mean(Var x, std::size_t axis) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) {
    throw DimensionError("mean: axis " + std::to_string(axis) + " out of range for " + shape_to_string(xv.shape()));
  }
  const Shape& s = xv.shape();
  const std::size_t n = s[axis];
  const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = shape_numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(out_shape);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += xv[(o * n + k) * inner + i];
      out[o * inner + i] = acc * inv_n;
    }
  }
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, "mean",
                     [ix, outer, inner, n, inv_n](Tape& t, std::size_t, std::span<const double> g) {
                       auto& dx = t.adjoint(ix);
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t k = 0; k < n; ++k) {
                           for (std::size_t i = 0; i < inner; ++i) dx[(o * n + k) * inner + i] += g[o * inner + i] * inv_n;
                         }
                       }
                     });
}

Var sum(Var x) {
  Tape& tape = tape_of(x);
  double acc = 0.0;
  for (const double v : x.value().data()) acc += v;
  const std::size_t ix = x.id();
  return tape.record(Tensor::scalar(acc), {x}, "sum", [ix](Tape& t, std::size_t, std::span<const double> g) {
    auto& dx = t.adjoint(ix);
    for (double& v : dx) v += g[0];
  });
}

Var reshape(Var x, Shape shape) {
  Tape& tape = tape_of(x);
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, "reshape", [ix](Tape& t, std::size_t, std::span<const double> g) {
    auto& dx = t.adjoint(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

namespace {

/// Visits (output flat index, input flat index) pairs of an axis permutation
/// in output order.
template <typename Fn>
void for_each_permuted(const Shape& in_shape, const std::vector<std::size_t>& axes, Fn&& fn) {
  const std::size_t r = in_shape.size();
  const auto in_strides = row_major_strides(in_shape);
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[axes[i]];
    strides[i] = in_strides[axes[i]];
  }
  const std::size_t n = shape_numel(in_shape);
  if (r == 0) {
    fn(std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t last = out_shape[r - 1];
  const std::size_t last_stride = strides[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t base = 0;
  for (std::size_t flat = 0; flat < n; flat += last) {
    for (std::size_t j = 0; j < last; ++j) fn(flat + j, base + j * last_stride);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      base += strides[d];
      if (idx[d] < out_shape[d]) break;
      base -= strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

Var permute(Var x, const std::vector<std::size_t>& axes) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  const std::size_t r = xv.rank();
  std::vector<bool> seen(r, false);
  if (axes.size() != r) throw DimensionError("permute: need " + std::to_string(r) + " axes");
  for (const std::size_t a : axes) {
    if (a >= r || seen[a]) throw DimensionError("permute: axes are not a permutation");
    seen[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = xv.dim(axes[i]);
  Tensor out(out_shape);
  double* dst = out.data().data();
  const double* src = xv.data().data();
  for_each_permuted(xv.shape(), axes, [&](std::size_t o, std::size_t i) { dst[o] = src[i]; });
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, "permute", [ix, axes](Tape& t, std::size_t, std::span<const double> g) {
    auto& dx = t.adjoint(ix);
    for_each_permuted(t.value(ix).shape(), axes, [&](std::size_t o, std::size_t i) { dx[i] += g[o]; });
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Tape& tape = tape_of(parts[0]);
  const Shape& first = parts[0].value().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const Var& p : parts) {
    common_tape(parts[0], p);
    const Shape& s = p.value().shape();
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.size() != first.size() || (i != axis && s[i] != first[i])) {
        throw DimensionError("concat: incompatible shapes " + shape_to_string(first) + " and " + shape_to_string(s));
      }
    }
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = shape_numel(Shape(first.begin(), first.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = shape_numel(Shape(first.begin() + static_cast<std::ptrdiff_t>(axis) + 1, first.end()));
  Tensor out(out_shape);
  const std::size_t row = out_shape[axis] * inner;
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto src = parts[p].value().data();
    const std::size_t chunk = extents[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.data().begin() + static_cast<std::ptrdiff_t>(o * row + offset));
    }
    offset += chunk;
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return tape.record(std::move(out), parts, "concat",
                     [ids, extents, outer, inner, row](Tape& t, std::size_t, std::span<const double> g) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < ids.size(); ++p) {
                         const std::size_t chunk = extents[p] * inner;
                         if (t.needs_grad(ids[p])) {
                           auto& dp = t.adjoint(ids[p]);
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t j = 0; j < chunk; ++j) dp[o * chunk + j] += g[o * row + offset + j];
                           }
                         }
                         offset += chunk;
                       }
                     });
}

Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length) {
  Tape& tape = tape_of(x);
  const Shape& s = x.value().shape();
  if (axis >= s.size() || length == 0 || start + length > s[axis]) {
    throw DimensionError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range on axis " + std::to_string(axis) + " of " + shape_to_string(s));
  }
  const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = shape_numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  Shape out_shape = s;
  out_shape[axis] = length;
  Tensor out(out_shape);
  const std::size_t in_row = s[axis] * inner;
  const std::size_t chunk = length * inner;
  const auto src = x.value().data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * in_row + start * inner), chunk,
                out.data().begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, "slice",
                     [ix, outer, in_row, chunk, start, inner](Tape& t, std::size_t, std::span<const double> g) {
                       auto& dx = t.adjoint(ix);
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t j = 0; j < chunk; ++j) dx[o * in_row + start * inner + j] += g[o * chunk + j];
                       }
                     });
}

Var dropout(Var x, double p, SplitMix64* rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout: rate must be in [0, 1)");
  if (!training || p == 0.0) return x;
  if (rng == nullptr) throw ContractError("dropout: training mode needs a generator");
  Tape& tape = tape_of(x);
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.value().numel());
  for (double& m : mask) m = rng->uniform() < p ? 0.0 : keep_scale;
  Tensor out = x.value();
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] *= mask[i];
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, "dropout",
                     [ix, mask = std::move(mask)](Tape& t, std::size_t, std::span<const double> g) {
                       auto& dx = t.adjoint(ix);
                       for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * mask[i];
                     });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  Tape& tape = tape_of(logits);
  const Tensor& lv = logits.value();
  if (lv.rank() != 2) throw DimensionError("cross_entropy: logits must be [B, C], got " + shape_to_string(lv.shape()));
  const std::size_t batch = lv.dim(0), classes = lv.dim(1);
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  }
  for (const int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  require_finite(lv, "cross_entropy");
  // Row-wise softmax probabilities are kept for the backward pass.
  std::vector<double> probs(lv.numel());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = lv.data().data() + b * classes;
    const double peak = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - peak);
    const double log_z = peak + std::log(z);
    total += log_z - row[labels[b]];
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(row[c] - log_z);
  }
  const double inv_b = 1.0 / static_cast<double>(batch);
  std::vector<int> targets(labels.begin(), labels.end());
  const std::size_t il = logits.id();
  return tape.record(Tensor::scalar(total * inv_b), {logits}, "cross_entropy",
                     [il, classes, inv_b, probs = std::move(probs), targets = std::move(targets)](
                         Tape& t, std::size_t, std::span<const double> g) {
                       auto& dl = t.adjoint(il);
                       const double w = g[0] * inv_b;
                       for (std::size_t b = 0; b < targets.size(); ++b) {
                         for (std::size_t c = 0; c < classes; ++c) {
                           const double onehot = static_cast<int>(c) == targets[b] ? 1.0 : 0.0;
                           dl[b * classes + c] += w * (probs[b * classes + c] - onehot);
                         }
                       }
                     });
}

}  // namespace skillformer
