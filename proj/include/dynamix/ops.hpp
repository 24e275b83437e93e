#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <utility>
#include <vector>

#include "dynamix/tape.hpp"

namespace dynamix {
namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const EMat<T>>;

// c[m,n] = a[m,k] * b[k,n]
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  ConstMatMap<T> A(a, m, k), B(b, k, n);
  MatMap<T> C(c, m, n);
  C.noalias() = A * B;
}

// c[m,k] = g[m,n] * b[k,n]^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  ConstMatMap<T> G(g, m, n), B(b, k, n);
  MatMap<T> C(c, m, k);
  C.noalias() = G * B.transpose();
}

// c[k,n] = a[m,k]^T * g[m,n]
template <typename T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
  ConstMatMap<T> A(a, m, k), G(g, m, n);
  MatMap<T> C(c, k, n);
  C.noalias() = A.transpose() * G;
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
#ifndef NDEBUG
  if (!t.all_finite()) {
    throw numeric_error(std::string(op) + ": non-finite value in result");
  }
#else
  (void)t;
  (void)op;
#endif
}

template <typename T>
Tape<T>* tape_of(std::initializer_list<const Var<T>*> vars) {
  for (const Var<T>* v : vars) {
    if (v->tape) return v->tape;
  }
  return nullptr;
}

template <typename T>
bool any_tracked(std::initializer_list<const Var<T>*> vars) {
  for (const Var<T>* v : vars) {
    if (v->tracked()) return true;
  }
  return false;
}

template <typename T>
Var<T> make(Tape<T>* tape, Tensor<T> value, bool tracked, typename Tape<T>::Backward backward,
            const char* op) {
  check_finite(value, op);
  if (tape && tape->recording && tracked) return tape->emit(std::move(value), std::move(backward));
  return Var<T>{std::move(value), -1, tape};
}

inline std::size_t fold_leading(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) n *= shape[i];
  return n;
}

}  // namespace detail

/// a[..., m, k] * b[k, n] -> [..., m, n]. Leading axes of `a` are folded into
/// rows, so the same call covers plain and batch-stacked products.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& ash = a.shape();
  const auto& bsh = b.shape();
  if (ash.size() < 2 || bsh.size() != 2 || ash.back() != bsh[0]) {
    throw shape_error("matmul: incompatible shapes " + shape_str(ash) + " and " + shape_str(bsh));
  }
  const std::size_t m = detail::fold_leading(ash);
  const std::size_t k = ash.back();
  const std::size_t n = bsh[1];

  std::vector<std::size_t> out_shape(ash.begin(), ash.end() - 1);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  detail::gemm(a.value.data(), b.value.data(), out.data(), m, k, n);

  Tape<T>* tape = detail::tape_of<T>({&a, &b});
  const bool tracked = detail::any_tracked<T>({&a, &b});
  auto an = a.node, bn = b.node;
  Tensor<T> av = a.value, bv = b.value;
  auto backward = [an, bn, av, bv, m, k, n, ash](Tape<T>& t, const Tensor<T>& g) {
    if (an >= 0) {
      Tensor<T> da(ash);
      detail::gemm_nt(g.data(), bv.data(), da.data(), m, n, k);
      t.accum(an, std::move(da));
    }
    if (bn >= 0) {
      Tensor<T> db({k, n});
      detail::gemm_tn(av.data(), g.data(), db.data(), m, k, n);
      t.accum(bn, std::move(db));
    }
  };
  return detail::make(tape, std::move(out), tracked, std::move(backward), "matmul");
}

/// Batched product: a[G, m, k] * b[G, k, n] -> [G, m, n].
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  const auto& ash = a.shape();
  const auto& bsh = b.shape();
  if (ash.size() != 3 || bsh.size() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1]) {
    throw shape_error("bmm: incompatible shapes " + shape_str(ash) + " and " + shape_str(bsh));
  }
  const std::size_t G = ash[0], m = ash[1], k = ash[2], n = bsh[2];
  Tensor<T> out({G, m, n});
  for (std::size_t g = 0; g < G; ++g) {
    detail::gemm(a.value.data() + g * m * k, b.value.data() + g * k * n, out.data() + g * m * n, m,
                 k, n);
  }

  Tape<T>* tape = detail::tape_of<T>({&a, &b});
  const bool tracked = detail::any_tracked<T>({&a, &b});
  auto an = a.node, bn = b.node;
  Tensor<T> av = a.value, bv = b.value;
  auto backward = [an, bn, av, bv, G, m, k, n](Tape<T>& t, const Tensor<T>& grad) {
    if (an >= 0) {
      Tensor<T> da({G, m, k});
      for (std::size_t g = 0; g < G; ++g) {
        detail::gemm_nt(grad.data() + g * m * n, bv.data() + g * k * n, da.data() + g * m * k, m, n,
                        k);
      }
      t.accum(an, std::move(da));
    }
    if (bn >= 0) {
      Tensor<T> db({G, k, n});
      for (std::size_t g = 0; g < G; ++g) {
        detail::gemm_tn(av.data() + g * m * k, grad.data() + g * m * n, db.data() + g * k * n, m, k,
                        n);
      }
      t.accum(bn, std::move(db));
    }
  };
  return detail::make(tape, std::move(out), tracked, std::move(backward), "bmm");
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw shape_error("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  Tensor<T> out(a.shape());
  const T* pa = a.value.data();
  const T* pb = b.value.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];

  auto an = a.node, bn = b.node;
  auto backward = [an, bn](Tape<T>& t, const Tensor<T>& g) {
    if (an >= 0) t.accum(an, g.clone());
    if (bn >= 0) t.accum(bn, g.clone());
  };
  return detail::make(detail::tape_of<T>({&a, &b}), std::move(out),
                      detail::any_tracked<T>({&a, &b}), std::move(backward), "add");
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw shape_error("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  Tensor<T> out(a.shape());
  const T* pa = a.value.data();
  const T* pb = b.value.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];

  auto an = a.node, bn = b.node;
  Tensor<T> av = a.value, bv = b.value;
  auto backward = [an, bn, av, bv](Tape<T>& t, const Tensor<T>& g) {
    if (an >= 0) {
      Tensor<T> da(av.shape());
      for (std::size_t i = 0; i < da.size(); ++i) da[i] = g[i] * bv[i];
      t.accum(an, std::move(da));
    }
    if (bn >= 0) {
      Tensor<T> db(bv.shape());
      for (std::size_t i = 0; i < db.size(); ++i) db[i] = g[i] * av[i];
      t.accum(bn, std::move(db));
    }
  };
  return detail::make(detail::tape_of<T>({&a, &b}), std::move(out),
                      detail::any_tracked<T>({&a, &b}), std::move(backward), "mul");
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value[i] * s;
  auto an = a.node;
  auto backward = [an, s](Tape<T>& t, const Tensor<T>& g) {
    if (an < 0) return;
    Tensor<T> da(g.shape());
    for (std::size_t i = 0; i < da.size(); ++i) da[i] = g[i] * s;
    t.accum(an, std::move(da));
  };
  return detail::make(a.tape, std::move(out), a.tracked(), std::move(backward), "scale");
}

/// x[..., n] + bias[n], broadcast over rows.
template <typename T>
Var<T> add_rowwise(const Var<T>& x, const Var<T>& bias) {
  const auto& xs = x.shape();
  if (bias.shape().size() != 1 || bias.shape()[0] != xs.back()) {
    throw shape_error("add_rowwise: shape mismatch " + shape_str(xs) + " vs " +
                      shape_str(bias.shape()));
  }
  const std::size_t n = xs.back();
  const std::size_t r = x.value.size() / n;
  Tensor<T> out(xs);
  const T* px = x.value.data();
  const T* pb = bias.value.data();
  T* po = out.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < n; ++j) po[i * n + j] = px[i * n + j] + pb[j];
  }

  auto xn = x.node, bn = bias.node;
  auto backward = [xn, bn, r, n](Tape<T>& t, const Tensor<T>& g) {
    if (xn >= 0) t.accum(xn, g.clone());
    if (bn >= 0) {
      Tensor<T> db({n});
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
      }
      t.accum(bn, std::move(db));
    }
  };
  return detail::make(detail::tape_of<T>({&x, &bias}), std::move(out),
                      detail::any_tracked<T>({&x, &bias}), std::move(backward), "add_rowwise");
}

/// Exact-erf GELU: x * Phi(x).
template <typename T>
Var<T> gelu(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const T* pa = a.value.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = static_cast<double>(pa[i]);
    out[i] = static_cast<T>(x * 0.5 * (1.0 + std::erf(x * 0.70710678118654752440)));
  }
  auto an = a.node;
  Tensor<T> av = a.value;
  auto backward = [an, av](Tape<T>& t, const Tensor<T>& g) {
    if (an < 0) return;
    Tensor<T> da(av.shape());
    for (std::size_t i = 0; i < da.size(); ++i) {
      const double x = static_cast<double>(av[i]);
      const double phi = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
      const double dens = std::exp(-0.5 * x * x) * 0.39894228040143267794;
      da[i] = g[i] * static_cast<T>(phi + x * dens);
    }
    t.accum(an, std::move(da));
  };
  return detail::make(a.tape, std::move(out), a.tracked(), std::move(backward), "gelu");
}

/// Row softmax over the last axis, with max subtraction. Throws numeric_error
/// when a row contains NaN or +inf.
template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  const auto& sh = a.shape();
  const std::size_t n = sh.back();
  const std::size_t rows = a.value.size() / n;
  Tensor<T> out(sh);
  const T* px = a.value.data();
  T* po = out.data();
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = px + i * n;
    T m = row[0];
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, row[j]);
    if (!std::isfinite(static_cast<double>(m))) {
      throw numeric_error("softmax_rows: non-finite input row");
    }
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      po[i * n + j] = std::exp(row[j] - m);
      s += po[i * n + j];
    }
    const T inv = T(1) / s;
    for (std::size_t j = 0; j < n; ++j) po[i * n + j] *= inv;
  }

  auto an = a.node;
  Tensor<T> y = out;  // shared handle, saved for backward
  auto backward = [an, y, rows, n](Tape<T>& t, const Tensor<T>& g) {
    if (an < 0) return;
    Tensor<T> da(y.shape());
    for (std::size_t i = 0; i < rows; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        da[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
      }
    }
    t.accum(an, std::move(da));
  };
  return detail::make(a.tape, std::move(out), a.tracked(), std::move(backward), "softmax_rows");
}

/// Per-row standardization over the last axis followed by elementwise gain
/// and bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const auto& sh = x.shape();
  const std::size_t d = sh.back();
  if (gain.shape() != std::vector<std::size_t>{d} || bias.shape() != std::vector<std::size_t>{d}) {
    throw shape_error("layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
  }
  if (!(eps > T(0))) throw contract_error("layer_norm: eps must be > 0");
  const std::size_t rows = x.value.size() / d;

  Tensor<T> out(sh);
  Tensor<T> xhat(sh);
  Tensor<T> inv_std({rows});
  const T* px = x.value.data();
  const T* pg = gain.value.data();
  const T* pb = bias.value.data();
  for (std::size_t i = 0; i < rows; ++i) {
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += px[i * d + j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T c = px[i * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (px[i * d + j] - mean) * inv;
      xhat[i * d + j] = h;
      out[i * d + j] = pg[j] * h + pb[j];
    }
  }

  auto xn = x.node, gn = gain.node, bn = bias.node;
  Tensor<T> gv = gain.value;
  auto backward = [xn, gn, bn, gv, xhat, inv_std, rows, d](Tape<T>& t, const Tensor<T>& g) {
    if (gn >= 0) {
      Tensor<T> dg({d});
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < d; ++j) dg[j] += g[i * d + j] * xhat[i * d + j];
      }
      t.accum(gn, std::move(dg));
    }
    if (bn >= 0) {
      Tensor<T> db({d});
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < d; ++j) db[j] += g[i * d + j];
      }
      t.accum(bn, std::move(db));
    }
    if (xn >= 0) {
      Tensor<T> dx(xhat.shape());
      for (std::size_t i = 0; i < rows; ++i) {
        T mean_dh = T(0), mean_dh_h = T(0);
        for (std::size_t j = 0; j < d; ++j) {
          const T dh = g[i * d + j] * gv[j];
          mean_dh += dh;
          mean_dh_h += dh * xhat[i * d + j];
        }
        mean_dh /= static_cast<T>(d);
        mean_dh_h /= static_cast<T>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const T dh = g[i * d + j] * gv[j];
          dx[i * d + j] = inv_std[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_h);
        }
      }
      t.accum(xn, std::move(dx));
    }
  };
  return detail::make(detail::tape_of<T>({&x, &gain, &bias}), std::move(out),
                      detail::any_tracked<T>({&x, &gain, &bias}), std::move(backward),
                      "layer_norm");
}

/// Zero-copy reshape; gradient reshapes back.
template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<std::size_t> shape) {
  Tensor<T> out = a.value.reshaped(shape);
  auto an = a.node;
  auto in_shape = a.shape();
  auto backward = [an, in_shape](Tape<T>& t, const Tensor<T>& g) {
    if (an >= 0) t.accum(an, g.reshaped(in_shape).clone());
  };
  return detail::make(a.tape, std::move(out), a.tracked(), std::move(backward), "reshape");
}

namespace detail {

template <typename T>
Tensor<T> permute_data(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  const auto& sh = a.shape();
  const std::size_t r = sh.size();
  std::vector<std::size_t> in_strides(r);
  in_strides[r - 1] = 1;
  for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * sh[i];

  std::vector<std::size_t> out_shape(r), step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = sh[axes[i]];
    step[i] = in_strides[axes[i]];
  }
  Tensor<T> out(out_shape);
  std::vector<std::size_t> idx(r, 0);
  std::size_t in_off = 0;
  const T* pa = a.data();
  for (std::size_t o = 0; o < out.size(); ++o) {
    out[o] = pa[in_off];
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      in_off += step[ax];
      if (idx[ax] < out_shape[ax]) break;
      in_off -= step[ax] * out_shape[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

}  // namespace detail

/// Reorder axes: out axis i is input axis axes[i].
template <typename T>
Var<T> permute(const Var<T>& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.shape().size();
  if (axes.size() != r) throw shape_error("permute: axes length must equal rank");
  std::vector<bool> seen(r, false);
  for (std::size_t ax : axes) {
    if (ax >= r || seen[ax]) throw shape_error("permute: axes must be a permutation");
    seen[ax] = true;
  }
  Tensor<T> out = detail::permute_data(a.value, axes);
  auto an = a.node;
  std::vector<std::size_t> inverse(r);
  for (std::size_t i = 0; i < r; ++i) inverse[axes[i]] = i;
  auto backward = [an, inverse](Tape<T>& t, const Tensor<T>& g) {
    if (an >= 0) t.accum(an, detail::permute_data(g, inverse));
  };
  return detail::make(a.tape, std::move(out), a.tracked(), std::move(backward), "permute");
}

/// Channel slice [offset, offset + width) along the last axis.
template <typename T>
Var<T> slice_lastdim(const Var<T>& a, std::size_t offset, std::size_t width) {
  const auto& sh = a.shape();
  const std::size_t n = sh.back();
  if (width < 1 || offset + width > n) {
    throw shape_error("slice_lastdim: range [" + std::to_string(offset) + ", " +
                      std::to_string(offset + width) + ") out of " + std::to_string(n));
  }
  const std::size_t rows = a.value.size() / n;
  std::vector<std::size_t> out_shape(sh);
  out_shape.back() = width;
  Tensor<T> out(out_shape);
  const T* pa = a.value.data();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < width; ++j) out[i * width + j] = pa[i * n + offset + j];
  }
  auto an = a.node;
  auto in_shape = sh;
  auto backward = [an, in_shape, offset, width, rows, n](Tape<T>& t, const Tensor<T>& g) {
    if (an < 0) return;
    Tensor<T> da(in_shape);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < width; ++j) da[i * n + offset + j] = g[i * width + j];
    }
    t.accum(an, std::move(da));
  };
  return detail::make(a.tape, std::move(out), a.tracked(), std::move(backward), "slice_lastdim");
}

/// Concatenate along the last axis. All leading shapes must agree.
template <typename T>
Var<T> concat_lastdim(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw shape_error("concat_lastdim: no inputs");
  const auto& first = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& sh = p.shape();
    if (sh.size() != first.size() ||
        !std::equal(sh.begin(), sh.end() - 1, first.begin(), first.end() - 1)) {
      throw shape_error("concat_lastdim: leading shape mismatch " + shape_str(first) + " vs " +
                        shape_str(sh));
    }
    total += sh.back();
  }
  const std::size_t rows = parts[0].value.size() / first.back();
  std::vector<std::size_t> out_shape(first);
  out_shape.back() = total;
  Tensor<T> out(out_shape);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape().back();
    const T* src = p.value.data();
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = src[i * w + j];
    }
    off += w;
  }

  std::vector<std::int64_t> nodes;
  std::vector<std::size_t> widths;
  bool tracked = false;
  Tape<T>* tape = nullptr;
  for (const auto& p : parts) {
    nodes.push_back(p.node);
    widths.push_back(p.shape().back());
    tracked = tracked || p.tracked();
    if (!tape) tape = p.tape;
  }
  auto lead = std::vector<std::size_t>(first.begin(), first.end() - 1);
  auto backward = [nodes, widths, rows, total, lead](Tape<T>& t, const Tensor<T>& g) {
    std::size_t off2 = 0;
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      const std::size_t w = widths[p];
      if (nodes[p] >= 0) {
        std::vector<std::size_t> sh(lead);
        sh.push_back(w);
        Tensor<T> dp(sh);
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < w; ++j) dp[i * w + j] = g[i * total + off2 + j];
        }
        t.accum(nodes[p], std::move(dp));
      }
      off2 += w;
    }
  };
  return detail::make(tape, std::move(out), tracked, std::move(backward), "concat_lastdim");
}

/// Inverse of concat_lastdim for the given widths.
template <typename T>
std::vector<Var<T>> split_lastdim(const Var<T>& a, const std::vector<std::size_t>& widths) {
  std::size_t total = 0;
  for (std::size_t w : widths) total += w;
  if (total != a.shape().back()) {
    throw shape_error("split_lastdim: widths sum " + std::to_string(total) +
                      " does not match last extent " + std::to_string(a.shape().back()));
  }
  std::vector<Var<T>> out;
  std::size_t off = 0;
  for (std::size_t w : widths) {
    out.push_back(slice_lastdim(a, off, w));
    off += w;
  }
  return out;
}

/// Stack g copies of `a` along a new leading axis.
template <typename T>
Var<T> broadcast0(const Var<T>& a, std::size_t g) {
  if (g < 1) throw shape_error("broadcast0: need g >= 1");
  std::vector<std::size_t> out_shape{g};
  for (std::size_t e : a.shape()) out_shape.push_back(e);
  Tensor<T> out(out_shape);
  const std::size_t n = a.value.size();
  for (std::size_t i = 0; i < g; ++i) {
    std::copy(a.value.data(), a.value.data() + n, out.data() + i * n);
  }
  auto an = a.node;
  auto in_shape = a.shape();
  auto backward = [an, in_shape, g, n](Tape<T>& t, const Tensor<T>& grad) {
    if (an < 0) return;
    Tensor<T> da(in_shape);
    for (std::size_t i = 0; i < g; ++i) {
      for (std::size_t j = 0; j < n; ++j) da[j] += grad[i * n + j];
    }
    t.accum(an, std::move(da));
  };
  return detail::make(a.tape, std::move(out), a.tracked(), std::move(backward), "broadcast0");
}

/// [B, N, D] -> [B, D], mean over the middle axis.
template <typename T>
Var<T> mean_axis1(const Var<T>& a) {
  const auto& sh = a.shape();
  if (sh.size() != 3) throw shape_error("mean_axis1: expected rank 3, got " + shape_str(sh));
  const std::size_t b = sh[0], n = sh[1], d = sh[2];
  Tensor<T> out({b, d});
  const T* pa = a.value.data();
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += pa[(i * n + j) * d + c];
    }
  }
  const T invn = T(1) / static_cast<T>(n);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= invn;

  auto an = a.node;
  auto backward = [an, b, n, d, invn](Tape<T>& t, const Tensor<T>& g) {
    if (an < 0) return;
    Tensor<T> da({b, n, d});
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t c = 0; c < d; ++c) da[(i * n + j) * d + c] = g[i * d + c] * invn;
      }
    }
    t.accum(an, std::move(da));
  };
  return detail::make(a.tape, std::move(out), a.tracked(), std::move(backward), "mean_axis1");
}

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  T s = T(0);
  for (std::size_t i = 0; i < a.value.size(); ++i) s += a.value[i];
  Tensor<T> out = Tensor<T>::scalar(s);
  auto an = a.node;
  auto in_shape = a.shape();
  auto backward = [an, in_shape](Tape<T>& t, const Tensor<T>& g) {
    if (an < 0) return;
    Tensor<T> da(in_shape, g[0]);
    t.accum(an, std::move(da));
  };
  return detail::make(a.tape, std::move(out), a.tracked(), std::move(backward), "sum_all");
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.value.size()));
}

/// y[b, ..., c] * w[b, c]: per-sample channel weights broadcast over tokens.
template <typename T>
Var<T> mul_bcast_channels(const Var<T>& y, const Var<T>& w) {
  const auto& ys = y.shape();
  const auto& ws = w.shape();
  if (ys.size() < 2 || ws.size() != 2 || ws[0] != ys[0] || ws[1] != ys.back()) {
    throw shape_error("mul_bcast_channels: shape mismatch " + shape_str(ys) + " vs " +
                      shape_str(ws));
  }
  const std::size_t b = ys[0], d = ys.back();
  const std::size_t mid = y.value.size() / (b * d);
  Tensor<T> out(ys);
  const T* py = y.value.data();
  const T* pw = w.value.data();
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t m = 0; m < mid; ++m) {
      for (std::size_t c = 0; c < d; ++c) {
        out[(i * mid + m) * d + c] = py[(i * mid + m) * d + c] * pw[i * d + c];
      }
    }
  }
  auto yn = y.node, wn = w.node;
  Tensor<T> yv = y.value, wv = w.value;
  auto backward = [yn, wn, yv, wv, b, mid, d](Tape<T>& t, const Tensor<T>& g) {
    if (yn >= 0) {
      Tensor<T> dy(yv.shape());
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t m = 0; m < mid; ++m) {
          for (std::size_t c = 0; c < d; ++c) {
            dy[(i * mid + m) * d + c] = g[(i * mid + m) * d + c] * wv[i * d + c];
          }
        }
      }
      t.accum(yn, std::move(dy));
    }
    if (wn >= 0) {
      Tensor<T> dw({b, d});
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t m = 0; m < mid; ++m) {
          for (std::size_t c = 0; c < d; ++c) {
            dw[i * d + c] += g[(i * mid + m) * d + c] * yv[(i * mid + m) * d + c];
          }
        }
      }
      t.accum(wn, std::move(dw));
    }
  };
  return detail::make(detail::tape_of<T>({&y, &w}), std::move(out),
                      detail::any_tracked<T>({&y, &w}), std::move(backward), "mul_bcast_channels");
}

/// y[b, ...] * m[b]: per-sample scaling, used for drop-path masks.
template <typename T>
Var<T> mul_bcast_samples(const Var<T>& y, const Var<T>& m) {
  const auto& ys = y.shape();
  if (m.shape().size() != 1 || m.shape()[0] != ys[0]) {
    throw shape_error("mul_bcast_samples: shape mismatch " + shape_str(ys) + " vs " +
                      shape_str(m.shape()));
  }
  const std::size_t b = ys[0];
  const std::size_t rest = y.value.size() / b;
  Tensor<T> out(ys);
  for (std::size_t i = 0; i < b; ++i) {
    const T s = m.value[i];
    for (std::size_t j = 0; j < rest; ++j) out[i * rest + j] = y.value[i * rest + j] * s;
  }
  auto yn = y.node, mn = m.node;
  Tensor<T> yv = y.value, mv = m.value;
  auto backward = [yn, mn, yv, mv, b, rest](Tape<T>& t, const Tensor<T>& g) {
    if (yn >= 0) {
      Tensor<T> dy(yv.shape());
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < rest; ++j) dy[i * rest + j] = g[i * rest + j] * mv[i];
      }
      t.accum(yn, std::move(dy));
    }
    if (mn >= 0) {
      Tensor<T> dm({b});
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < rest; ++j) dm[i] += g[i * rest + j] * yv[i * rest + j];
      }
      t.accum(mn, std::move(dm));
    }
  };
  return detail::make(detail::tape_of<T>({&y, &m}), std::move(out),
                      detail::any_tracked<T>({&y, &m}), std::move(backward), "mul_bcast_samples");
}

/// Mean cross-entropy of logits[B, K] against integer labels, with optional
/// label smoothing.
template <typename T>
Var<T> cross_entropy_logits(const Var<T>& logits, const std::vector<int>& labels,
                            double smoothing = 0.0) {
  const auto& sh = logits.shape();
  if (sh.size() != 2) throw shape_error("cross_entropy_logits: expected [B, K]");
  const std::size_t b = sh[0], k = sh[1];
  if (labels.size() != b) {
    throw contract_error("cross_entropy_logits: got " + std::to_string(labels.size()) +
                         " labels for batch " + std::to_string(b));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw contract_error("cross_entropy_logits: label out of range");
    }
  }
  Tensor<T> probs({b, k});
  const T* px = logits.value.data();
  double loss = 0.0;
  const double ls = smoothing;
  for (std::size_t i = 0; i < b; ++i) {
    const T* row = px + i * k;
    T m = row[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double s = 0.0, xsum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - m);
      s += static_cast<double>(probs[i * k + j]);
      xsum += static_cast<double>(row[j]);
    }
    const double lse = static_cast<double>(m) + std::log(s);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = static_cast<T>(probs[i * k + j] / s);
    const double target_term = (1.0 - ls) * static_cast<double>(row[labels[i]]) +
                               ls / static_cast<double>(k) * xsum;
    loss += lse - target_term;
  }
  loss /= static_cast<double>(b);

  auto xn = logits.node;
  auto backward = [xn, probs, labels, b, k, ls](Tape<T>& t, const Tensor<T>& g) {
    if (xn < 0) return;
    Tensor<T> dx({b, k});
    const T gscale = g[0] / static_cast<T>(b);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        T target = static_cast<T>(ls / static_cast<double>(k));
        if (static_cast<std::size_t>(labels[i]) == j) target += static_cast<T>(1.0 - ls);
        dx[i * k + j] = gscale * (probs[i * k + j] - target);
      }
    }
    t.accum(xn, std::move(dx));
  };
  return detail::make(logits.tape, Tensor<T>::scalar(static_cast<T>(loss)), logits.tracked(),
                      std::move(backward), "cross_entropy_logits");
}

/// matmul + bias broadcast.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add_rowwise(matmul(x, w), b);
}

}  // namespace dynamix
