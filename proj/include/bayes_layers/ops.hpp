#pragma once

// Differentiable tensor operations. Every function records its adjoint rule on
// the tape of its tracked inputs (if any) and is a plain computation otherwise.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "bayes_layers/tensor.hpp"

namespace bayes_layers {

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      fail(ErrorKind::kShape, std::string(op) + ": cannot broadcast " + shape_string(a) + " with " +
                                  shape_string(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

/// Maps flat indices of a broadcast output back to flat indices of one input.
class BroadcastMap {
 public:
  BroadcastMap(const Shape& in, const Shape& out) {
    const std::size_t n = num_elements(out);
    if (in == out) {
      kind_ = Kind::kIdentity;
      return;
    }
    if (num_elements(in) == 1) {
      kind_ = Kind::kScalar;
      return;
    }
    kind_ = Kind::kGeneral;
    const std::size_t rank = out.size();
    const std::size_t offset = rank - in.size();
    std::vector<std::size_t> in_strides(rank, 0);
    std::size_t stride = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
      in_strides[i + offset] = in[i] == 1 ? 0 : stride;
      stride *= in[i];
    }
    index_.resize(n);
    std::vector<std::size_t> counter(rank, 0);
    std::size_t flat_in = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
      index_[flat] = flat_in;
      for (std::size_t axis = rank; axis-- > 0;) {
        ++counter[axis];
        flat_in += in_strides[axis];
        if (counter[axis] < out[axis]) break;
        flat_in -= in_strides[axis] * counter[axis];
        counter[axis] = 0;
      }
    }
  }

  std::size_t operator()(std::size_t flat) const noexcept {
    switch (kind_) {
      case Kind::kIdentity: return flat;
      case Kind::kScalar: return 0;
      case Kind::kGeneral: break;
    }
    return index_[flat];
  }

 private:
  enum class Kind { kIdentity, kScalar, kGeneral };
  Kind kind_ = Kind::kIdentity;
  std::vector<std::size_t> index_;
};

// f(x, y) -> z; dfa / dfb (x, y, z) -> partial derivative.
template <class F, class DA, class DB>
Tensor binary(std::string_view kind, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), kind);
  const std::size_t n = num_elements(out_shape);
  auto ma = std::make_shared<BroadcastMap>(a.shape(), out_shape);
  auto mb = std::make_shared<BroadcastMap>(b.shape(), out_shape);
  std::vector<double> out(n);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[(*ma)(i)], bv[(*mb)(i)]);
  Tensor result(std::move(out_shape), std::move(out));
  if (!a.tracked() && !b.tracked()) return result;
  Tensor ca = a.detach(), cb = b.detach(), cz = result;
  return Tape::record(kind, result, {&a, &b},
                      [ca, cb, cz, ma, mb, dfa, dfb](std::span<const double> g, std::span<double* const> adj) {
                        const auto x = ca.data();
                        const auto y = cb.data();
                        const auto z = cz.data();
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          const double xi = x[(*ma)(i)], yi = y[(*mb)(i)];
                          if (adj[0]) adj[0][(*ma)(i)] += g[i] * dfa(xi, yi, z[i]);
                          if (adj[1]) adj[1][(*mb)(i)] += g[i] * dfb(xi, yi, z[i]);
                        }
                      });
}

// f(x) -> y; df(x, y) -> dy/dx.
template <class F, class DF>
Tensor unary(std::string_view kind, const Tensor& a, F f, DF df) {
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  Tensor result(a.shape(), std::move(out));
  if (!a.tracked()) return result;
  Tensor ca = a.detach(), cy = result;
  return Tape::record(kind, result, {&a}, [ca, cy, df](std::span<const double> g, std::span<double* const> adj) {
    const auto x = ca.data();
    const auto y = cy.data();
    for (std::size_t i = 0; i < g.size(); ++i) adj[0][i] += g[i] * df(x[i], y[i]);
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> strides(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) strides[i - 1] = strides[i] * s[i];
  return strides;
}

// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
struct AxisBlocks {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisBlocks axis_blocks(const Shape& shape, std::size_t axis) {
  AxisBlocks b;
  for (std::size_t i = 0; i < axis; ++i) b.outer *= shape[i];
  b.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) b.inner *= shape[i];
  return b;
}

inline void require_axis(const Tensor& t, std::size_t axis, std::string_view op) {
  if (axis >= t.rank()) {
    fail(ErrorKind::kShape, std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                                shape_string(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (broadcasting)

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

/// log(sigmoid(hi) - sigmoid(lo)) for hi > lo, elementwise. hi may be +inf and
/// lo may be -inf, giving the open-ended tail masses.
inline Tensor log_sigmoid_diff(const Tensor& hi, const Tensor& lo) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  auto f = [](double h, double l) {
    if (h == kInf && l == -kInf) return 0.0;
    if (h == kInf) return -detail::stable_softplus(l);
    if (l == -kInf) return -detail::stable_softplus(-h);
    if (!(h > l)) return -kInf;
    // sigmoid(h) - sigmoid(l) = (e^h - e^l) / ((1 + e^h)(1 + e^l))
    return h + std::log(-std::expm1(l - h)) - detail::stable_softplus(h) - detail::stable_softplus(l);
  };
  auto dh = [](double h, double l, double) {
    if (h == kInf) return 0.0;
    if (l == -kInf) return 1.0 - detail::stable_sigmoid(h);
    return -1.0 / std::expm1(l - h) - detail::stable_sigmoid(h);
  };
  auto dl = [](double h, double l, double) {
    if (l == -kInf) return 0.0;
    if (h == kInf) return -detail::stable_sigmoid(l);
    return -1.0 / std::expm1(h - l) - detail::stable_sigmoid(l);
  };
  return detail::binary("log_sigmoid_diff", hi, lo, f, dh, dl);
}

inline Tensor neg(const Tensor& a) {
  return detail::unary(
      "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) fail(ErrorKind::kDomain, "log of negative value " + std::to_string(v));
  }
  return detail::unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) fail(ErrorKind::kDomain, "sqrt of negative value " + std::to_string(v));
  }
  return detail::unary(
      "sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary("sigmoid", a, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor softplus(const Tensor& a) {
  return detail::unary("softplus", a, detail::stable_softplus,
                       [](double x, double) { return detail::stable_sigmoid(x); });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor pow2(const Tensor& a) {
  return detail::unary(
      "pow2", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor cos(const Tensor& a) {
  return detail::unary(
      "cos", a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

inline Tensor sin(const Tensor& a) {
  return detail::unary(
      "sin", a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

/// Standard normal CDF.
inline Tensor normal_cdf(const Tensor& a) {
  return detail::unary(
      "normal_cdf", a, [](double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); },
      [](double x, double) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); });
}

inline Tensor clamp_min(const Tensor& a, double lo) {
  return detail::unary(
      "clamp_min", a, [lo](double x) { return std::max(x, lo); },
      [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
inline Tensor operator/(double a, const Tensor& b) { return div(Tensor::scalar(a), b); }

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  const std::size_t n = a.size();
  return Tape::record("sum", Tensor::scalar(total), {&a},
                      [n](std::span<const double> g, std::span<double* const> adj) {
                        for (std::size_t i = 0; i < n; ++i) adj[0][i] += g[0];
                      });
}

inline Tensor mean(const Tensor& a) { return sum(a) / static_cast<double>(a.size()); }

/// Sum over one axis; the axis is dropped unless `keepdims`.
inline Tensor sum(const Tensor& a, std::size_t axis, bool keepdims = false) {
  detail::require_axis(a, axis, "sum");
  const auto blk = detail::axis_blocks(a.shape(), axis);
  std::vector<double> out(blk.outer * blk.inner, 0.0);
  const auto x = a.data();
  for (std::size_t o = 0; o < blk.outer; ++o)
    for (std::size_t k = 0; k < blk.extent; ++k)
      for (std::size_t i = 0; i < blk.inner; ++i)
        out[o * blk.inner + i] += x[(o * blk.extent + k) * blk.inner + i];
  Shape shape = a.shape();
  if (keepdims) {
    shape[axis] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return Tape::record("sum_axis", Tensor(std::move(shape), std::move(out)), {&a},
                      [blk](std::span<const double> g, std::span<double* const> adj) {
                        for (std::size_t o = 0; o < blk.outer; ++o)
                          for (std::size_t k = 0; k < blk.extent; ++k)
                            for (std::size_t i = 0; i < blk.inner; ++i)
                              adj[0][(o * blk.extent + k) * blk.inner + i] += g[o * blk.inner + i];
                      });
}

inline Tensor mean(const Tensor& a, std::size_t axis, bool keepdims = false) {
  detail::require_axis(a, axis, "mean");
  return sum(a, axis, keepdims) / static_cast<double>(a.dim(axis));
}

/// log(sum(exp(a))) over the last axis, which is dropped.
inline Tensor logsumexp(const Tensor& a) {
  if (a.rank() == 0) fail(ErrorKind::kShape, "logsumexp needs rank >= 1");
  const std::size_t k = a.shape().back();
  const std::size_t rows = a.size() / k;
  const auto x = a.data();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, x[r * k + j]);
    if (std::isinf(m)) {
      out[r] = m;
      continue;
    }
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(x[r * k + j] - m);
    out[r] = m + std::log(s);
  }
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  Tensor result(std::move(shape), std::move(out));
  Tensor ca = a.detach(), cy = result;
  return Tape::record("logsumexp", result, {&a},
                      [ca, cy, k, rows](std::span<const double> g, std::span<double* const> adj) {
                        const auto xv = ca.data();
                        const auto yv = cy.data();
                        for (std::size_t r = 0; r < rows; ++r) {
                          if (std::isinf(yv[r])) continue;
                          for (std::size_t j = 0; j < k; ++j) adj[0][r * k + j] += g[r] * std::exp(xv[r * k + j] - yv[r]);
                        }
                      });
}

/// a - logsumexp(a) along the last axis.
inline Tensor log_softmax(const Tensor& a) {
  if (a.rank() == 0) fail(ErrorKind::kShape, "log_softmax needs rank >= 1");
  const std::size_t k = a.shape().back();
  const std::size_t rows = a.size() / k;
  const auto x = a.data();
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, x[r * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(x[r * k + j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = x[r * k + j] - lse;
  }
  Tensor result(a.shape(), std::move(out));
  Tensor cy = result;
  return Tape::record("log_softmax", result, {&a},
                      [cy, k, rows](std::span<const double> g, std::span<double* const> adj) {
                        const auto y = cy.data();
                        for (std::size_t r = 0; r < rows; ++r) {
                          double gs = 0.0;
                          for (std::size_t j = 0; j < k; ++j) gs += g[r * k + j];
                          for (std::size_t j = 0; j < k; ++j)
                            adj[0][r * k + j] += g[r * k + j] - std::exp(y[r * k + j]) * gs;
                        }
                      });
}

/// Picks a[..., index[r]] for every leading position r; drops the last axis.
inline Tensor take_last(const Tensor& a, const std::vector<std::size_t>& index) {
  if (a.rank() == 0) fail(ErrorKind::kShape, "take_last needs rank >= 1");
  const std::size_t k = a.shape().back();
  const std::size_t rows = a.size() / k;
  if (index.size() != rows) {
    fail(ErrorKind::kShape, "take_last: " + std::to_string(index.size()) + " indices for " +
                                std::to_string(rows) + " rows");
  }
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= k) fail(ErrorKind::kDomain, "take_last: index " + std::to_string(index[r]) + " >= " + std::to_string(k));
    out[r] = a[r * k + index[r]];
  }
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  return Tape::record("take_last", Tensor(std::move(shape), std::move(out)), {&a},
                      [index, k](std::span<const double> g, std::span<double* const> adj) {
                        for (std::size_t r = 0; r < index.size(); ++r) adj[0][r * k + index[r]] += g[r];
                      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (num_elements(shape) != a.size()) {
    fail(ErrorKind::kShape, "cannot reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  Tensor result(std::move(shape), a.values());
  const std::size_t n = a.size();
  return Tape::record("reshape", result, {&a}, [n](std::span<const double> g, std::span<double* const> adj) {
    for (std::size_t i = 0; i < n; ++i) adj[0][i] += g[i];
  });
}

/// Matrix transpose.
inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) fail(ErrorKind::kShape, "transpose needs a matrix, got " + shape_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return Tape::record("transpose", Tensor({c, r}, std::move(out)), {&a},
                      [r, c](std::span<const double> g, std::span<double* const> adj) {
                        for (std::size_t i = 0; i < r; ++i)
                          for (std::size_t j = 0; j < c; ++j) adj[0][i * c + j] += g[j * r + i];
                      });
}

/// Elements [start, start + length) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  detail::require_axis(a, axis, "slice");
  if (start + length > a.dim(axis)) {
    fail(ErrorKind::kShape, "slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                ") exceeds extent " + std::to_string(a.dim(axis)));
  }
  const auto blk = detail::axis_blocks(a.shape(), axis);
  std::vector<double> out(blk.outer * length * blk.inner);
  for (std::size_t o = 0; o < blk.outer; ++o)
    for (std::size_t k = 0; k < length; ++k)
      for (std::size_t i = 0; i < blk.inner; ++i)
        out[(o * length + k) * blk.inner + i] = a[(o * blk.extent + start + k) * blk.inner + i];
  Shape shape = a.shape();
  shape[axis] = length;
  return Tape::record("slice", Tensor(std::move(shape), std::move(out)), {&a},
                      [blk, start, length](std::span<const double> g, std::span<double* const> adj) {
                        for (std::size_t o = 0; o < blk.outer; ++o)
                          for (std::size_t k = 0; k < length; ++k)
                            for (std::size_t i = 0; i < blk.inner; ++i)
                              adj[0][(o * blk.extent + start + k) * blk.inner + i] += g[(o * length + k) * blk.inner + i];
                      });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) fail(ErrorKind::kInvalidArgument, "concat of zero tensors");
  detail::require_axis(parts[0], axis, "concat");
  Shape shape = parts[0].shape();
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) fail(ErrorKind::kShape, "concat: rank mismatch");
    s[axis] = shape[axis];
    if (s != shape) {
      fail(ErrorKind::kShape, "concat: " + shape_string(p.shape()) + " incompatible with " +
                                  shape_string(parts[0].shape()) + " along axis " + std::to_string(axis));
    }
    extents.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  shape[axis] = total;
  auto blk = detail::axis_blocks(shape, axis);
  std::vector<double> out(num_elements(shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    for (std::size_t o = 0; o < blk.outer; ++o)
      for (std::size_t k = 0; k < extents[p]; ++k)
        for (std::size_t i = 0; i < blk.inner; ++i)
          out[(o * total + offset + k) * blk.inner + i] = parts[p][(o * extents[p] + k) * blk.inner + i];
    offset += extents[p];
  }
  std::vector<const Tensor*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  return Tape::record("concat", Tensor(std::move(shape), std::move(out)), inputs,
                      [blk, extents, total](std::span<const double> g, std::span<double* const> adj) {
                        std::size_t off = 0;
                        for (std::size_t p = 0; p < extents.size(); ++p) {
                          if (adj[p]) {
                            for (std::size_t o = 0; o < blk.outer; ++o)
                              for (std::size_t k = 0; k < extents[p]; ++k)
                                for (std::size_t i = 0; i < blk.inner; ++i)
                                  adj[p][(o * extents[p] + k) * blk.inner + i] += g[(o * total + off + k) * blk.inner + i];
                          }
                          off += extents[p];
                        }
                      });
}

/// Main diagonal of a square matrix.
inline Tensor diag_part(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    fail(ErrorKind::kShape, "diag_part needs a square matrix, got " + shape_string(a.shape()));
  }
  const std::size_t n = a.dim(0);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i * n + i];
  return Tape::record("diag_part", Tensor({n}, std::move(out)), {&a},
                      [n](std::span<const double> g, std::span<double* const> adj) {
                        for (std::size_t i = 0; i < n; ++i) adj[0][i * n + i] += g[i];
                      });
}

/// Lower triangle (diagonal included) of a square matrix; upper part zeroed.
inline Tensor tril(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    fail(ErrorKind::kShape, "tril needs a square matrix, got " + shape_string(a.shape()));
  }
  const std::size_t n = a.dim(0);
  std::vector<double> out(a.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) out[i * n + j] = a[i * n + j];
  return Tape::record("tril", Tensor(a.shape(), std::move(out)), {&a},
                      [n](std::span<const double> g, std::span<double* const> adj) {
                        for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j <= i; ++j) adj[0][i * n + j] += g[i * n + j];
                      });
}

// ---------------------------------------------------------------------------
// Products and distances

namespace detail {

// c[m,n] (+)= op(a)[m,k] * op(b)[k,n] on raw buffers; ta/tb select transposes.
inline void gemm(std::span<const double> a, bool ta, std::span<const double> b, bool tb, double* c,
                 std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ta ? a[p * m + i] : a[i * k + p];
      if (aip == 0.0) continue;
      double* crow = c + i * n;
      if (tb) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * b[j * k + p];
      } else {
        const double* brow = b.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    fail(ErrorKind::kShape, "matmul needs matrices, got " + shape_string(a.shape()) + " and " +
                                shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    fail(ErrorKind::kShape, "matmul inner dimensions differ: " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm(a.data(), false, b.data(), false, out.data(), m, k, n);
  Tensor ca = a.detach(), cb = b.detach();
  return Tape::record("matmul", Tensor({m, n}, std::move(out)), {&a, &b},
                      [ca, cb, m, k, n](std::span<const double> g, std::span<double* const> adj) {
                        if (adj[0]) detail::gemm(g, false, cb.data(), true, adj[0], m, n, k);  // dA = G B^T
                        if (adj[1]) detail::gemm(ca.data(), true, g, false, adj[1], k, m, n);  // dB = A^T G
                      });
}

/// Pairwise squared Euclidean distances between rows: out[i,j] = |x_i - y_j|^2.
inline Tensor squared_distance(const Tensor& x, const Tensor& y) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1)) {
    fail(ErrorKind::kShape, "squared_distance needs [n,d] and [p,d], got " + shape_string(x.shape()) +
                                " and " + shape_string(y.shape()));
  }
  const std::size_t n = x.dim(0), p = y.dim(0), d = x.dim(1);
  std::vector<double> out(n * p);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = x[i * d + c] - y[j * d + c];
        s += diff * diff;
      }
      out[i * p + j] = s;
    }
  Tensor cx = x.detach(), cy = y.detach();
  return Tape::record("squared_distance", Tensor({n, p}, std::move(out)), {&x, &y},
                      [cx, cy, n, p, d](std::span<const double> g, std::span<double* const> adj) {
                        for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < p; ++j) {
                            const double gij = g[i * p + j];
                            if (gij == 0.0) continue;
                            for (std::size_t c = 0; c < d; ++c) {
                              const double diff = 2.0 * (cx[i * d + c] - cy[j * d + c]) * gij;
                              if (adj[0]) adj[0][i * d + c] += diff;
                              if (adj[1]) adj[1][j * d + c] -= diff;
                            }
                          }
                      });
}

}  // namespace bayes_layers
