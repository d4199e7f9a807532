#pragma once

// Cholesky factorization and triangular solves with reverse-mode adjoints.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "bayes_layers/ops.hpp"

namespace bayes_layers {

namespace detail {

// Lower Cholesky factor of the n x n matrix `a` (only its lower triangle is read).
inline std::optional<std::vector<double>> cholesky_raw(std::span<const double> a, std::size_t n) {
  std::vector<double> l(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= l[j * n + k] * l[j * n + k];
    if (!(d > 0.0) || !std::isfinite(d)) return std::nullopt;
    const double ljj = std::sqrt(d);
    l[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = s / ljj;
    }
  }
  return l;
}

// Solves L X = B in place (B is n x c).
inline void forward_substitute(std::span<const double> l, std::vector<double>& b, std::size_t n, std::size_t c) {
  for (std::size_t col = 0; col < c; ++col) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = b[i * c + col];
      for (std::size_t k = 0; k < i; ++k) s -= l[i * n + k] * b[k * c + col];
      b[i * c + col] = s / l[i * n + i];
    }
  }
}

// Solves L^T X = B in place (B is n x c).
inline void backward_substitute_transposed(std::span<const double> l, std::vector<double>& b, std::size_t n,
                                           std::size_t c) {
  for (std::size_t col = 0; col < c; ++col) {
    for (std::size_t i = n; i-- > 0;) {
      double s = b[i * c + col];
      for (std::size_t k = i + 1; k < n; ++k) s -= l[k * n + i] * b[k * c + col];
      b[i * c + col] = s / l[i * n + i];
    }
  }
}

inline std::vector<double> transpose_raw(std::span<const double> a, std::size_t r, std::size_t c) {
  std::vector<double> t(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
  return t;
}

inline void require_lower_system(const Tensor& l, const Tensor& b, std::string_view op) {
  if (l.rank() != 2 || l.dim(0) != l.dim(1)) {
    fail(ErrorKind::kShape, std::string(op) + ": factor must be square, got " + shape_string(l.shape()));
  }
  if (b.rank() != 2 || b.dim(0) != l.dim(0)) {
    fail(ErrorKind::kShape, std::string(op) + ": right-hand side " + shape_string(b.shape()) +
                                " incompatible with factor " + shape_string(l.shape()));
  }
}

}  // namespace detail

/// Lower Cholesky factor L with A = L L^T. Throws kNumerical if A is not
/// numerically positive definite. The adjoint treats A as symmetric.
inline Tensor cholesky(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    fail(ErrorKind::kShape, "cholesky needs a square matrix, got " + shape_string(a.shape()));
  }
  const std::size_t n = a.dim(0);
  auto l = detail::cholesky_raw(a.data(), n);
  if (!l) fail(ErrorKind::kNumerical, "matrix of order " + std::to_string(n) + " is not positive definite");
  Tensor result({n, n}, std::move(*l));
  Tensor cl = result;
  return Tape::record("cholesky", result, {&a}, [cl, n](std::span<const double> g, std::span<double* const> adj) {
    const auto lv = cl.data();
    // phi = tril(L^T tril(G)) with halved diagonal, then symmetrized.
    std::vector<double> phi(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t k = i; k < n; ++k) s += lv[k * n + i] * g[k * n + j];
        phi[i * n + j] = i == j ? 0.5 * s : s;
      }
    std::vector<double> p(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        p[i * n + j] = i == j ? phi[i * n + i] : 0.5 * (i > j ? phi[i * n + j] : phi[j * n + i]);
      }
    // grad = L^-T P L^-1
    detail::backward_substitute_transposed(lv, p, n, n);
    auto pt = detail::transpose_raw(p, n, n);
    detail::backward_substitute_transposed(lv, pt, n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) adj[0][i * n + j] += pt[j * n + i];
  });
}

/// X = L^-1 B for lower-triangular L.
inline Tensor solve_lower(const Tensor& l, const Tensor& b) {
  detail::require_lower_system(l, b, "solve_lower");
  const std::size_t n = l.dim(0), c = b.dim(1);
  std::vector<double> x = b.values();
  detail::forward_substitute(l.data(), x, n, c);
  Tensor result({n, c}, std::move(x));
  Tensor cl = l.detach(), cx = result;
  return Tape::record("solve_lower", result, {&l, &b},
                      [cl, cx, n, c](std::span<const double> g, std::span<double* const> adj) {
                        std::vector<double> gb(g.begin(), g.end());
                        detail::backward_substitute_transposed(cl.data(), gb, n, c);  // B_bar = L^-T X_bar
                        if (adj[1])
                          for (std::size_t i = 0; i < n * c; ++i) adj[1][i] += gb[i];
                        if (adj[0]) {
                          const auto xv = cx.data();
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j <= i; ++j) {
                              double s = 0.0;
                              for (std::size_t k = 0; k < c; ++k) s += gb[i * c + k] * xv[j * c + k];
                              adj[0][i * n + j] -= s;  // L_bar = -tril(B_bar X^T)
                            }
                        }
                      });
}

/// X = L^-T B for lower-triangular L.
inline Tensor solve_lower_transposed(const Tensor& l, const Tensor& b) {
  detail::require_lower_system(l, b, "solve_lower_transposed");
  const std::size_t n = l.dim(0), c = b.dim(1);
  std::vector<double> x = b.values();
  detail::backward_substitute_transposed(l.data(), x, n, c);
  Tensor result({n, c}, std::move(x));
  Tensor cl = l.detach(), cx = result;
  return Tape::record("solve_lower_transposed", result, {&l, &b},
                      [cl, cx, n, c](std::span<const double> g, std::span<double* const> adj) {
                        std::vector<double> gb(g.begin(), g.end());
                        detail::forward_substitute(cl.data(), gb, n, c);  // B_bar = L^-1 X_bar
                        if (adj[1])
                          for (std::size_t i = 0; i < n * c; ++i) adj[1][i] += gb[i];
                        if (adj[0]) {
                          const auto xv = cx.data();
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j <= i; ++j) {
                              double s = 0.0;
                              for (std::size_t k = 0; k < c; ++k) s += xv[i * c + k] * gb[j * c + k];
                              adj[0][i * n + j] -= s;  // L_bar = -tril(X B_bar^T)
                            }
                        }
                      });
}

struct JitterPolicy {
  double initial = 1e-6;
  double maximum = 1e-2;
  double growth = 10.0;
};

/// Cholesky of A, retrying with A + jitter*I for jitter = 1e-6, 1e-5, ... 1e-2
/// when the plain factorization fails. `used_jitter` receives the amount added.
inline Tensor cholesky_with_jitter(const Tensor& a, const JitterPolicy& policy = {}, double* used_jitter = nullptr) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    fail(ErrorKind::kShape, "cholesky needs a square matrix, got " + shape_string(a.shape()));
  }
  const std::size_t n = a.dim(0);
  if (detail::cholesky_raw(a.data(), n)) {
    if (used_jitter) *used_jitter = 0.0;
    return cholesky(a);
  }
  for (double jitter = policy.initial; jitter <= policy.maximum * (1.0 + 1e-9); jitter *= policy.growth) {
    std::vector<double> shifted = a.values();
    for (std::size_t i = 0; i < n; ++i) shifted[i * n + i] += jitter;
    if (detail::cholesky_raw(shifted, n)) {
      if (used_jitter) *used_jitter = jitter;
      return cholesky(add(a, Tensor::identity(n) * jitter));
    }
  }
  fail(ErrorKind::kNumerical, "Cholesky failed for order-" + std::to_string(n) + " matrix even with jitter " +
                                  std::to_string(policy.maximum));
}

/// log |det A| from its Cholesky factor: 2 * sum(log diag L).
inline Tensor log_det_from_cholesky(const Tensor& l) { return 2.0 * sum(log(diag_part(l))); }

}  // namespace bayes_layers
