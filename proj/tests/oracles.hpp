#pragma once

// Test-side oracles, kept independent of the library's differentiation and
// estimation paths: plain finite differences of loss values, a dense Jacobi
// eigensolver, exhaustive grid search, and a counting accuracy check.

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

namespace oracles {

using ScalarFn = std::function<double(const std::vector<double>&)>;

// Central-difference gradient from loss values only.
inline std::vector<double> fd_gradient(const ScalarFn& f, std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Dense Hessian from loss values only (4-point second differences),
// symmetrized. Never touches the library's gradient or HVP code.
inline std::vector<std::vector<double>> fd_hessian(const ScalarFn& f, std::vector<double> x,
                                                   double h) {
  const size_t d = x.size();
  std::vector<std::vector<double>> hess(d, std::vector<double>(d, 0.0));
  for (size_t i = 0; i < d; ++i) {
    for (size_t j = i; j < d; ++j) {
      const double oi = x[i], oj = x[j];
      double v;
      if (i == j) {
        const double f0 = f(x);
        x[i] = oi + h;
        const double fp = f(x);
        x[i] = oi - h;
        const double fm = f(x);
        x[i] = oi;
        v = (fp - 2.0 * f0 + fm) / (h * h);
      } else {
        x[i] = oi + h; x[j] = oj + h;
        const double fpp = f(x);
        x[j] = oj - h;
        const double fpm = f(x);
        x[i] = oi - h; x[j] = oj + h;
        const double fmp = f(x);
        x[j] = oj - h;
        const double fmm = f(x);
        x[i] = oi; x[j] = oj;
        v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
      }
      hess[i][j] = v;
      hess[j][i] = v;
    }
  }
  return hess;
}

// Cyclic Jacobi eigenvalues of a symmetric matrix.
inline std::vector<double> jacobi_eigenvalues(std::vector<std::vector<double>> a) {
  const size_t d = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (size_t i = 0; i < d; ++i)
      for (size_t j = i + 1; j < d; ++j) off += a[i][j] * a[i][j];
    if (off < 1e-24) break;
    for (size_t p = 0; p < d; ++p)
      for (size_t q = p + 1; q < d; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (size_t k = 0; k < d; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (size_t k = 0; k < d; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> eig(d);
  for (size_t i = 0; i < d; ++i) eig[i] = a[i][i];
  return eig;
}

inline double max_abs_eigenvalue(const std::vector<std::vector<double>>& h) {
  double best = 0.0;
  for (double e : jacobi_eigenvalues(h)) best = std::max(best, std::abs(e));
  return best;
}

inline double trace_of(const std::vector<std::vector<double>>& h) {
  double t = 0.0;
  for (size_t i = 0; i < h.size(); ++i) t += h[i][i];
  return t;
}

// Exhaustive grid max of f over the 2-D infinity ball of given radius.
inline double grid_max_2d(const std::function<double(double, double)>& f, double radius,
                          int steps_per_axis) {
  double best = -1e300;
  for (int i = 0; i < steps_per_axis; ++i) {
    const double a = -radius + 2.0 * radius * i / (steps_per_axis - 1);
    for (int j = 0; j < steps_per_axis; ++j) {
      const double b = -radius + 2.0 * radius * j / (steps_per_axis - 1);
      best = std::max(best, f(a, b));
    }
  }
  return best;
}

// Counting accuracy check.
inline double count_accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size() || pred.empty()) throw std::runtime_error("count_accuracy: bad sizes");
  size_t hits = 0;
  for (size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == truth[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace oracles
