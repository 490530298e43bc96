#pragma once

// Straight-line reference implementations shared by the unit tests and the
// acceptance runner. Deliberately naive: nested loops, long double, no reuse
// of the engine's own ops.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "sata/tensor.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<long double>>;

inline Matrix to_matrix(const sata::Tensor& t) {
  Matrix m(t.rows(), std::vector<long double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.size(), std::vector<long double>(b.front().size(), 0.0L));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.front().size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline std::vector<long double> softmax_row(const std::vector<long double>& row) {
  long double mx = *std::max_element(row.begin(), row.end());
  std::vector<long double> out(row.size());
  long double s = 0.0L;
  for (std::size_t j = 0; j < row.size(); ++j) s += out[j] = std::exp(row[j] - mx);
  for (auto& v : out) v /= s;
  return out;
}

/// Two passes: mean first, then squared deviations.
inline Matrix batch_norm(const Matrix& x, const std::vector<long double>& gamma,
                         const std::vector<long double>& beta, long double eps) {
  const std::size_t n = x.size(), f = x.front().size();
  Matrix out(n, std::vector<long double>(f));
  for (std::size_t j = 0; j < f; ++j) {
    long double mu = 0.0L;
    for (std::size_t i = 0; i < n; ++i) mu += x[i][j];
    mu /= n;
    long double var = 0.0L;
    for (std::size_t i = 0; i < n; ++i) var += (x[i][j] - mu) * (x[i][j] - mu);
    var /= n;
    for (std::size_t i = 0; i < n; ++i)
      out[i][j] = gamma[j] * (x[i][j] - mu) / std::sqrt(var + eps) + beta[j];
  }
  return out;
}

inline long double clamp_log(long double v) { return std::log(std::max(v, 1e-12L)); }

inline long double anchor_loss(const Matrix& p, const Matrix& q, const Matrix& a) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = 0; j < p[i].size(); ++j)
      s += p[i][j] * clamp_log(a[i][j]) + q[i][j] * clamp_log(a[i][j]);
  return -s / p.size();
}

inline long double entropy(const Matrix& p) {
  long double s = 0.0L;
  for (const auto& row : p)
    for (long double v : row) s += v * clamp_log(v);
  return -s / p.size();
}

/// Supervised contrastive loss, one term at a time.
inline long double contrastive(const Matrix& z, const std::vector<int>& labels, long double tau) {
  const std::size_t m = z.size();
  auto dot = [&](std::size_t i, std::size_t j) {
    long double s = 0.0L;
    for (std::size_t k = 0; k < z[i].size(); ++k) s += z[i][k] * z[j][k];
    return s / tau;
  };
  long double total = 0.0L;
  for (std::size_t i = 0; i < m; ++i) {
    long double denom = 0.0L;
    for (std::size_t k = 0; k < m; ++k)
      if (k != i) denom += std::exp(dot(i, k));
    std::size_t count = 0;
    long double acc = 0.0L;
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i || labels[j] != labels[i]) continue;
      ++count;
      acc += std::log(std::exp(dot(i, j)) / denom);
    }
    total += -acc / count;
  }
  return total;
}

/// Random probability rows, optionally peaked.
inline sata::Tensor random_probs(std::size_t n, std::size_t c, std::mt19937_64& rng,
                                 double spread = 2.0) {
  std::normal_distribution<double> nd(0.0, spread);
  std::vector<double> v(n * c);
  for (auto& x : v) x = nd(rng);
  return sata::softmax(sata::Tensor::constant({n, c}, std::move(v)));
}

inline sata::Tensor random_unit_rows(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t k = 0; k < d; ++k) ss += (v[i * d + k] = nd(rng)) * v[i * d + k];
    for (std::size_t k = 0; k < d; ++k) v[i * d + k] /= std::sqrt(ss);
  }
  return sata::Tensor::constant({n, d}, std::move(v));
}

struct GradCheck {
  double worst_rel = 0.0;
  double worst_abs = 0.0;
  std::size_t checked = 0;
  std::size_t failures = 0;
};

/// Central differences of `loss` against reverse mode for every entry of
/// `params`. `loss` must rebuild its graph from scratch on each call.
inline GradCheck check_gradients(std::vector<sata::Tensor> params,
                                 const std::function<sata::Tensor()>& loss, double step = 1e-5,
                                 double rel_tol = 1e-4, double abs_floor = 1e-8) {
  sata::zero_grad(params);
  sata::backward(loss());
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());
  sata::zero_grad(params);

  GradCheck out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + step;
      const double up = loss().item();
      values[i] = orig - step;
      const double down = loss().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double diff = std::abs(numeric - analytic[k][i]);
      const double scale = std::max(std::abs(numeric), std::abs(analytic[k][i]));
      const double rel = diff <= abs_floor ? 0.0 : diff / scale;
      out.worst_rel = std::max(out.worst_rel, rel);
      out.worst_abs = std::max(out.worst_abs, diff);
      out.failures += rel > rel_tol;
      ++out.checked;
    }
  }
  return out;
}

}  // namespace oracle
