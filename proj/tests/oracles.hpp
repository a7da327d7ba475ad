#pragma once

// Independent reference computations shared by the unit tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mnmt/rng.hpp"
#include "mnmt/tensor.hpp"

namespace oracle {

inline std::vector<double> random_values(mnmt::Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return v;
}

inline double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

// Central differences of a scalar function with respect to every entry of
// `param`, compared against the gradient left by backward(). Returns the
// largest relative error.
inline double max_grad_error(mnmt::Tensor<double>& param, const std::function<mnmt::Tensor<double>()>& loss,
                             double eps = 1e-5) {
  param.zero_grad();
  mnmt::backward(loss());
  const std::vector<double> analytic(param.grad().begin(), param.grad().end());
  double worst = 0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double orig = param.data()[i];
    param.mutable_data()[i] = orig + eps;
    const double up = loss().item();
    param.mutable_data()[i] = orig - eps;
    const double down = loss().item();
    param.mutable_data()[i] = orig;
    worst = std::max(worst, rel_err(analytic[i], (up - down) / (2 * eps)));
  }
  return worst;
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - m);
  for (auto& x : p) x /= s;
  return p;
}

inline double log_softmax_at(const std::vector<double>& z, std::size_t k) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0;
  for (double x : z) s += std::exp(x - m);
  return z[k] - m - std::log(s);
}

// Plain row-major matrices for hand-composed forward passes.
using Mat = std::vector<std::vector<double>>;

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline Mat from_flat(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  Mat m(rows, std::vector<double>(cols));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m[i][j] = v[i * cols + j];
  return m;
}

inline Mat add_bias(Mat m, const std::vector<double>& b) {
  for (auto& row : m)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
  return m;
}

inline Mat add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

inline Mat relu(Mat m) {
  for (auto& row : m)
    for (auto& x : row) x = std::max(x, 0.0);
  return m;
}

inline Mat layer_norm(Mat m, const std::vector<double>& g, const std::vector<double>& b, double eps = 1e-5) {
  for (auto& row : m) {
    double mu = 0, var = 0;
    for (double x : row) mu += x;
    mu /= static_cast<double>(row.size());
    for (double x : row) var += (x - mu) * (x - mu);
    var /= static_cast<double>(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mu) / std::sqrt(var + eps) * g[j] + b[j];
  }
  return m;
}

// Single-head attention with a key visibility predicate.
inline Mat attention(const Mat& q, const Mat& k, const Mat& v, const std::function<bool(std::size_t, std::size_t)>& visible) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q[0].size()));
  Mat out(q.size(), std::vector<double>(v[0].size(), 0.0));
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<double> z;
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < k.size(); ++j) {
      if (!visible(i, j)) continue;
      double dot = 0;
      for (std::size_t c = 0; c < q[i].size(); ++c) dot += q[i][c] * k[j][c];
      z.push_back(dot * scale);
      idx.push_back(j);
    }
    if (z.empty()) continue;
    const auto p = softmax(z);
    for (std::size_t n = 0; n < idx.size(); ++n)
      for (std::size_t c = 0; c < v[0].size(); ++c) out[i][c] += p[n] * v[idx[n]][c];
  }
  return out;
}

}  // namespace oracle
