#pragma once

#include <random>
#include <vector>

#include "oracle.hpp"
#include "signthought/config.hpp"
#include "signthought/tensor.hpp"

namespace testutil {

inline signthought::Tensor random_tensor(signthought::Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                         double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  signthought::Tensor t(std::move(shape));
  for (double& v : t.raw()) v = u(rng);
  return t;
}

inline signthought::Tensor from_mat(const oracle::Mat& m) {
  signthought::Tensor t({m.size(), m[0].size()});
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[0].size(); ++j) t[i * m[0].size() + j] = m[i][j];
  return t;
}

// Rows [r0, r0 + rows) x cols of a flat tensor block starting at offset.
inline oracle::Mat to_mat(const signthought::Tensor& t, std::size_t offset, std::size_t rows, std::size_t cols) {
  oracle::Mat m = oracle::zeros(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m[i][j] = t[offset + i * cols + j];
  return m;
}

inline double max_abs_diff(const signthought::Tensor& a, const signthought::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline signthought::RunConfig tiny() { return signthought::preset("tiny"); }

}  // namespace testutil
