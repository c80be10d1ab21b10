#pragma once

// Scalar-loop reference implementations. They share no code with the library
// and favour obviousness over speed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m = zeros(r, c);
  for (auto& row : m)
    for (double& v : row) v = u(rng);
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c = zeros(a.size(), b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      c[i][j] = s;
    }
  return c;
}

inline Mat transpose(const Mat& a) {
  Mat t = zeros(a[0].size(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double softplus(double x) { return std::log1p(std::exp(x)); }

// Softmax of one row; -inf entries get exactly zero.
inline std::vector<double> softmax(const std::vector<double>& x) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> e(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    e[i] = std::isinf(x[i]) && x[i] < 0 ? 0.0 : std::exp(x[i] - mx);
    s += e[i];
  }
  for (double& v : e) v /= s;
  return e;
}

inline std::vector<double> layer_norm(const std::vector<double>& x, const std::vector<double>& g,
                                      const std::vector<double>& b, double eps = 1e-5) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = g[i] * (x[i] - mean) / std::sqrt(var + eps) + b[i];
  return y;
}

// Single-sample multi-head attention: q_in [Tq, d], kv [Tk, d]; bias [H][Tq][Tk]
// (may be empty); key_valid per key.
inline Mat attention(const Mat& q_in, const Mat& kv, const Mat& wq, const Mat& wk, const Mat& wv, const Mat& wo,
                     std::size_t heads, const std::vector<bool>& key_valid, bool causal,
                     const std::vector<Mat>& bias = {}, std::vector<Mat>* weights_out = nullptr) {
  const Mat q = matmul(q_in, wq);
  const Mat k = matmul(kv, wk);
  const Mat v = matmul(kv, wv);
  const std::size_t d = wq[0].size();
  const std::size_t dh = d / heads;
  Mat concat = zeros(q_in.size(), d);
  if (weights_out) weights_out->assign(heads, zeros(q_in.size(), kv.size()));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < q_in.size(); ++i) {
      std::vector<double> logits(kv.size());
      for (std::size_t j = 0; j < kv.size(); ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q[i][h * dh + c] * k[j][h * dh + c];
        logits[j] = s / std::sqrt(static_cast<double>(dh));
        if (!bias.empty()) logits[j] += bias[h][i][j];
        if (!key_valid[j] || (causal && j > i)) logits[j] = -std::numeric_limits<double>::infinity();
      }
      const auto w = softmax(logits);
      if (weights_out) (*weights_out)[h][i] = w;
      for (std::size_t c = 0; c < dh; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < kv.size(); ++j) s += w[j] * v[j][h * dh + c];
        concat[i][h * dh + c] = s;
      }
    }
  }
  return matmul(concat, wo);
}

// Row-first Sinkhorn on exp(G): iters x (rows to 1, columns to K/M), then rows to 1.
inline Mat sinkhorn(const Mat& G, std::size_t iters) {
  const std::size_t K = G.size();
  const std::size_t M = G[0].size();
  Mat A = zeros(K, M);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < M; ++j) A[k][j] = std::exp(G[k][j]);
  auto rows = [&] {
    for (auto& row : A) {
      double s = 0.0;
      for (double v : row) s += v;
      for (double& v : row) v /= s;
    }
  };
  for (std::size_t it = 0; it < iters; ++it) {
    rows();
    for (std::size_t j = 0; j < M; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += A[k][j];
      for (std::size_t k = 0; k < K; ++k) A[k][j] *= static_cast<double>(K) / static_cast<double>(M) / s;
    }
  }
  rows();
  return A;
}

// Soft-window membership for one clip with L valid frames out of T.
// Returns W [M][T] using the eps-floored normalization.
inline Mat membership(const std::vector<double>& pi, std::size_t L, std::size_t T, double gamma, double eps) {
  const std::size_t M = pi.size();
  std::vector<double> tau(M + 1, 1.0);
  double cum = 0.0;
  for (std::size_t j = 1; j <= M; ++j) {
    cum += pi[j - 1];
    tau[j] = 1.0 + (static_cast<double>(L) - 1.0) * cum;
  }
  Mat W = zeros(M, T);
  for (std::size_t j = 0; j < M; ++j) {
    double s = 0.0;
    for (std::size_t t = 0; t < L; ++t) {
      const double th = static_cast<double>(t + 1);
      const double u = sigmoid(gamma * (th - tau[j])) - sigmoid(gamma * (th - tau[j + 1]));
      W[j][t] = u + eps;
      s += W[j][t];
    }
    for (std::size_t t = 0; t < L; ++t) W[j][t] /= s;
  }
  return W;
}

inline std::vector<double> expected_index(const Mat& A) {
  std::vector<double> mu;
  for (const auto& row : A) {
    double m = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) m += static_cast<double>(j + 1) * row[j];
    mu.push_back(m);
  }
  return mu;
}

inline double mono(const std::vector<double>& mu, double delta) {
  double s = 0.0;
  for (std::size_t k = 0; k + 1 < mu.size(); ++k) s += std::max(0.0, mu[k] - mu[k + 1] + delta);
  return s;
}

inline double tv(const Mat& A) {
  double s = 0.0;
  for (const auto& row : A)
    for (std::size_t j = 1; j < row.size(); ++j) s += std::abs(row[j] - row[j - 1]);
  return s / static_cast<double>(A.size());
}

// Walk the cumulative sum until it reaches p.
inline std::size_t quantile_walk(const std::vector<double>& row, double p) {
  double c = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    c += row[j];
    if (c >= p) return j + 1;
  }
  return row.size();
}

// Label-smoothed CE at one position, direct from the definition.
inline double smoothed_ce(const std::vector<double>& logits, int target, double s, int pad = 0) {
  const std::size_t V = logits.size();
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  double loss = 0.0;
  for (std::size_t v = 0; v < V; ++v) {
    if (static_cast<int>(v) == pad) continue;
    double q = s / static_cast<double>(V - 1);
    if (static_cast<int>(v) == target) q += 1.0 - s;
    loss -= q * (logits[v] - mx - std::log(z));
  }
  return loss;
}

// Clipped n-gram matches by brute-force pairing.
inline void ngram_counts(const std::vector<int>& hyp, const std::vector<int>& ref, std::size_t n, double& matched,
                         double& total) {
  matched = 0.0;
  total = 0.0;
  if (hyp.size() < n) return;
  std::vector<bool> used(ref.size() >= n ? ref.size() - n + 1 : 0, false);
  for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
    total += 1.0;
    for (std::size_t j = 0; j < used.size(); ++j) {
      if (used[j]) continue;
      if (std::equal(hyp.begin() + i, hyp.begin() + i + n, ref.begin() + j)) {
        used[j] = true;
        matched += 1.0;
        break;
      }
    }
  }
}

inline double bleu_n(const std::vector<int>& hyp, const std::vector<int>& ref, std::size_t max_n) {
  if (hyp.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    double m = 0.0;
    double t = 0.0;
    ngram_counts(hyp, ref, n, m, t);
    double p = t > 0.0 ? m / t : 0.0;
    if (p == 0.0) p = 1e-9;
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(hyp.size());
  const double r = static_cast<double>(ref.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

inline std::size_t lcs(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::vector<std::size_t>> dp(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      dp[i][j] = a[i - 1] == b[j - 1] ? dp[i - 1][j - 1] + 1 : std::max(dp[i - 1][j], dp[i][j - 1]);
  return dp[a.size()][b.size()];
}

// Hand-stepped Adam with decoupled decay on a scalar.
struct ScalarAdam {
  double lr, b1, b2, eps, wd;
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double theta, double g) {
    ++t;
    theta = theta - lr * wd * theta;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return theta - lr * mh / (std::sqrt(vh) + eps);
  }
};

}  // namespace oracle
