#include "signthought/routing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "signthought/nn.hpp"

namespace signthought {

void add_routing_params(ParameterStore& params, const std::string& prefix, std::size_t d, std::mt19937_64& rng) {
  params.add(prefix + ".wq", xavier_uniform(d, d, rng));
  params.add(prefix + ".wk", xavier_uniform(d, d, rng));
}

Var similarity(const Var& C, const Var& S, const ParameterStore& params, const std::string& prefix,
               const RoutingConfig& cfg) {
  const std::size_t d = C.shape().back();
  if (S.shape().back() != d) throw ShapeError("similarity: thoughts and segments must share d");
  const Var q = linear(C, params[prefix + ".wq"]);
  const Var k = linear(S, params[prefix + ".wk"]);
  Var G = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  if (cfg.monotonic_bias_eta > 0.0) {
    const std::size_t K = G.dim(-2);
    const std::size_t M = G.dim(-1);
    Tensor bias({K, M});
    for (std::size_t i = 0; i < K; ++i) {
      for (std::size_t j = 0; j < M; ++j) {
        const double gap = static_cast<double>(i + 1) / static_cast<double>(K) -
                           static_cast<double>(j + 1) / static_cast<double>(M);
        bias[i * M + j] = -cfg.monotonic_bias_eta * gap * gap;
      }
    }
    G = add(G, Var::constant(std::move(bias)));
  }
  return G;
}

Var sinkhorn(const Var& G, const RoutingConfig& cfg) {
  if (G.shape().size() < 2) throw ShapeError("sinkhorn expects [..., K, M]");
  const std::size_t K = G.dim(-2);
  const std::size_t M = G.dim(-1);
  const double column_budget = static_cast<double>(K) / static_cast<double>(M);

  // Row max as a constant: the first row normalization cancels it exactly.
  Shape max_shape = G.shape();
  max_shape.back() = 1;
  Tensor row_max(max_shape);
  const auto& g = G.value().raw();
  for (std::size_t r = 0; r < row_max.size(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < M; ++j) mx = std::max(mx, g[r * M + j]);
    row_max[r] = mx;
  }
  Var A = exp(sub(G, Var::constant(std::move(row_max))));
  for (std::size_t it = 0; it < cfg.sinkhorn_iters; ++it) {
    A = div(A, sum_axis(A, -1));
    A = scale(div(A, sum_axis(A, -2)), column_budget);
  }
  return div(A, sum_axis(A, -1));
}

Var routed_summaries(const Var& A, const Var& S) { return matmul(A, S); }

Var temporal_prior(const Var& A, const Var& W_seg) { return matmul(A, W_seg); }

}  // namespace signthought
