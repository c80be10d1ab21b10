#pragma once

// Thought-to-segment binding. Works on single [K, M] or batched [B, K, M] inputs.

#include <random>
#include <string>

#include "signthought/autodiff.hpp"
#include "signthought/config.hpp"

namespace signthought {

struct RoutingState {
  Var G;  // raw similarities [B, K, M]
  Var A;  // binding, rows sum to 1, columns to K/M
  Var p;  // routed summaries [B, K, d]
  Var r;  // temporal priors [B, K, T_s]
};

void add_routing_params(ParameterStore& params, const std::string& prefix, std::size_t d, std::mt19937_64& rng);

// G[k, j] = (Wq c_k) . (Wk S_j) / sqrt(d), minus eta ((k/K) - (j/M))^2 when the
// monotonic bias is enabled.
Var similarity(const Var& C, const Var& S, const ParameterStore& params, const std::string& prefix,
               const RoutingConfig& cfg);

// exp(G - rowmax) rescaled sinkhorn_iters times (rows to 1, then columns to K/M),
// finished by a row normalization. Unrolled, so fully differentiable.
Var sinkhorn(const Var& G, const RoutingConfig& cfg);

Var routed_summaries(const Var& A, const Var& S);  // p = A S
Var temporal_prior(const Var& A, const Var& W_seg);  // r = A W_seg

}  // namespace signthought
