#pragma once

// Training losses. Everything returns differentiable scalars.
//   ce:   label-smoothed cross-entropy, mean over non-PAD labels
//   mono: (1/B) sum_b sum_k relu(mu_k - mu_{k+1} + delta), mu_k = sum_j j A_kj (j from 1)
//   cont: (1/(B K)) sum_b sum_k sum_{j>=2} |A_kj - A_k,j-1|

#include <cstdint>
#include <span>
#include <vector>

#include "signthought/autodiff.hpp"
#include "signthought/config.hpp"

namespace signthought {

struct LossBreakdown {
  Var ce;
  Var mono;
  Var cont;
  Var total;  // ce + lambda_mono * mono + lambda_cont * cont
};

// Target mass 1 - s; the remaining s is spread evenly over every non-PAD id
// (target included), so each receives s / (|V| - 1) and q sums to one.
Tensor smoothed_targets(std::span<const std::int32_t> labels, std::size_t vocab, double smoothing);

// logits [B, T_t, V]; labels [B, T_t] with PAD marking ignored positions.
Var label_smoothed_ce(const Var& logits, std::span<const std::int32_t> labels, double smoothing);

// A [..., K, M] -> mu [..., K].
Var expected_index(const Var& A);

// A [B, K, M] (or [K, M], treated as B = 1).
Var mono_loss(const Var& A, double delta);
Var cont_loss(const Var& A);

// Regularizers use the last entry of `routing` unless cfg.regularize_all_layers,
// in which case they are averaged over all entries.
LossBreakdown total_loss(const Var& ce, const std::vector<Var>& routing, const LossConfig& cfg);

}  // namespace signthought
