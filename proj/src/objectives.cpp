#include "signthought/objectives.hpp"

#include <stdexcept>

#include "signthought/batch.hpp"

namespace signthought {

namespace {

Var as_batched(const Var& A) {
  if (A.shape().size() == 2) return reshape(A, {1, A.dim(0), A.dim(1)});
  if (A.shape().size() != 3) throw ShapeError("routing matrix must be [B, K, M] or [K, M]");
  return A;
}

}  // namespace

Tensor smoothed_targets(std::span<const std::int32_t> labels, std::size_t vocab, double smoothing) {
  if (smoothing < 0.0 || smoothing >= 1.0) throw std::invalid_argument("label smoothing must lie in [0, 1)");
  if (vocab < 2) throw std::invalid_argument("label smoothing needs a vocabulary beyond PAD");
  const double spread = smoothing / static_cast<double>(vocab - 1);
  Tensor q({labels.size(), vocab}, 0.0);
  auto out = q.data();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::int32_t y = labels[i];
    if (y == kPad) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= vocab) throw std::out_of_range("label id outside the vocabulary");
    double* row = out.data() + i * vocab;
    for (std::size_t v = 0; v < vocab; ++v) row[v] = v == static_cast<std::size_t>(kPad) ? 0.0 : spread;
    row[y] += 1.0 - smoothing;
  }
  return q;
}

Var label_smoothed_ce(const Var& logits, std::span<const std::int32_t> labels, double smoothing) {
  if (logits.shape().size() != 3) throw ShapeError("label_smoothed_ce: logits must be [B, T_t, V]");
  const std::size_t vocab = logits.dim(2);
  if (labels.size() != logits.dim(0) * logits.dim(1)) throw ShapeError("label_smoothed_ce: labels must be [B, T_t]");
  std::size_t counted = 0;
  for (std::int32_t y : labels) counted += y != kPad;
  if (counted == 0) throw std::invalid_argument("label_smoothed_ce: batch has only PAD labels");

  Tensor q = smoothed_targets(labels, vocab, smoothing).reshaped(logits.shape());
  const Var logp = log_softmax(logits);
  return scale(sum(mul(logp, Var::constant(std::move(q)))), -1.0 / static_cast<double>(counted));
}

Var expected_index(const Var& A) {
  const std::size_t M = A.dim(-1);
  Tensor idx({M, 1});
  for (std::size_t j = 0; j < M; ++j) idx[j] = static_cast<double>(j + 1);
  Shape out = A.shape();
  out.pop_back();
  return reshape(matmul(A, Var::constant(std::move(idx))), out);
}

Var mono_loss(const Var& A, double delta) {
  const Var a = as_batched(A);
  const std::size_t batch = a.dim(0);
  const std::size_t K = a.dim(1);
  if (K < 2) return Var::constant(Tensor::scalar(0.0));
  const Var mu = expected_index(a);
  const Var gap = sub(slice(mu, 1, 0, K - 1), slice(mu, 1, 1, K - 1));
  return scale(sum(relu(add_scalar(gap, delta))), 1.0 / static_cast<double>(batch));
}

Var cont_loss(const Var& A) {
  const Var a = as_batched(A);
  const std::size_t batch = a.dim(0);
  const std::size_t K = a.dim(1);
  const std::size_t M = a.dim(2);
  if (M < 2) return Var::constant(Tensor::scalar(0.0));
  const Var jumps = abs(sub(slice(a, 2, 1, M - 1), slice(a, 2, 0, M - 1)));
  return scale(sum(jumps), 1.0 / static_cast<double>(batch * K));
}

LossBreakdown total_loss(const Var& ce, const std::vector<Var>& routing, const LossConfig& cfg) {
  if (routing.empty()) throw std::invalid_argument("total_loss: no routing matrices");
  LossBreakdown out;
  out.ce = ce;
  if (cfg.regularize_all_layers) {
    Var mono;
    Var cont;
    for (const Var& A : routing) {
      mono = mono.defined() ? add(mono, mono_loss(A, cfg.delta)) : mono_loss(A, cfg.delta);
      cont = cont.defined() ? add(cont, cont_loss(A)) : cont_loss(A);
    }
    const double inv = 1.0 / static_cast<double>(routing.size());
    out.mono = scale(mono, inv);
    out.cont = scale(cont, inv);
  } else {
    out.mono = mono_loss(routing.back(), cfg.delta);
    out.cont = cont_loss(routing.back());
  }
  out.total = add(add(ce, scale(out.mono, cfg.lambda_mono)), scale(out.cont, cfg.lambda_cont));
  return out;
}

}  // namespace signthought
