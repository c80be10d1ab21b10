#include "signthought/segmentation.hpp"

#include "signthought/nn.hpp"

namespace signthought {

void add_segmentation_params(ParameterStore& params, std::size_t d, const SegmentationConfig& cfg,
                             std::mt19937_64& rng) {
  const std::size_t hidden = cfg.mlp_hidden == 0 ? d : cfg.mlp_hidden;
  params.add("seg.mlp.w1", xavier_uniform(d, hidden, rng));
  params.add("seg.mlp.b1", Tensor({hidden}, 0.0));
  params.add("seg.mlp.w2", xavier_uniform(hidden, cfg.M, rng));
  params.add("seg.mlp.b2", Tensor({cfg.M}, 0.0));
}

std::vector<std::size_t> valid_lengths(const Tensor& mask) {
  if (mask.rank() != 2) throw ShapeError("mask must be [B, T_s]");
  const std::size_t b = mask.dim(0);
  const std::size_t t = mask.dim(1);
  std::vector<std::size_t> out(b, 0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t s = 0; s < t; ++s) out[i] += mask[i * t + s] > 0.5 ? 1 : 0;
  }
  return out;
}

Var masked_mean_pool(const Var& E, const Tensor& mask, double eps) {
  const std::size_t b = E.dim(0);
  const std::size_t t = E.dim(1);
  const std::size_t d = E.dim(2);
  const auto lens = valid_lengths(mask);
  Tensor inv({b, 1, 1});
  for (std::size_t i = 0; i < b; ++i) {
    if (lens[i] == 0) throw ShapeError("masked_mean_pool: sample " + std::to_string(i) + " is fully padded");
    inv[i] = 1.0 / (static_cast<double>(lens[i]) + eps);
  }
  const Var pooled = matmul(Var::constant(mask.reshaped({b, 1, t})), E);
  return reshape(mul(pooled, Var::constant(std::move(inv))), {b, d});
}

BoundaryLengths boundary_lengths(const Var& z, const ParameterStore& params, const SegmentationConfig& cfg) {
  const Var h = relu(linear(z, params["seg.mlp.w1"], params["seg.mlp.b1"]));
  const Var rho = softplus(linear(h, params["seg.mlp.w2"], params["seg.mlp.b2"]));
  const Var pi = div(rho, add_scalar(sum_axis(rho, -1), cfg.eps_num));
  return {rho, pi};
}

Var boundaries(const Var& pi, const std::vector<std::size_t>& valid_len) {
  if (pi.shape().size() != 2) throw ShapeError("boundaries expects pi as [B, M]");
  const std::size_t b = pi.dim(0);
  const std::size_t m = pi.dim(1);
  if (valid_len.size() != b) throw ShapeError("boundaries: one valid length per sample required");
  Tensor upper({m, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i; j < m; ++j) upper[i * m + j] = 1.0;
  }
  Tensor span({b, 1});
  for (std::size_t i = 0; i < b; ++i) {
    if (valid_len[i] == 0) throw ShapeError("boundaries: L_valid must be >= 1");
    span[i] = static_cast<double>(valid_len[i]) - 1.0;
  }
  const Var cumulative = matmul(pi, Var::constant(std::move(upper)));
  const Var rest = add_scalar(mul(cumulative, Var::constant(std::move(span))), 1.0);
  return concat({Var::constant(Tensor({b, 1}, 1.0)), rest}, 1);
}

Tensor valid_frame_rank(const Tensor& mask) {
  const std::size_t b = mask.dim(0);
  const std::size_t t = mask.dim(1);
  Tensor rank({b, 1, t});
  for (std::size_t i = 0; i < b; ++i) {
    double acc = 0.0;
    for (std::size_t s = 0; s < t; ++s) {
      acc += mask[i * t + s];
      rank[i * t + s] = acc;
    }
  }
  return rank;
}

Var window_membership(const Var& tau, const Tensor& mask, double gamma) {
  const std::size_t b = tau.dim(0);
  const std::size_t edges = tau.dim(1);
  const Var diff = sub(Var::constant(valid_frame_rank(mask)), reshape(tau, {b, edges, 1}));
  const Var s = sigmoid(scale(diff, gamma));
  return sub(slice(s, 1, 0, edges - 1), slice(s, 1, 1, edges - 1));
}

// The eps floor is added to u on valid frames before normalizing, so a window
// that covers no frame mass (e.g. L_valid = 1, where every tau equals 1)
// degrades to uniform over valid frames and every row sums to exactly 1.
Var membership(const Var& tau, const Tensor& mask, const SegmentationConfig& cfg) {
  const std::size_t b = mask.dim(0);
  const std::size_t t = mask.dim(1);
  const Var u = window_membership(tau, mask, cfg.gamma);
  const Var masked = mul(add_scalar(u, cfg.eps_num), Var::constant(mask.reshaped({b, 1, t})));
  return div(masked, sum_axis(masked, -1));
}

Var segment_tokens(const Var& W_seg, const Var& E) { return matmul(W_seg, E); }

SegmentationResult segment(const Var& E, const Tensor& mask, const ParameterStore& params,
                           const SegmentationConfig& cfg) {
  SegmentationResult r;
  r.z = masked_mean_pool(E, mask, cfg.eps_num);
  auto [rho, pi] = boundary_lengths(r.z, params, cfg);
  r.rho = rho;
  r.pi = pi;
  r.tau = boundaries(pi, valid_lengths(mask));
  r.W_seg = membership(r.tau, mask, cfg);
  r.S = segment_tokens(r.W_seg, E);
  return r;
}

}  // namespace signthought
