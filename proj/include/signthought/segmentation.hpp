#pragma once

// Differentiable soft segmentation: a boundary MLP predicts M positive segment
// lengths from the masked mean of E; their cumulative proportions place soft
// sigmoid windows over the valid frames; each window pools E into a segment token.

#include <random>
#include <vector>

#include "signthought/autodiff.hpp"
#include "signthought/config.hpp"

namespace signthought {

struct SegmentationResult {
  Var W_seg;  // [B, M, T_s], rows sum to 1 over valid frames
  Var S;      // [B, M, d]
  Var tau;    // [B, M + 1], tau_0 = 1, tau_M ~ L_valid
  Var pi;     // [B, M]
  Var rho;    // [B, M]
  Var z;      // [B, d]
};

void add_segmentation_params(ParameterStore& params, std::size_t d, const SegmentationConfig& cfg,
                             std::mt19937_64& rng);

// sum_t m_t e_t / (L_valid + eps)
Var masked_mean_pool(const Var& E, const Tensor& mask, double eps = kEpsNum);

struct BoundaryLengths {
  Var rho;
  Var pi;
};
// rho = softplus(MLP(z)), pi = rho / (sum rho + eps)
BoundaryLengths boundary_lengths(const Var& z, const ParameterStore& params, const SegmentationConfig& cfg);

// tau_0 = 1, tau_j = 1 + (L_valid - 1) * sum_{i<=j} pi_i; pi is [B, M].
Var boundaries(const Var& pi, const std::vector<std::size_t>& valid_len);

// 1-based valid-frame rank t^ per position, shape [B, 1, T_s].
Tensor valid_frame_rank(const Tensor& mask);

// u[j, t] = sigmoid(gamma (t^ - tau_{j-1})) - sigmoid(gamma (t^ - tau_j)), before masking.
Var window_membership(const Var& tau, const Tensor& mask, double gamma);

// Masked, row-normalized membership [B, M, T_s].
Var membership(const Var& tau, const Tensor& mask, const SegmentationConfig& cfg);

// S_j = sum_t W[j, t] e_t
Var segment_tokens(const Var& W_seg, const Var& E);

SegmentationResult segment(const Var& E, const Tensor& mask, const ParameterStore& params,
                           const SegmentationConfig& cfg);

std::vector<std::size_t> valid_lengths(const Tensor& mask);

}  // namespace signthought
