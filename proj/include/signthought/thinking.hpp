#pragma once

// K ordered latent thought slots refined by L thinking layers. Each layer:
//   C~ = C + CausalSelfAttn(LN(C))           (thought k sees thoughts 1..k)
//   G = similarity(C~, S), A = sinkhorn(G), p = A S, r = A W_seg
//   C^ = C~ + RoutedXAttn(LN(C~), E; bias lambda_p (content(p, E) + log(r + eps)))
//   C' = C^ + FFN(LN(C^))
// Parameters are per layer. The full layer is not causal over thoughts: the
// column normalization inside sinkhorn couples all rows of A.

#include <random>
#include <vector>

#include "signthought/autodiff.hpp"
#include "signthought/config.hpp"
#include "signthought/nn.hpp"
#include "signthought/routing.hpp"
#include "signthought/segmentation.hpp"

namespace signthought {

struct ThoughtChain {
  Var C;  // [B, K, d]
  std::size_t layer_index = 0;
};

// Routing variables the decoder reuses as its temporal prior.
struct ThinkCache {
  Var A_final;  // [B, K, M]
  Var W_seg;    // [B, M, T_s]
  Var r_final;  // [B, K, T_s]
};

struct ThinkOutput {
  ThoughtChain chain;
  ThinkCache cache;
  std::vector<RoutingState> layers;
};

void add_thinking_params(ParameterStore& params, const ModelConfig& cfg, std::mt19937_64& rng);

ThoughtChain init_slots(const ParameterStore& params, std::size_t batch);

Var causal_self_attn(const Var& C, const ParameterStore& params, const std::string& prefix, std::size_t heads,
                     const ForwardContext& ctx = {});

// Cross-attention from thoughts to frames with the routed-summary bias. The
// hard padding mask is applied after the bias.
Var routed_xattn(const Var& C_tilde, const Var& E, const Tensor& mask, const Var& p, const Var& r,
                 const ThinkConfig& cfg, const ParameterStore& params, const std::string& prefix, std::size_t heads,
                 double eps_num = kEpsNum, const ForwardContext& ctx = {});

struct ThinkLayerOutput {
  Var C;
  RoutingState routing;
};

ThinkLayerOutput think_layer(const Var& C_in, const Var& E, const Tensor& mask, const SegmentationResult& seg,
                             const ModelConfig& cfg, const ParameterStore& params, std::size_t layer,
                             const ForwardContext& ctx = {});

ThinkOutput think(const Var& E, const Tensor& mask, const SegmentationResult& seg, const ModelConfig& cfg,
                  const ParameterStore& params, const ForwardContext& ctx = {});

}  // namespace signthought
