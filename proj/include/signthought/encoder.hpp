#pragma once

// Frame encoder: linear embedding + LayerNorm + dropout, sinusoidal positions,
// then n_enc blocks of (masked self-attention, depthwise temporal conv, FFN),
// each pre-LayerNorm with a residual. Padded rows are zero after every sublayer.

#include <random>

#include "signthought/autodiff.hpp"
#include "signthought/batch.hpp"
#include "signthought/config.hpp"
#include "signthought/nn.hpp"

namespace signthought {

void add_encoder_params(ParameterStore& params, const EncoderConfig& cfg, std::mt19937_64& rng);

Var embed_frames(const ClipBatch& clip, const EncoderConfig& cfg, const ParameterStore& params,
                 const ForwardContext& ctx = {});
Var add_positional(const Var& embedded, const Tensor& mask);
Var encoder_block(const Var& x, const Tensor& mask, const EncoderConfig& cfg, const ParameterStore& params,
                  std::size_t layer, const ForwardContext& ctx = {});
// [B, T_s, d_x] -> [B, T_s, d]; padded rows are exactly zero.
Var encode(const ClipBatch& clip, const EncoderConfig& cfg, const ParameterStore& params,
           const ForwardContext& ctx = {});

}  // namespace signthought
