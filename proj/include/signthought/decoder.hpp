#pragma once

// Plan-then-ground decoder. Per layer:
//   masked self-attention -> cross-attention over thoughts (alpha)
//   -> w = (alpha A) W_seg -> frame cross-attention biased by lambda_w log(w + eps)
//   -> FFN
// alpha from a layer's thought attention biases the same layer's grounding.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "signthought/autodiff.hpp"
#include "signthought/config.hpp"
#include "signthought/nn.hpp"
#include "signthought/thinking.hpp"

namespace signthought {

struct DecoderPrior {
  Var alpha;  // [B, T_t, K], head-averaged thought attention
  Var beta;   // [B, T_t, M]
  Var w;      // [B, T_t, T_s]
};

void add_decoder_params(ParameterStore& params, const ModelConfig& cfg, std::mt19937_64& rng);

// Word embedding + sinusoidal position; PAD rows are zero.
Var embed_tokens(std::span<const std::int32_t> ids, std::size_t batch, std::size_t length,
                 const ParameterStore& params);

struct ThinkAttention {
  Var out;    // residual output [B, T_t, d]
  Var alpha;  // [B, T_t, K]
};

ThinkAttention think_xattn(const Var& H, const Var& C, const ParameterStore& params, const std::string& prefix,
                           std::size_t heads, const ForwardContext& ctx = {});

DecoderPrior token_frame_prior(const Var& alpha, const Var& A, const Var& W_seg);

// `w` may be null; the prior is used only when cfg.use_prior and lambda_w > 0.
Var grounded_xattn(const Var& H, const Var& E, const Tensor& src_mask, const Var* w, const DecoderConfig& cfg,
                   const ParameterStore& params, const std::string& prefix, std::size_t heads,
                   double eps_num = kEpsNum, const ForwardContext& ctx = {});

struct DecoderLayerOutput {
  Var H;
  DecoderPrior prior;
};

DecoderLayerOutput decoder_layer(const Var& H, const Var& C, const Var& E, const Tensor& src_mask,
                                 const ThinkCache& cache, const ModelConfig& cfg, const ParameterStore& params,
                                 std::size_t layer, const ForwardContext& ctx = {});

struct DecoderOutput {
  Var logits;  // [B, T_t, V]
  std::vector<DecoderPrior> priors;
};

// tokens_in is the BOS-shifted target, row-major [B, T_t].
DecoderOutput forward_logits(const Var& E, const Tensor& src_mask, const Var& C, const ThinkCache& cache,
                             std::span<const std::int32_t> tokens_in, std::size_t batch, std::size_t length,
                             const ModelConfig& cfg, const ParameterStore& params, const ForwardContext& ctx = {});

// Log-probabilities of the next token given the tokens generated so far (BOS
// excluded). -inf marks tokens that may not be emitted.
using NextLogProbs = std::function<std::vector<double>(const std::vector<std::int32_t>& prefix)>;

// Argmax each step, lowest id on ties; stops after EOS (not returned) or max_len tokens.
std::vector<std::int32_t> greedy_search(const NextLogProbs& next, std::size_t max_len);

// GNMT length penalty ((5 + len) / 6)^a, len counting the EOS when present.
double length_penalty(std::size_t len, double a);

// Keeps the `beam` best prefixes by total log-probability (ties: lexicographically
// smaller sequence). Hypotheses ending in EOS are scored logP / length_penalty;
// the search stops once `beam` hypotheses have finished, none are alive, or
// max_len is reached (survivors are then scored unterminated).
std::vector<std::int32_t> beam_search_core(const NextLogProbs& next, std::size_t beam, double len_penalty_a,
                                           std::size_t max_len);

}  // namespace signthought
