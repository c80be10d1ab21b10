#pragma once

#include <cstddef>
#include <random>
#include <string>

#include "signthought/autodiff.hpp"

namespace signthought {

// Training-mode switch and dropout randomness for one forward pass.
struct ForwardContext {
  bool training = false;
  double dropout_rate = 0.0;
  std::mt19937_64* rng = nullptr;

  Var drop(const Var& x) const {
    if (!training || rng == nullptr || dropout_rate <= 0.0) return x;
    return dropout(x, dropout_rate, *rng, true);
  }
};

// PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos(t / 10000^(2i/d)); t is 0-based.
Tensor sinusoidal_encoding(std::size_t steps, std::size_t d);

// [B, T] {0,1} validity -> additive [B, 1, 1, T] with 0 / -inf.
Tensor key_padding_mask(const Tensor& valid);
// [1, 1, T, T]; position i sees 0..i.
Tensor causal_mask(std::size_t steps);
// [B, T] -> [B, T, 1] multiplicative mask as a constant.
Var row_mask(const Tensor& valid);

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

// x[..., in] W[in, out] (+ b[out]).
Var linear(const Var& x, const Var& weight);
Var linear(const Var& x, const Var& weight, const Var& bias);

Var split_heads(const Var& x, std::size_t heads);  // [B, T, d] -> [B, H, T, d/H]
Var merge_heads(const Var& x);                      // [B, H, T, dh] -> [B, T, H*dh]

struct AttentionResult {
  Var out;      // [B, Tq, d], after the output projection
  Var weights;  // [B, H, Tq, Tk]
};

// Multi-head scaled dot-product attention with parameters prefix.{wq,wk,wv,wo}.
// `bias` (optional, broadcastable to [B, H, Tq, Tk]) is added to the logits
// before the additive mask.
AttentionResult attention(const Var& queries, const Var& keys_values, const ParameterStore& params,
                          const std::string& prefix, std::size_t heads, const Tensor* mask = nullptr,
                          const Var* bias = nullptr);

// prefix.{w1,b1,w2,b2}: relu MLP d -> hidden -> d.
Var feed_forward(const Var& x, const ParameterStore& params, const std::string& prefix);

Var layer_norm(const Var& x, const ParameterStore& params, const std::string& prefix);

void add_layer_norm_params(ParameterStore& params, const std::string& prefix, std::size_t d);
void add_attention_params(ParameterStore& params, const std::string& prefix, std::size_t d, std::mt19937_64& rng);
void add_ffn_params(ParameterStore& params, const std::string& prefix, std::size_t d, std::size_t hidden,
                    std::mt19937_64& rng);

}  // namespace signthought
