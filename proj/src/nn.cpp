#include "signthought/nn.hpp"

#include <cmath>
#include <limits>

namespace signthought {

Tensor sinusoidal_encoding(std::size_t steps, std::size_t d) {
  Tensor pe({steps, d});
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; 2 * i < d; ++i) {
      const double freq = std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      const double angle = static_cast<double>(t) / freq;
      pe[t * d + 2 * i] = std::sin(angle);
      if (2 * i + 1 < d) pe[t * d + 2 * i + 1] = std::cos(angle);
    }
  }
  return pe;
}

Tensor key_padding_mask(const Tensor& valid) {
  if (valid.rank() != 2) throw ShapeError("key_padding_mask expects [B, T]");
  const std::size_t batch = valid.shape()[0];
  const std::size_t steps = valid.shape()[1];
  Tensor m({batch, 1, 1, steps});
  for (std::size_t i = 0; i < valid.size(); ++i) {
    m[i] = valid[i] > 0.5 ? 0.0 : -std::numeric_limits<double>::infinity();
  }
  return m;
}

Tensor causal_mask(std::size_t steps) {
  Tensor m({1, 1, steps, steps});
  for (std::size_t i = 0; i < steps; ++i) {
    for (std::size_t j = i + 1; j < steps; ++j) m[i * steps + j] = -std::numeric_limits<double>::infinity();
  }
  return m;
}

Var row_mask(const Tensor& valid) {
  if (valid.rank() != 2) throw ShapeError("row_mask expects [B, T]");
  return Var::constant(valid.reshaped({valid.shape()[0], valid.shape()[1], 1}));
}

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Tensor w({fan_in, fan_out});
  for (double& v : w.raw()) v = u(rng);
  return w;
}

Var linear(const Var& x, const Var& weight) { return matmul(x, weight); }

Var linear(const Var& x, const Var& weight, const Var& bias) { return add(matmul(x, weight), bias); }

Var split_heads(const Var& x, std::size_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[2] % heads != 0) throw ShapeError("split_heads expects [B, T, d] with d % H == 0");
  return permute(reshape(x, {s[0], s[1], heads, s[2] / heads}), {0, 2, 1, 3});
}

Var merge_heads(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("merge_heads expects [B, H, T, dh]");
  return reshape(permute(x, {0, 2, 1, 3}), {s[0], s[2], s[1] * s[3]});
}

AttentionResult attention(const Var& queries, const Var& keys_values, const ParameterStore& params,
                          const std::string& prefix, std::size_t heads, const Tensor* mask, const Var* bias) {
  const std::size_t d = queries.shape().back();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d / heads));
  const Var q = split_heads(linear(queries, params[prefix + ".wq"]), heads);
  const Var k = split_heads(linear(keys_values, params[prefix + ".wk"]), heads);
  const Var v = split_heads(linear(keys_values, params[prefix + ".wv"]), heads);
  Var logits = scale(matmul(q, transpose(k)), inv_sqrt);
  if (bias != nullptr) logits = add(logits, *bias);
  const Var weights = mask != nullptr ? masked_softmax(logits, *mask) : softmax(logits);
  const Var out = linear(merge_heads(matmul(weights, v)), params[prefix + ".wo"]);
  return {out, weights};
}

Var feed_forward(const Var& x, const ParameterStore& params, const std::string& prefix) {
  const Var h = relu(linear(x, params[prefix + ".w1"], params[prefix + ".b1"]));
  return linear(h, params[prefix + ".w2"], params[prefix + ".b2"]);
}

Var layer_norm(const Var& x, const ParameterStore& params, const std::string& prefix) {
  return layer_norm(x, params[prefix + ".gain"], params[prefix + ".bias"]);
}

void add_layer_norm_params(ParameterStore& params, const std::string& prefix, std::size_t d) {
  params.add(prefix + ".gain", Tensor({d}, 1.0));
  params.add(prefix + ".bias", Tensor({d}, 0.0));
}

void add_attention_params(ParameterStore& params, const std::string& prefix, std::size_t d, std::mt19937_64& rng) {
  for (const char* name : {".wq", ".wk", ".wv", ".wo"}) params.add(prefix + name, xavier_uniform(d, d, rng));
}

void add_ffn_params(ParameterStore& params, const std::string& prefix, std::size_t d, std::size_t hidden,
                    std::mt19937_64& rng) {
  params.add(prefix + ".w1", xavier_uniform(d, hidden, rng));
  params.add(prefix + ".b1", Tensor({hidden}, 0.0));
  params.add(prefix + ".w2", xavier_uniform(hidden, d, rng));
  params.add(prefix + ".b2", Tensor({d}, 0.0));
}

}  // namespace signthought
