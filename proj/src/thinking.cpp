#include "signthought/thinking.hpp"

#include <cmath>

namespace signthought {

namespace {

std::string layer_prefix(std::size_t layer) { return "think.layer" + std::to_string(layer); }

}  // namespace

void add_thinking_params(ParameterStore& params, const ModelConfig& cfg, std::mt19937_64& rng) {
  const std::size_t d = cfg.d();
  params.add("think.slots", xavier_uniform(cfg.think.K, d, rng));
  for (std::size_t l = 0; l < cfg.think.L; ++l) {
    const std::string p = layer_prefix(l);
    add_layer_norm_params(params, p + ".self_ln", d);
    add_attention_params(params, p + ".self", d, rng);
    add_routing_params(params, p + ".route", d, rng);
    add_layer_norm_params(params, p + ".xattn_ln", d);
    add_attention_params(params, p + ".xattn", d, rng);
    params.add(p + ".xattn.wp", xavier_uniform(d, d, rng));
    params.add(p + ".xattn.wb", xavier_uniform(d, d, rng));
    add_layer_norm_params(params, p + ".ffn_ln", d);
    add_ffn_params(params, p + ".ffn", d, 4 * d, rng);
  }
}

ThoughtChain init_slots(const ParameterStore& params, std::size_t batch) {
  const Var& slots = params["think.slots"];
  const std::size_t K = slots.dim(0);
  const std::size_t d = slots.dim(1);
  return {expand(reshape(slots, {1, K, d}), {batch, K, d}), 0};
}

Var causal_self_attn(const Var& C, const ParameterStore& params, const std::string& prefix, std::size_t heads,
                     const ForwardContext& ctx) {
  const Tensor mask = causal_mask(C.dim(1));
  const Var x = layer_norm(C, params, prefix + "_ln");
  return add(C, ctx.drop(attention(x, x, params, prefix, heads, &mask).out));
}

Var routed_xattn(const Var& C_tilde, const Var& E, const Tensor& mask, const Var& p, const Var& r,
                 const ThinkConfig& cfg, const ParameterStore& params, const std::string& prefix, std::size_t heads,
                 double eps_num, const ForwardContext& ctx) {
  const std::size_t batch = C_tilde.dim(0);
  const std::size_t K = C_tilde.dim(1);
  const std::size_t steps = E.dim(1);
  const std::size_t d = C_tilde.dim(2);
  const Tensor keys = key_padding_mask(mask);

  Var bias;
  const bool any_bias = cfg.lambda_p > 0.0 && (cfg.use_content_bias || cfg.use_log_prior_bias);
  if (any_bias) {
    if (cfg.use_content_bias) {
      const Var pq = split_heads(linear(p, params[prefix + ".wp"]), heads);
      const Var ek = split_heads(linear(E, params[prefix + ".wb"]), heads);
      bias = scale(matmul(pq, transpose(ek)), 1.0 / std::sqrt(static_cast<double>(d / heads)));
    }
    if (cfg.use_log_prior_bias) {
      const Var log_prior = reshape(log(add_scalar(r, eps_num)), {batch, 1, K, steps});
      bias = bias.defined() ? add(bias, log_prior) : log_prior;
    }
    bias = scale(bias, cfg.lambda_p);
  }
  const Var q = layer_norm(C_tilde, params, prefix + "_ln");
  const AttentionResult att = attention(q, E, params, prefix, heads, &keys, any_bias ? &bias : nullptr);
  return add(C_tilde, ctx.drop(att.out));
}

ThinkLayerOutput think_layer(const Var& C_in, const Var& E, const Tensor& mask, const SegmentationResult& seg,
                             const ModelConfig& cfg, const ParameterStore& params, std::size_t layer,
                             const ForwardContext& ctx) {
  const std::string p = layer_prefix(layer);
  const std::size_t heads = cfg.heads();

  const Var C_tilde = causal_self_attn(C_in, params, p + ".self", heads, ctx);

  RoutingState rs;
  rs.G = similarity(C_tilde, seg.S, params, p + ".route", cfg.routing);
  rs.A = sinkhorn(rs.G, cfg.routing);
  rs.p = routed_summaries(rs.A, seg.S);
  rs.r = temporal_prior(rs.A, seg.W_seg);

  const Var C_hat =
      routed_xattn(C_tilde, E, mask, rs.p, rs.r, cfg.think, params, p + ".xattn", heads, cfg.seg.eps_num, ctx);
  const Var out = add(C_hat, ctx.drop(feed_forward(layer_norm(C_hat, params, p + ".ffn_ln"), params, p + ".ffn")));
  return {out, std::move(rs)};
}

ThinkOutput think(const Var& E, const Tensor& mask, const SegmentationResult& seg, const ModelConfig& cfg,
                  const ParameterStore& params, const ForwardContext& ctx) {
  ThinkOutput out;
  out.chain = init_slots(params, E.dim(0));
  for (std::size_t l = 0; l < cfg.think.L; ++l) {
    ThinkLayerOutput lo = think_layer(out.chain.C, E, mask, seg, cfg, params, l, ctx);
    out.chain = {lo.C, l + 1};
    out.layers.push_back(std::move(lo.routing));
  }
  const RoutingState& cached =
      cfg.dec.prior_source == PriorSource::Final ? out.layers.back() : out.layers.front();
  out.cache = {cached.A, seg.W_seg, cached.r};
  return out;
}

}  // namespace signthought
