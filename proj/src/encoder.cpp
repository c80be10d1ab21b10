#include "signthought/encoder.hpp"

namespace signthought {

namespace {

std::string block_prefix(std::size_t layer) { return "enc.block" + std::to_string(layer); }

}  // namespace

void add_encoder_params(ParameterStore& params, const EncoderConfig& cfg, std::mt19937_64& rng) {
  params.add("enc.embed.w", xavier_uniform(cfg.d_x, cfg.d, rng));
  params.add("enc.embed.b", Tensor({cfg.d}, 0.0));
  add_layer_norm_params(params, "enc.embed.ln", cfg.d);
  for (std::size_t l = 0; l < cfg.n_enc; ++l) {
    const std::string p = block_prefix(l);
    add_layer_norm_params(params, p + ".attn_ln", cfg.d);
    add_attention_params(params, p + ".attn", cfg.d, rng);
    add_layer_norm_params(params, p + ".conv_ln", cfg.d);
    params.add(p + ".conv.kernel", xavier_uniform(cfg.conv_kernel, cfg.d, rng));
    params.add(p + ".conv.bias", Tensor({cfg.d}, 0.0));
    add_layer_norm_params(params, p + ".ffn_ln", cfg.d);
    add_ffn_params(params, p + ".ffn", cfg.d, 4 * cfg.d, rng);
  }
}

Var embed_frames(const ClipBatch& clip, const EncoderConfig& cfg, const ParameterStore& params,
                 const ForwardContext& ctx) {
  if (clip.features.rank() != 3 || clip.features.dim(2) != cfg.d_x) {
    throw ShapeError("embed_frames: expected features [B, T_s, " + std::to_string(cfg.d_x) + "], got " +
                     shape_str(clip.features.shape()));
  }
  const Var x = Var::constant(clip.features);
  const Var h = layer_norm(linear(x, params["enc.embed.w"], params["enc.embed.b"]), params, "enc.embed.ln");
  return mul(ctx.drop(h), row_mask(clip.mask));
}

Var add_positional(const Var& embedded, const Tensor& mask) {
  const std::size_t steps = embedded.dim(1);
  const std::size_t d = embedded.dim(2);
  return mul(add(embedded, Var::constant(sinusoidal_encoding(steps, d))), row_mask(mask));
}

Var encoder_block(const Var& x, const Tensor& mask, const EncoderConfig& cfg, const ParameterStore& params,
                  std::size_t layer, const ForwardContext& ctx) {
  const std::string p = block_prefix(layer);
  const Var rows = row_mask(mask);
  const Tensor keys = key_padding_mask(mask);

  const Var a_in = layer_norm(x, params, p + ".attn_ln");
  Var h = mul(add(x, ctx.drop(attention(a_in, a_in, params, p + ".attn", cfg.heads, &keys).out)), rows);

  const Var c_in = mul(layer_norm(h, params, p + ".conv_ln"), rows);
  const Var conv = mul(depthwise_conv1d(c_in, params[p + ".conv.kernel"], params[p + ".conv.bias"]), rows);
  h = mul(add(h, ctx.drop(conv)), rows);

  const Var f = feed_forward(layer_norm(h, params, p + ".ffn_ln"), params, p + ".ffn");
  return mul(add(h, ctx.drop(f)), rows);
}

Var encode(const ClipBatch& clip, const EncoderConfig& cfg, const ParameterStore& params, const ForwardContext& ctx) {
  Var e = add_positional(embed_frames(clip, cfg, params, ctx), clip.mask);
  for (std::size_t l = 0; l < cfg.n_enc; ++l) e = encoder_block(e, clip.mask, cfg, params, l, ctx);
  return e;
}

}  // namespace signthought
