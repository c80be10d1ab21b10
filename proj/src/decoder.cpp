#include "signthought/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "signthought/batch.hpp"

namespace signthought {

namespace {

std::string layer_prefix(std::size_t layer) { return "dec.layer" + std::to_string(layer); }

}  // namespace

void add_decoder_params(ParameterStore& params, const ModelConfig& cfg, std::mt19937_64& rng) {
  const std::size_t d = cfg.d();
  params.add("dec.embed", xavier_uniform(cfg.vocab_size, d, rng));
  for (std::size_t l = 0; l < cfg.dec.n_dec; ++l) {
    const std::string p = layer_prefix(l);
    add_layer_norm_params(params, p + ".self_ln", d);
    add_attention_params(params, p + ".self", d, rng);
    add_layer_norm_params(params, p + ".think_ln", d);
    add_attention_params(params, p + ".think", d, rng);
    add_layer_norm_params(params, p + ".ground_ln", d);
    add_attention_params(params, p + ".ground", d, rng);
    add_layer_norm_params(params, p + ".ffn_ln", d);
    add_ffn_params(params, p + ".ffn", d, 4 * d, rng);
  }
  add_layer_norm_params(params, "dec.out_ln", d);
  params.add("dec.out.w", xavier_uniform(d, cfg.vocab_size, rng));
  params.add("dec.out.b", Tensor({cfg.vocab_size}, 0.0));
}

Var embed_tokens(std::span<const std::int32_t> ids, std::size_t batch, std::size_t length,
                 const ParameterStore& params) {
  if (ids.size() != batch * length) throw ShapeError("embed_tokens: ids must be [B, T_t]");
  const Var& table = params["dec.embed"];
  const std::size_t d = table.dim(1);
  Tensor keep({batch, length, 1});
  for (std::size_t i = 0; i < ids.size(); ++i) keep[i] = ids[i] == kPad ? 0.0 : 1.0;
  const Var words = embedding(table, ids, {batch, length});
  return mul(add(words, Var::constant(sinusoidal_encoding(length, d))), Var::constant(std::move(keep)));
}

ThinkAttention think_xattn(const Var& H, const Var& C, const ParameterStore& params, const std::string& prefix,
                           std::size_t heads, const ForwardContext& ctx) {
  const Var q = layer_norm(H, params, prefix + "_ln");
  const AttentionResult att = attention(q, C, params, prefix, heads);
  const std::size_t batch = H.dim(0);
  const std::size_t length = H.dim(1);
  const std::size_t K = C.dim(1);
  const Var alpha = reshape(scale(sum_axis(att.weights, 1), 1.0 / static_cast<double>(heads)), {batch, length, K});
  return {add(H, ctx.drop(att.out)), alpha};
}

DecoderPrior token_frame_prior(const Var& alpha, const Var& A, const Var& W_seg) {
  DecoderPrior p;
  p.alpha = alpha;
  p.beta = matmul(alpha, A);
  p.w = matmul(p.beta, W_seg);
  return p;
}

Var grounded_xattn(const Var& H, const Var& E, const Tensor& src_mask, const Var* w, const DecoderConfig& cfg,
                   const ParameterStore& params, const std::string& prefix, std::size_t heads, double eps_num,
                   const ForwardContext& ctx) {
  const Tensor keys = key_padding_mask(src_mask);
  const Var q = layer_norm(H, params, prefix + "_ln");
  Var bias;
  const bool biased = cfg.use_prior && cfg.lambda_w > 0.0 && w != nullptr;
  if (biased) {
    const std::size_t batch = w->dim(0);
    const std::size_t length = w->dim(1);
    const std::size_t steps = w->dim(2);
    bias = reshape(scale(log(add_scalar(*w, eps_num)), cfg.lambda_w), {batch, 1, length, steps});
  }
  const AttentionResult att = attention(q, E, params, prefix, heads, &keys, biased ? &bias : nullptr);
  return add(H, ctx.drop(att.out));
}

DecoderLayerOutput decoder_layer(const Var& H, const Var& C, const Var& E, const Tensor& src_mask,
                                 const ThinkCache& cache, const ModelConfig& cfg, const ParameterStore& params,
                                 std::size_t layer, const ForwardContext& ctx) {
  const std::string p = layer_prefix(layer);
  const std::size_t heads = cfg.heads();
  const Tensor self_mask = causal_mask(H.dim(1));

  const Var s = layer_norm(H, params, p + ".self_ln");
  const Var h1 = add(H, ctx.drop(attention(s, s, params, p + ".self", heads, &self_mask).out));

  const ThinkAttention planned = think_xattn(h1, C, params, p + ".think", heads, ctx);
  DecoderPrior prior = token_frame_prior(planned.alpha, cache.A_final, cache.W_seg);

  const Var h3 = grounded_xattn(planned.out, E, src_mask, &prior.w, cfg.dec, params, p + ".ground", heads,
                                cfg.seg.eps_num, ctx);
  const Var out = add(h3, ctx.drop(feed_forward(layer_norm(h3, params, p + ".ffn_ln"), params, p + ".ffn")));
  return {out, std::move(prior)};
}

DecoderOutput forward_logits(const Var& E, const Tensor& src_mask, const Var& C, const ThinkCache& cache,
                             std::span<const std::int32_t> tokens_in, std::size_t batch, std::size_t length,
                             const ModelConfig& cfg, const ParameterStore& params, const ForwardContext& ctx) {
  DecoderOutput out;
  Var h = ctx.drop(embed_tokens(tokens_in, batch, length, params));
  for (std::size_t l = 0; l < cfg.dec.n_dec; ++l) {
    DecoderLayerOutput lo = decoder_layer(h, C, E, src_mask, cache, cfg, params, l, ctx);
    h = lo.H;
    out.priors.push_back(std::move(lo.prior));
  }
  out.logits = linear(layer_norm(h, params, "dec.out_ln"), params["dec.out.w"], params["dec.out.b"]);
  return out;
}

std::vector<std::int32_t> greedy_search(const NextLogProbs& next, std::size_t max_len) {
  if (max_len == 0) throw std::invalid_argument("greedy_search: max_len must be >= 1");
  std::vector<std::int32_t> out;
  while (out.size() < max_len) {
    const std::vector<double> lp = next(out);
    std::int32_t best = -1;
    for (std::size_t v = 0; v < lp.size(); ++v) {
      if (!std::isfinite(lp[v])) continue;
      if (best < 0 || lp[v] > lp[static_cast<std::size_t>(best)]) best = static_cast<std::int32_t>(v);
    }
    if (best < 0) throw NumericError("greedy_search: no token can be emitted");
    if (best == kEos) break;
    out.push_back(best);
  }
  return out;
}

double length_penalty(std::size_t len, double a) {
  return std::pow((5.0 + static_cast<double>(len)) / 6.0, a);
}

std::vector<std::int32_t> beam_search_core(const NextLogProbs& next, std::size_t beam, double len_penalty_a,
                                           std::size_t max_len) {
  if (beam < 1 || beam > 64) throw std::invalid_argument("beam_search: beam must lie in [1, 64]");
  if (max_len == 0) throw std::invalid_argument("beam_search: max_len must be >= 1");

  struct Hyp {
    std::vector<std::int32_t> tokens;
    double logp = 0.0;
  };
  auto better = [](const Hyp& a, const Hyp& b) {
    if (a.logp != b.logp) return a.logp > b.logp;
    return a.tokens < b.tokens;
  };

  std::vector<Hyp> alive{Hyp{}};
  std::vector<Hyp> finished;
  for (std::size_t step = 0; step < max_len; ++step) {
    std::vector<Hyp> candidates;
    for (const Hyp& h : alive) {
      const std::vector<double> lp = next(h.tokens);
      for (std::size_t v = 0; v < lp.size(); ++v) {
        if (!std::isfinite(lp[v])) continue;
        Hyp c{h.tokens, h.logp + lp[v]};
        c.tokens.push_back(static_cast<std::int32_t>(v));
        candidates.push_back(std::move(c));
      }
    }
    std::sort(candidates.begin(), candidates.end(), better);
    if (candidates.size() > beam) candidates.resize(beam);
    alive.clear();
    for (Hyp& c : candidates) {
      if (c.tokens.back() == kEos) {
        finished.push_back(std::move(c));
      } else {
        alive.push_back(std::move(c));
      }
    }
    if (finished.size() >= beam || alive.empty()) break;
  }
  if (finished.size() < beam) {
    for (Hyp& h : alive) finished.push_back(std::move(h));
  }
  if (finished.empty()) throw NumericError("beam_search: no hypothesis produced");

  const Hyp* best = nullptr;
  double best_score = 0.0;
  for (const Hyp& h : finished) {
    const double score = h.logp / length_penalty(h.tokens.size(), len_penalty_a);
    if (best == nullptr || score > best_score || (score == best_score && h.tokens < best->tokens)) {
      best = &h;
      best_score = score;
    }
  }
  std::vector<std::int32_t> out = best->tokens;
  if (!out.empty() && out.back() == kEos) out.pop_back();
  return out;
}

}  // namespace signthought
