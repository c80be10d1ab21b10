#include "signthought/model.hpp"

#include <cmath>
#include <limits>

#include "signthought/encoder.hpp"

namespace signthought {

std::vector<Var> ModelOutput::routing() const {
  std::vector<Var> out;
  for (const RoutingState& rs : source.think.layers) out.push_back(rs.A);
  return out;
}

void add_model_params(ParameterStore& params, const ModelConfig& cfg, std::mt19937_64& rng) {
  add_encoder_params(params, cfg.enc, rng);
  add_segmentation_params(params, cfg.d(), cfg.seg, rng);
  add_thinking_params(params, cfg, rng);
  add_decoder_params(params, cfg, rng);
}

SignThoughtModel::SignThoughtModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  add_model_params(params_, cfg_, rng);
}

SignThoughtModel::SignThoughtModel(const ModelConfig& cfg, ParameterStore params)
    : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
}

SourceState SignThoughtModel::encode_source(const ClipBatch& clip, const ForwardContext& ctx) const {
  SourceState s;
  s.mask = clip.mask;
  s.E = encode(clip, cfg_.enc, params_, ctx);
  s.seg = segment(s.E, clip.mask, params_, cfg_.seg);
  s.think = think(s.E, clip.mask, s.seg, cfg_, params_, ctx);
  return s;
}

DecoderOutput SignThoughtModel::decode(const SourceState& src, std::span<const std::int32_t> tokens_in,
                                       std::size_t batch, std::size_t length, const ForwardContext& ctx) const {
  return forward_logits(src.E, src.mask, src.think.chain.C, src.think.cache, tokens_in, batch, length, cfg_,
                        params_, ctx);
}

ModelOutput SignThoughtModel::forward(const ClipBatch& clip, const TokenBatch& tokens,
                                      const ForwardContext& ctx) const {
  ModelOutput out;
  out.source = encode_source(clip, ctx);
  out.dec = decode(out.source, tokens.input, tokens.batch, tokens.length, ctx);
  return out;
}

NextLogProbs SignThoughtModel::next_token_fn(const SourceState& single) const {
  return [this, &single](const std::vector<std::int32_t>& prefix) {
    std::vector<std::int32_t> input{kBos};
    input.insert(input.end(), prefix.begin(), prefix.end());
    const DecoderOutput dec = decode(single, input, 1, input.size());
    const std::size_t vocab = cfg_.vocab_size;
    const auto all = dec.logits.value().data();
    const auto last = all.subspan((input.size() - 1) * vocab, vocab);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : last) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : last) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    std::vector<double> lp(vocab);
    for (std::size_t v = 0; v < vocab; ++v) lp[v] = last[v] - log_z;
    lp[kPad] = -std::numeric_limits<double>::infinity();
    lp[kBos] = -std::numeric_limits<double>::infinity();
    return lp;
  };
}

std::vector<TokenSeq> SignThoughtModel::greedy_decode(const ClipBatch& clip, std::size_t max_len) const {
  NoGradGuard no_grad;
  std::vector<TokenSeq> out;
  for (std::size_t b = 0; b < clip.batch(); ++b) {
    const SourceState src = encode_source(single_clip(clip, b));
    out.push_back(greedy_search(next_token_fn(src), max_len));
  }
  return out;
}

std::vector<TokenSeq> SignThoughtModel::beam_decode(const ClipBatch& clip, std::size_t beam, double len_penalty_a,
                                                    std::size_t max_len) const {
  NoGradGuard no_grad;
  std::vector<TokenSeq> out;
  for (std::size_t b = 0; b < clip.batch(); ++b) {
    const SourceState src = encode_source(single_clip(clip, b));
    out.push_back(beam_search_core(next_token_fn(src), beam, len_penalty_a, max_len));
  }
  return out;
}

ClipBatch single_clip(const ClipBatch& clip, std::size_t b) {
  const std::size_t steps = clip.steps();
  const std::size_t d_x = clip.features.dim(2);
  const std::size_t len = clip.valid_len.at(b);
  const auto src = clip.features.data().subspan(b * steps * d_x, len * d_x);
  return ClipBatch::from_lengths(Tensor({1, len, d_x}, std::vector<double>(src.begin(), src.end())), {len});
}

}  // namespace signthought
