#pragma once

// Full SignThought pipeline: encoder -> segmentation -> thinking -> decoder.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "signthought/autodiff.hpp"
#include "signthought/batch.hpp"
#include "signthought/config.hpp"
#include "signthought/decoder.hpp"
#include "signthought/metrics.hpp"
#include "signthought/nn.hpp"
#include "signthought/segmentation.hpp"
#include "signthought/thinking.hpp"

namespace signthought {

// Everything computed from the clip alone; reused across decoding steps.
struct SourceState {
  Var E;
  Tensor mask;
  SegmentationResult seg;
  ThinkOutput think;
};

struct ModelOutput {
  SourceState source;
  DecoderOutput dec;

  // A of every thinking layer, first to last.
  std::vector<Var> routing() const;
};

class SignThoughtModel {
 public:
  // Xavier-uniform weights, unit LayerNorm gains, zero biases.
  SignThoughtModel(const ModelConfig& cfg, std::uint64_t seed);
  SignThoughtModel(const ModelConfig& cfg, ParameterStore params);

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  const ParameterStore& params() const { return params_; }
  ParameterStore& params() { return params_; }

  SourceState encode_source(const ClipBatch& clip, const ForwardContext& ctx = {}) const;
  DecoderOutput decode(const SourceState& src, std::span<const std::int32_t> tokens_in, std::size_t batch,
                       std::size_t length, const ForwardContext& ctx = {}) const;
  ModelOutput forward(const ClipBatch& clip, const TokenBatch& tokens, const ForwardContext& ctx = {}) const;

  // Next-token log-probabilities for a single-sample source; PAD and BOS are -inf.
  NextLogProbs next_token_fn(const SourceState& single) const;

  // Per-sample decoding (each clip encoded alone); outputs exclude EOS.
  std::vector<TokenSeq> greedy_decode(const ClipBatch& clip, std::size_t max_len) const;
  std::vector<TokenSeq> beam_decode(const ClipBatch& clip, std::size_t beam, double len_penalty_a,
                                    std::size_t max_len) const;

 private:
  ModelConfig cfg_;
  ParameterStore params_;
};

void add_model_params(ParameterStore& params, const ModelConfig& cfg, std::mt19937_64& rng);

// Sample b of a clip batch, trimmed to its valid length.
ClipBatch single_clip(const ClipBatch& clip, std::size_t b);

}  // namespace signthought
