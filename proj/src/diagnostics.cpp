#include "signthought/diagnostics.hpp"

#include <random>
#include <stdexcept>

#include "signthought/encoder.hpp"
#include "signthought/objectives.hpp"

namespace signthought {

namespace {

Var weighted_sum(const Var& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor w(x.shape());
  for (double& v : w.raw()) v = u(rng);
  return sum(mul(x, Var::constant(std::move(w))));
}

}  // namespace

TinyProblem make_tiny_problem(const RunConfig& cfg, std::uint64_t seed, std::size_t steps, std::size_t target_len) {
  if (steps < 2 || target_len < 2) throw std::invalid_argument("tiny problem needs T_s >= 2 and T_t >= 2");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d_x = cfg.model.enc.d_x;
  std::uniform_int_distribution<std::int32_t> tok(kNumSpecial, static_cast<std::int32_t>(cfg.model.vocab_size) - 1);

  std::vector<SyntheticSample> samples(2);
  const std::size_t lengths[2] = {steps, steps - steps / 3};
  const std::size_t tokens[2] = {target_len - 1, target_len - 2};
  for (std::size_t b = 0; b < 2; ++b) {
    SyntheticSample& s = samples[b];
    s.features = Tensor({lengths[b], d_x});
    for (double& v : s.features.raw()) v = normal(rng);
    for (std::size_t i = 0; i < tokens[b]; ++i) s.tokens.push_back(tok(rng));
    s.tokens.push_back(kEos);
    s.frame_to_segment.assign(lengths[b], 0);
    s.segment_symbols.assign(1, 0);
  }
  const std::size_t idx[2] = {0, 1};
  return TinyProblem{cfg, SignThoughtModel(cfg.model, seed + 1), make_batch(samples, idx)};
}

const std::vector<std::string>& grad_check_modules() {
  static const std::vector<std::string> names{"encoder", "segmentation", "thinking", "decoder", "objectives"};
  return names;
}

ModuleObjective module_objective(const std::string& module, const TinyProblem& p) {
  const ModelConfig mc = p.cfg.model;
  const LossConfig lc = p.cfg.loss;
  const ClipBatch clip = p.batch.clip;
  const TokenBatch tokens = p.batch.tokens;

  if (module == "encoder") {
    return {[=](const ParameterStore& params) { return weighted_sum(encode(clip, mc.enc, params), 11); }, "enc."};
  }
  if (module == "segmentation") {
    return {[=](const ParameterStore& params) {
              const Var E = encode(clip, mc.enc, params);
              const SegmentationResult seg = segment(E, clip.mask, params, mc.seg);
              return add(weighted_sum(seg.S, 12), weighted_sum(seg.W_seg, 13));
            },
            "seg."};
  }
  if (module == "thinking") {
    return {[=](const ParameterStore& params) {
              const Var E = encode(clip, mc.enc, params);
              const SegmentationResult seg = segment(E, clip.mask, params, mc.seg);
              const ThinkOutput th = think(E, clip.mask, seg, mc, params);
              return add(weighted_sum(th.chain.C, 14), weighted_sum(th.cache.r_final, 15));
            },
            "think."};
  }
  if (module == "decoder") {
    return {[=](const ParameterStore& params) {
              const SignThoughtModel m(mc, params);
              const ModelOutput out = m.forward(clip, tokens);
              return label_smoothed_ce(out.dec.logits, tokens.labels, lc.label_smoothing);
            },
            "dec."};
  }
  if (module == "objectives") {
    return {[=](const ParameterStore& params) {
              const SignThoughtModel m(mc, params);
              const ModelOutput out = m.forward(clip, tokens);
              const Var ce = label_smoothed_ce(out.dec.logits, tokens.labels, lc.label_smoothing);
              return total_loss(ce, out.routing(), lc).total;
            },
            ""};
  }
  throw std::invalid_argument("unknown grad-check module '" + module + "'");
}

}  // namespace signthought
