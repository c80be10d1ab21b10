#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "signthought/batch.hpp"
#include "signthought/decoder.hpp"
#include "signthought/diagnostics.hpp"
#include "signthought/encoder.hpp"
#include "signthought/model.hpp"
#include "signthought/nn.hpp"
#include "signthought/routing.hpp"
#include "signthought/segmentation.hpp"
#include "signthought/thinking.hpp"

using namespace signthought;
using testutil::random_tensor;

namespace {

ClipBatch random_clip(std::size_t batch, std::size_t steps, std::size_t d_x, const std::vector<std::size_t>& lens,
                      std::mt19937_64& rng) {
  return ClipBatch::from_lengths(random_tensor({batch, steps, d_x}, rng), lens);
}

oracle::Mat param_mat(const ParameterStore& p, const std::string& name) {
  const Tensor& t = p[name].value();
  return testutil::to_mat(t, 0, t.dim(0), t.dim(1));
}

}  // namespace

TEST_CASE("sinusoidal encoding and masks") {
  const Tensor pe = sinusoidal_encoding(3, 4);
  CHECK(pe[0] == 0.0);
  CHECK(pe[1] == 1.0);
  CHECK(pe[4 + 0] == doctest::Approx(std::sin(1.0)));
  CHECK(pe[4 + 2] == doctest::Approx(std::sin(1.0 / 100.0)));
  const Tensor c = causal_mask(3);
  CHECK(c[1] == -std::numeric_limits<double>::infinity());
  CHECK(c[3] == 0.0);
  const Tensor k = key_padding_mask(Tensor({1, 3}, std::vector<double>{1, 1, 0}));
  CHECK(k[1] == 0.0);
  CHECK(std::isinf(k[2]));
}

TEST_CASE("multi-head attention matches the per-head loop reference") {
  std::mt19937_64 rng(21);
  ParameterStore p;
  add_attention_params(p, "att", 4, rng);
  const Tensor q = random_tensor({2, 3, 4}, rng);
  const Tensor kv = random_tensor({2, 5, 4}, rng);
  const Tensor valid({2, 5}, std::vector<double>{1, 1, 1, 1, 1, 1, 1, 1, 0, 0});
  const Tensor mask = key_padding_mask(valid);
  const Tensor bias_t = random_tensor({2, 2, 3, 5}, rng);
  const Var bias = Var::constant(bias_t);
  const AttentionResult r = attention(Var::constant(q), Var::constant(kv), p, "att", 2, &mask, &bias);
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<bool> kvalid;
    for (std::size_t j = 0; j < 5; ++j) kvalid.push_back(valid[b * 5 + j] > 0.5);
    std::vector<oracle::Mat> bias_b;
    for (std::size_t h = 0; h < 2; ++h) bias_b.push_back(testutil::to_mat(bias_t, (b * 2 + h) * 15, 3, 5));
    std::vector<oracle::Mat> w;
    const auto ref = oracle::attention(testutil::to_mat(q, b * 12, 3, 4), testutil::to_mat(kv, b * 20, 5, 4),
                                       param_mat(p, "att.wq"), param_mat(p, "att.wk"), param_mat(p, "att.wv"),
                                       param_mat(p, "att.wo"), 2, kvalid, false, bias_b, &w);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t c = 0; c < 4; ++c) CHECK(r.out.value()[b * 12 + i * 4 + c] == doctest::Approx(ref[i][c]).epsilon(1e-12));
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j)
          CHECK(r.weights.value()[((b * 2 + h) * 3 + i) * 5 + j] == doctest::Approx(w[h][i][j]).epsilon(1e-12));
  }
}

TEST_CASE("encoder output is zero on padding and independent of padded values") {
  std::mt19937_64 rng(5);
  const RunConfig cfg = testutil::tiny();
  ParameterStore p;
  add_encoder_params(p, cfg.model.enc, rng);
  ClipBatch clip = random_clip(2, 7, cfg.model.enc.d_x, {7, 4}, rng);
  const Var e1 = encode(clip, cfg.model.enc, p);
  CHECK(e1.shape() == Shape{2, 7, cfg.model.enc.d});
  const std::size_t d = cfg.model.enc.d;
  for (std::size_t t = 4; t < 7; ++t)
    for (std::size_t c = 0; c < d; ++c) CHECK(e1.value()[(7 + t) * d + c] == 0.0);
  for (std::size_t t = 4; t < 7; ++t)
    for (std::size_t c = 0; c < cfg.model.enc.d_x; ++c) clip.features[(7 + t) * cfg.model.enc.d_x + c] = 1e3 * (c + 1.0);
  const Var e2 = encode(clip, cfg.model.enc, p);
  CHECK(testutil::max_abs_diff(e1.value(), e2.value()) <= 1e-12);
}

TEST_CASE("segmentation matches the scalar reference") {
  std::mt19937_64 rng(31);
  SegmentationConfig sc;
  sc.M = 4;
  sc.gamma = 1.3;
  const std::size_t d = 5;
  ParameterStore p;
  add_segmentation_params(p, d, sc, rng);
  const std::vector<std::size_t> lens{9, 6};
  const Tensor E_t = random_tensor({2, 9, d}, rng);
  const ClipBatch clip = ClipBatch::from_lengths(Tensor({2, 9, 1}), lens);
  Tensor E_masked = E_t;
  for (std::size_t t = 6; t < 9; ++t)
    for (std::size_t c = 0; c < d; ++c) E_masked[(9 + t) * d + c] = 0.0;
  const SegmentationResult r = segment(Var::constant(E_masked), clip.mask, p, sc);

  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<double> z(d, 0.0);
    for (std::size_t t = 0; t < lens[b]; ++t)
      for (std::size_t c = 0; c < d; ++c) z[c] += E_masked[(b * 9 + t) * d + c];
    for (double& v : z) v /= static_cast<double>(lens[b]) + sc.eps_num;
    const auto h1 = oracle::matmul({z}, param_mat(p, "seg.mlp.w1"))[0];
    std::vector<double> h(h1.size());
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = std::max(0.0, h1[i] + p["seg.mlp.b1"].value()[i]);
    const auto o = oracle::matmul({h}, param_mat(p, "seg.mlp.w2"))[0];
    std::vector<double> rho(sc.M), pi(sc.M);
    double tot = 0.0;
    for (std::size_t j = 0; j < sc.M; ++j) tot += rho[j] = oracle::softplus(o[j] + p["seg.mlp.b2"].value()[j]);
    for (std::size_t j = 0; j < sc.M; ++j) pi[j] = rho[j] / (tot + sc.eps_num);
    for (std::size_t j = 0; j < sc.M; ++j) CHECK(r.pi.value()[b * sc.M + j] == doctest::Approx(pi[j]).epsilon(1e-12));

    const auto W = oracle::membership(pi, lens[b], 9, sc.gamma, sc.eps_num);
    for (std::size_t j = 0; j < sc.M; ++j)
      for (std::size_t t = 0; t < 9; ++t)
        CHECK(r.W_seg.value()[(b * sc.M + j) * 9 + t] == doctest::Approx(W[j][t]).epsilon(1e-12));
    const auto S = oracle::matmul(W, testutil::to_mat(E_masked, b * 9 * d, 9, d));
    for (std::size_t j = 0; j < sc.M; ++j)
      for (std::size_t c = 0; c < d; ++c) CHECK(r.S.value()[(b * sc.M + j) * d + c] == doctest::Approx(S[j][c]).epsilon(1e-12));
    CHECK(r.tau.value()[b * (sc.M + 1)] == 1.0);
    CHECK(r.tau.value()[b * (sc.M + 1) + sc.M] == doctest::Approx(static_cast<double>(lens[b])).epsilon(1e-5));
  }
}

TEST_CASE("segmentation degenerate cases stay stochastic") {
  std::mt19937_64 rng(6);
  for (std::size_t M : {std::size_t{1}, std::size_t{3}}) {
    SegmentationConfig sc;
    sc.M = M;
    ParameterStore p;
    add_segmentation_params(p, 4, sc, rng);
    const ClipBatch clip = ClipBatch::from_lengths(Tensor({2, 5, 1}), {1, 5});
    const SegmentationResult r = segment(Var::constant(random_tensor({2, 5, 4}, rng)), clip.mask, p, sc);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t j = 0; j < M; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < 5; ++t) s += r.W_seg.value()[(b * M + j) * 5 + t];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
      }
    // L_valid = 1: all mass on the single valid frame.
    for (std::size_t j = 0; j < M; ++j) CHECK(r.W_seg.value()[j * 5] == doctest::Approx(1.0));
  }
}

TEST_CASE("sinkhorn matches the loop reference and its marginals") {
  std::mt19937_64 rng(41);
  const auto G = oracle::random_mat(8, 16, rng, -3.0, 3.0);
  RoutingConfig rc;
  const Var A = sinkhorn(Var::constant(testutil::from_mat(G)), rc);
  const auto ref = oracle::sinkhorn(G, rc.sinkhorn_iters);
  for (std::size_t k = 0; k < 8; ++k) {
    double row = 0.0;
    for (std::size_t j = 0; j < 16; ++j) {
      CHECK(A.value()[k * 16 + j] == doctest::Approx(ref[k][j]).epsilon(1e-12));
      row += A.value()[k * 16 + j];
    }
    CHECK(std::abs(row - 1.0) <= 1e-9);
  }
  for (std::size_t j = 0; j < 16; ++j) {
    double col = 0.0;
    for (std::size_t k = 0; k < 8; ++k) col += A.value()[k * 16 + j];
    CHECK(std::abs(col - 0.5) <= 1e-2);
  }
}

TEST_CASE("sinkhorn examples") {
  RoutingConfig rc;
  // Uniform similarities give every entry 1/M.
  const Var A = sinkhorn(Var::constant(Tensor({2, 4}, 0.0)), rc);
  for (double v : A.value().raw()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  // A large constant shift per row changes nothing.
  std::mt19937_64 rng(1);
  Tensor g = random_tensor({3, 3}, rng);
  const Var a1 = sinkhorn(Var::constant(g), rc);
  for (std::size_t j = 0; j < 3; ++j) g[j] += 500.0;
  const Var a2 = sinkhorn(Var::constant(g), rc);
  CHECK(testutil::max_abs_diff(a1.value(), a2.value()) <= 1e-12);
}

TEST_CASE("monotonic similarity bias penalizes off-diagonal routing") {
  std::mt19937_64 rng(2);
  ParameterStore p;
  add_routing_params(p, "r", 4, rng);
  const Var C = Var::constant(random_tensor({1, 2, 4}, rng));
  const Var S = Var::constant(random_tensor({1, 2, 4}, rng));
  RoutingConfig plain;
  RoutingConfig biased;
  biased.monotonic_bias_eta = 2.0;
  const Var g0 = similarity(C, S, p, "r", plain);
  const Var g1 = similarity(C, S, p, "r", biased);
  CHECK(g1.value()[0] == doctest::Approx(g0.value()[0]));                 // k=1, j=1: no gap
  CHECK(g1.value()[1] == doctest::Approx(g0.value()[1] - 2.0 * 0.25));    // (1/2 - 1)^2 = 0.25
}

TEST_CASE("causal thought mixing ignores later thoughts") {
  std::mt19937_64 rng(3);
  const RunConfig cfg = testutil::tiny();
  ParameterStore p;
  add_thinking_params(p, cfg.model, rng);
  Tensor C = random_tensor({2, 3, cfg.model.d()}, rng);
  const Var out1 = causal_self_attn(Var::constant(C), p, "think.layer0.self", cfg.model.heads());
  for (std::size_t k = 0; k < 3; ++k) {
    Tensor C2 = C;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t kk = k + 1; kk < 3; ++kk)
        for (std::size_t c = 0; c < cfg.model.d(); ++c) C2[(b * 3 + kk) * cfg.model.d() + c] += 3.7;
    const Var out2 = causal_self_attn(Var::constant(C2), p, "think.layer0.self", cfg.model.heads());
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t kk = 0; kk <= k; ++kk)
        for (std::size_t c = 0; c < cfg.model.d(); ++c) {
          const std::size_t i = (b * 3 + kk) * cfg.model.d() + c;
          CHECK(std::abs(out1.value()[i] - out2.value()[i]) <= 1e-12);
        }
  }
}

TEST_CASE("routed cross-attention without priors is vanilla cross-attention") {
  std::mt19937_64 rng(4);
  RunConfig cfg = testutil::tiny();
  ParameterStore p;
  add_thinking_params(p, cfg.model, rng);
  const std::size_t d = cfg.model.d();
  const Var C = Var::constant(random_tensor({2, 3, d}, rng));
  const Var E = Var::constant(random_tensor({2, 6, d}, rng));
  const Var pvec = Var::constant(random_tensor({2, 3, d}, rng));
  const Var r = Var::constant(random_tensor({2, 3, 6}, rng, 0.01, 1.0));
  const Tensor mask({2, 6}, std::vector<double>{1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0});
  const Tensor keys = key_padding_mask(mask);
  const Var vanilla = add(C, attention(layer_norm(C, p, "think.layer0.xattn_ln"), E, p, "think.layer0.xattn",
                                       cfg.model.heads(), &keys).out);

  ThinkConfig zero = cfg.model.think;
  zero.lambda_p = 0.0;
  const Var a = routed_xattn(C, E, mask, pvec, r, zero, p, "think.layer0.xattn", cfg.model.heads());
  CHECK(a.value().raw() == vanilla.value().raw());

  ThinkConfig off = cfg.model.think;
  off.use_content_bias = false;
  off.use_log_prior_bias = false;
  const Var b = routed_xattn(C, E, mask, pvec, r, off, p, "think.layer0.xattn", cfg.model.heads());
  CHECK(b.value().raw() == vanilla.value().raw());

  const Var biased = routed_xattn(C, E, mask, pvec, r, cfg.model.think, p, "think.layer0.xattn", cfg.model.heads());
  CHECK(testutil::max_abs_diff(biased.value(), vanilla.value()) > 1e-6);
}

TEST_CASE("decoder logits are causal in the target tokens") {
  const RunConfig cfg = testutil::tiny();
  const TinyProblem pb = make_tiny_problem(cfg, 17);
  const SourceState src = pb.model.encode_source(pb.batch.clip);
  const TokenBatch& tb = pb.batch.tokens;
  const Tensor base = pb.model.decode(src, tb.input, tb.batch, tb.length).logits.value();
  const std::size_t V = cfg.model.vocab_size;
  for (std::size_t t = 0; t + 1 < tb.length; ++t) {
    std::vector<std::int32_t> changed = tb.input;
    for (std::size_t b = 0; b < tb.batch; ++b)
      for (std::size_t s = t + 1; s < tb.length; ++s) changed[b * tb.length + s] = static_cast<std::int32_t>(4 + (s * 7 + b) % 4);
    const Tensor alt = pb.model.decode(src, changed, tb.batch, tb.length).logits.value();
    for (std::size_t b = 0; b < tb.batch; ++b)
      for (std::size_t s = 0; s <= t; ++s)
        for (std::size_t v = 0; v < V; ++v) {
          const std::size_t i = (b * tb.length + s) * V + v;
          CHECK(std::abs(base[i] - alt[i]) <= 1e-10);
        }
  }
}

TEST_CASE("decoder without prior equals a standard three-sublayer decoder") {
  RunConfig cfg = testutil::tiny();
  cfg.model.dec.use_prior = false;
  const TinyProblem pb = make_tiny_problem(cfg, 18);
  const ParameterStore& p = pb.model.params();
  const SourceState src = pb.model.encode_source(pb.batch.clip);
  const TokenBatch& tb = pb.batch.tokens;
  const Tensor got = pb.model.decode(src, tb.input, tb.batch, tb.length).logits.value();

  const std::size_t H = cfg.model.heads();
  const Tensor self_mask = causal_mask(tb.length);
  const Tensor keys = key_padding_mask(src.mask);
  Var h = embed_tokens(tb.input, tb.batch, tb.length, p);
  for (std::size_t l = 0; l < cfg.model.dec.n_dec; ++l) {
    const std::string pre = "dec.layer" + std::to_string(l);
    Var s = layer_norm(h, p, pre + ".self_ln");
    h = add(h, attention(s, s, p, pre + ".self", H, &self_mask).out);
    h = add(h, attention(layer_norm(h, p, pre + ".think_ln"), src.think.chain.C, p, pre + ".think", H).out);
    h = add(h, attention(layer_norm(h, p, pre + ".ground_ln"), src.E, p, pre + ".ground", H, &keys).out);
    h = add(h, feed_forward(layer_norm(h, p, pre + ".ffn_ln"), p, pre + ".ffn"));
  }
  const Var ref = linear(layer_norm(h, p, "dec.out_ln"), p["dec.out.w"], p["dec.out.b"]);
  CHECK(got.raw() == ref.value().raw());
}

TEST_CASE("token-to-frame prior rows are distributions over valid frames") {
  const RunConfig cfg = testutil::tiny();
  const TinyProblem pb = make_tiny_problem(cfg, 19);
  const ModelOutput out = pb.model.forward(pb.batch.clip, pb.batch.tokens);
  const std::size_t T_s = pb.batch.clip.steps();
  for (const DecoderPrior& pr : out.dec.priors) {
    const Tensor& w = pr.w.value();
    const std::size_t T_t = w.dim(1);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < T_t; ++i) {
        double s = 0.0;
        for (std::size_t t = 0; t < T_s; ++t) {
          const double v = w[(b * T_t + i) * T_s + t];
          s += v;
          if (t >= pb.batch.clip.valid_len[b]) CHECK(v == 0.0);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
      }
  }
}

TEST_CASE("batch of one matches the batched forward and padding is inert") {
  const RunConfig cfg = testutil::tiny();
  TinyProblem pb = make_tiny_problem(cfg, 20);
  const ModelOutput full = pb.model.forward(pb.batch.clip, pb.batch.tokens);
  const std::size_t V = cfg.model.vocab_size;
  const std::size_t T_t = pb.batch.tokens.length;

  // Sample 1 alone, clip trimmed to its valid frames.
  const ClipBatch one = single_clip(pb.batch.clip, 1);
  TokenBatch tb;
  tb.batch = 1;
  tb.length = T_t;
  tb.input.assign(pb.batch.tokens.input.begin() + static_cast<std::ptrdiff_t>(T_t), pb.batch.tokens.input.end());
  const Tensor solo = pb.model.forward(one, tb).dec.logits.value();
  for (std::size_t i = 0; i < T_t * V; ++i) CHECK(std::abs(solo[i] - full.dec.logits.value()[T_t * V + i]) <= 1e-12);

  // Garbage in padded frames does not move anything.
  ClipBatch noisy = pb.batch.clip;
  const std::size_t d_x = cfg.model.enc.d_x;
  for (std::size_t t = noisy.valid_len[1]; t < noisy.steps(); ++t)
    for (std::size_t c = 0; c < d_x; ++c) noisy.features[(noisy.steps() + t) * d_x + c] = -77.0 + static_cast<double>(c);
  const Tensor again = pb.model.forward(noisy, pb.batch.tokens).dec.logits.value();
  CHECK(testutil::max_abs_diff(again, full.dec.logits.value()) <= 1e-8);
}

TEST_CASE("beam search equals exhaustive enumeration when the beam covers everything") {
  // Vocabulary {PAD, BOS, EOS, a, b}; log-probs depend on the prefix through a hash.
  const std::size_t V = 5;
  const NextLogProbs next = [V](const std::vector<std::int32_t>& prefix) {
    std::uint64_t h = 1469598103934665603ULL;
    for (auto t : prefix) h = (h ^ static_cast<std::uint64_t>(t + 1)) * 1099511628211ULL;
    std::mt19937_64 rng(h);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    std::vector<double> logits(V);
    for (double& x : logits) x = u(rng);
    const auto p = oracle::softmax({logits[2], logits[3], logits[4]});
    std::vector<double> lp(V, -std::numeric_limits<double>::infinity());
    for (std::size_t v = 2; v < V; ++v) lp[v] = std::log(p[v - 2]);
    return lp;
  };
  const std::size_t max_len = 4;
  for (double a : {0.0, 0.6, 1.0}) {
    // Enumerate every sequence that ends at EOS or reaches max_len.
    std::vector<std::int32_t> best;
    double best_score = -std::numeric_limits<double>::infinity();
    std::function<void(std::vector<std::int32_t>, double)> walk = [&](std::vector<std::int32_t> seq, double lp) {
      const bool done = (!seq.empty() && seq.back() == kEos) || seq.size() == max_len;
      if (done) {
        const double score = lp / length_penalty(seq.size(), a);
        std::vector<std::int32_t> out = seq;
        if (!out.empty() && out.back() == kEos) out.pop_back();
        if (score > best_score) {
          best_score = score;
          best = out;
        }
        return;
      }
      const auto l = next(seq);
      for (std::size_t v = 0; v < V; ++v) {
        if (!std::isfinite(l[v])) continue;
        auto s = seq;
        s.push_back(static_cast<std::int32_t>(v));
        walk(s, lp + l[v]);
      }
    };
    walk({}, 0.0);
    CAPTURE(a);
    CHECK(beam_search_core(next, 64, a, max_len) == best);
  }
  CHECK(beam_search_core(next, 1, 0.0, max_len) == greedy_search(next, max_len));
  CHECK_THROWS(beam_search_core(next, 0, 0.0, 3));
  CHECK_THROWS(beam_search_core(next, 65, 0.0, 3));
}

TEST_CASE("length penalty") {
  CHECK(length_penalty(1, 1.0) == doctest::Approx(1.0));
  CHECK(length_penalty(7, 1.0) == doctest::Approx(2.0));
  CHECK(length_penalty(7, 0.0) == 1.0);
}

TEST_CASE("model beam 1 decoding equals greedy decoding") {
  const RunConfig cfg = testutil::tiny();
  const TinyProblem pb = make_tiny_problem(cfg, 23);
  const auto g = pb.model.greedy_decode(pb.batch.clip, 6);
  const auto b = pb.model.beam_decode(pb.batch.clip, 1, 0.0, 6);
  CHECK(g == b);
  for (const auto& seq : g)
    for (auto t : seq) {
      CHECK(t != kPad);
      CHECK(t != kBos);
      CHECK(t != kEos);
    }
}

TEST_CASE("module gradients pass finite differences at tiny dimensions") {
  const RunConfig cfg = testutil::tiny();
  TinyProblem pb = make_tiny_problem(cfg, 29);
  GradCheckOptions opts;
  opts.max_coords_per_param = 6;
  for (const std::string& m : grad_check_modules()) {
    const ModuleObjective obj = module_objective(m, pb);
    opts.prefix = obj.prefix;
    const GradCheckReport r = grad_check(obj.f, pb.model.params(), opts);
    CAPTURE(m);
    CHECK_MESSAGE(r.passed, m << ": " << r.worst_param << " " << r.max_rel_err);
    CHECK(r.coords_checked > 0);
  }
}
