#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "signthought/data.hpp"
#include "signthought/diagnostics.hpp"
#include "signthought/trainer.hpp"

using namespace signthought;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("signthought_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig small_run() {
  RunConfig cfg = testutil::tiny();
  cfg.train.batch_size = 4;
  cfg.train.warmup_steps = 4;
  cfg.synth.segs_max = 4;
  cfg.synth.seg_len_max = 5;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("Adam with decoupled decay matches a scalar hand-stepped reference") {
  TrainConfig tc;
  tc.weight_decay = 0.01;
  ParameterStore p;
  p.add("w", Tensor({3}, std::vector<double>{0.5, -1.0, 2.0}));
  AdamState st;
  std::vector<oracle::ScalarAdam> ref(3, oracle::ScalarAdam{0.05, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay});
  std::vector<double> theta{0.5, -1.0, 2.0};
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int step = 0; step < 25; ++step) {
    Tensor g({3});
    for (std::size_t i = 0; i < 3; ++i) {
      g[i] = u(rng);
      theta[i] = ref[i].step(theta[i], g[i]);
    }
    GradientMap grads;
    grads.emplace("w", g);
    adam_step(p, grads, st, tc, 0.05);
  }
  CHECK(st.step == 25);
  for (std::size_t i = 0; i < 3; ++i) CHECK(p["w"].value()[i] == doctest::Approx(theta[i]).epsilon(1e-13));
}

TEST_CASE("gradient clipping rescales to the requested norm") {
  GradientMap g;
  g.emplace("a", Tensor({2}, std::vector<double>{3, 0}));
  g.emplace("b", Tensor({1}, std::vector<double>{4}));
  CHECK(clip_grad_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g.at("a")[0] == doctest::Approx(0.6));
  CHECK(g.at("b")[0] == doctest::Approx(0.8));
}

TEST_CASE("warmup and plateau schedule") {
  TrainConfig tc;
  CHECK(lr_at(1000, 0, tc) == doctest::Approx(0.5e-3));
  CHECK(lr_at(2000, 0, tc) == doctest::Approx(1e-3));
  CHECK(lr_at(5000, 2, tc) == doctest::Approx(1e-3 * 0.64));

  PlateauScheduler s(tc);
  CHECK(s.observe(0.5, 3000));
  for (int i = 0; i < 2; ++i) CHECK_FALSE(s.observe(0.4, 3000));
  CHECK(s.reductions() == 0);
  s.observe(0.4, 3000);
  CHECK(s.reductions() == 1);
  CHECK(s.lr_at(3000) == doctest::Approx(0.8e-3));
  // Stalls inside warmup are not counted.
  PlateauScheduler w(tc);
  w.observe(0.5, 10);
  for (int i = 0; i < 10; ++i) w.observe(0.1, 10);
  CHECK(w.reductions() == 0);
  // 0.8^k < 0.1 first at k = 11.
  PlateauScheduler d(tc);
  d.observe(1.0, 3000);
  for (int i = 0; i < 30; ++i) d.observe(0.0, 3000);
  CHECK(d.reductions() == 10);
  CHECK_FALSE(d.should_stop());
  for (int i = 0; i < 3; ++i) d.observe(0.0, 3000);
  CHECK(d.should_stop());
}

TEST_CASE("checkpoint round-trip reproduces the forward pass") {
  const RunConfig cfg = small_run();
  TinyProblem pb = make_tiny_problem(cfg, 3);
  TrainerState st;
  st.adam.step = 7;
  st.adam.m.emplace("enc.embed.b", Tensor({cfg.model.d()}, 0.25));
  st.adam.v.emplace("enc.embed.b", Tensor({cfg.model.d()}, 0.5));
  st.epoch = 2;
  st.reductions = 1;
  st.best = 0.75;
  st.rng_state = "12345";
  const fs::path dir = scratch("ckpt");
  save_checkpoint(dir / "a.sgtc", cfg, pb.model.params(), st);
  const Checkpoint ck = load_checkpoint(dir / "a.sgtc");
  CHECK(ck.config.to_text() == cfg.to_text());
  CHECK(ck.state.adam.step == 7);
  CHECK(ck.state.epoch == 2);
  CHECK(ck.state.reductions == 1);
  CHECK(ck.state.best == 0.75);
  CHECK(ck.state.rng_state == "12345");
  CHECK(ck.state.adam.m.at("enc.embed.b").raw() == st.adam.m.at("enc.embed.b").raw());

  SignThoughtModel again(ck.config.model, ck.params);
  const Tensor a = pb.model.forward(pb.batch.clip, pb.batch.tokens).dec.logits.value();
  const Tensor b = again.forward(pb.batch.clip, pb.batch.tokens).dec.logits.value();
  CHECK(testutil::max_abs_diff(a, b) <= 1e-12);

  // Saving the reloaded checkpoint yields the same bytes.
  save_checkpoint(dir / "b.sgtc", ck.config, ck.params, ck.state);
  CHECK(slurp(dir / "a.sgtc") == slurp(dir / "b.sgtc"));

  // Loading into a differently shaped store names the offender.
  RunConfig other = cfg;
  other.set("num_thoughts", "4");
  SignThoughtModel wrong(other.model, 1);
  try {
    load_params_into(ck, wrong.params());
    FAIL("expected a mismatch");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("think.slots") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("truncated or corrupted checkpoints fail cleanly") {
  const RunConfig cfg = small_run();
  SignThoughtModel model(cfg.model, 2);
  const fs::path dir = scratch("ckpt_fuzz");
  save_checkpoint(dir / "c.sgtc", cfg, model.params(), TrainerState{});
  const std::string good = slurp(dir / "c.sgtc");
  auto load_bytes = [&](const std::string& bytes) {
    {
      std::ofstream out(dir / "x.sgtc", std::ios::binary);
      out << bytes;
    }
    try {
      load_checkpoint(dir / "x.sgtc");
    } catch (const CheckpointError&) {
      return false;
    }
    return true;
  };
  CHECK(load_bytes(good));
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = rng() % good.size();
    CHECK_FALSE(load_bytes(good.substr(0, n)));
  }
  CHECK_FALSE(load_bytes(good + "z"));
  CHECK_FALSE(load_bytes("XXXXX" + good.substr(5)));
  for (int trial = 0; trial < 60; ++trial) {
    std::string f = good;
    f[rng() % 200] = static_cast<char>(rng() & 0xff);
    try {
      load_bytes(f);
    } catch (const std::exception&) {
      // Anything but a crash is acceptable for a flipped manifest byte.
    }
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.sgtc"), CheckpointError);
  fs::remove_all(dir);
}

TEST_CASE("epoch batches depend only on seed and epoch") {
  const RunConfig cfg = small_run();
  const auto train = gen_dataset(cfg.synth, 1, 30);
  const Trainer a(cfg, train, train);
  const Trainer b(cfg, train, train);
  CHECK(a.epoch_batches(3) == b.epoch_batches(3));
  CHECK(a.epoch_batches(3) != a.epoch_batches(4));
  std::vector<std::size_t> seen;
  for (const auto& batch : a.epoch_batches(0)) {
    CHECK(batch.size() <= cfg.train.batch_size);
    seen.insert(seen.end(), batch.begin(), batch.end());
  }
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < seen.size(); ++i) CHECK(seen[i] == i);
}

TEST_CASE("training reduces the loss and resuming is bit-identical") {
  RunConfig cfg = small_run();
  cfg.train.lr = 3e-3;
  const auto train = gen_dataset(cfg.synth, 1, 24);
  const auto dev = gen_dataset(cfg.synth, 2, 8);

  Trainer straight(cfg, train, dev);
  TrainOptions o2;
  o2.max_epochs = 4;
  const TrainResult r = straight.run(o2);
  CHECK(r.steps == 24);
  CHECK(r.epochs == 4);
  CHECK(r.stop_reason == "max_epochs");
  CHECK(r.log.back().total < r.log.front().total);

  const fs::path dir = scratch("resume");
  Trainer first(cfg, train, dev);
  TrainOptions o1;
  o1.max_epochs = 2;
  o1.out_dir = dir;
  first.run(o1);
  CHECK(fs::exists(dir / "last.sgtc"));
  CHECK(fs::exists(dir / "best.sgtc"));
  Trainer second(cfg, train, dev);
  TrainOptions o3;
  o3.max_epochs = 4;
  o3.resume = dir / "last.sgtc";
  o3.out_dir = dir;
  second.run(o3);
  for (const auto& e : straight.model().params())
    CHECK(second.model().params()[e.name].value().raw() == e.var.value().raw());
  std::ifstream log(dir / "train_log.csv");
  std::string header;
  std::getline(log, header);
  CHECK(header == log_csv_header());
  std::size_t rows = 0;
  for (std::string line; std::getline(log, line);) ++rows;
  CHECK(rows == 24);
  fs::remove_all(dir);
}

TEST_CASE("evaluation reports teacher-forced accuracy and decoded metrics") {
  const RunConfig cfg = small_run();
  const auto dev = gen_dataset(cfg.synth, 2, 6);
  SignThoughtModel model(cfg.model, 5);
  EvalOptions eo;
  eo.batch_size = 4;
  const EvalDetail d = evaluate(model, dev, eo);
  CHECK(d.hypotheses.size() == dev.size());
  CHECK(d.metrics.token_acc >= 0.0);
  CHECK(d.metrics.token_acc <= 1.0);
  CHECK(d.metrics.interp.samples == dev.size());
  eo.decode = false;
  const EvalDetail nd = evaluate(model, dev, eo);
  CHECK(nd.hypotheses.empty());
  CHECK(nd.metrics.token_acc == d.metrics.token_acc);
}
