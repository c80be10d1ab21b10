#pragma once

// Optimizer, learning-rate schedule, training/evaluation loops and the SGTC1
// checkpoint format.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "signthought/autodiff.hpp"
#include "signthought/config.hpp"
#include "signthought/data.hpp"
#include "signthought/metrics.hpp"
#include "signthought/model.hpp"
#include "signthought/objectives.hpp"

namespace signthought {

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::uint64_t step = 0;  // completed updates
};

// One bias-corrected Adam update at learning rate lr, preceded by decoupled
// weight decay theta <- theta (1 - lr * wd). Increments state.step.
void adam_step(ParameterStore& params, const GradientMap& grads, AdamState& state, const TrainConfig& cfg,
               double lr);

// Rescales grads in place so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_grad_norm(GradientMap& grads, double max_norm);

// Linear warmup to the base rate, then base * factor^reductions. A reduction
// fires after `patience` consecutive evaluations without improvement.
class PlateauScheduler {
 public:
  explicit PlateauScheduler(const TrainConfig& cfg) : cfg_(cfg) {}

  double lr_at(std::uint64_t step) const;
  // Records a dev score (higher is better) observed after `step` updates.
  // Returns true when it is a new best.
  bool observe(double score, std::uint64_t step);
  bool should_stop() const { return current_scale() * cfg_.lr < cfg_.stop_lr; }

  std::size_t reductions() const { return reductions_; }
  std::size_t evals_without_improvement() const { return bad_evals_; }
  std::optional<double> best() const { return best_; }
  void restore(std::size_t reductions, std::size_t bad_evals, std::optional<double> best) {
    reductions_ = reductions;
    bad_evals_ = bad_evals;
    best_ = best;
  }

 private:
  double current_scale() const;

  TrainConfig cfg_;
  std::size_t reductions_ = 0;
  std::size_t bad_evals_ = 0;
  std::optional<double> best_;
};

// lr for a given step and number of triggered reductions.
double lr_at(std::uint64_t step, std::size_t reductions, const TrainConfig& cfg);

struct EvalOptions {
  bool decode = true;      // greedy decoding for BLEU / ROUGE-L
  std::size_t beam = 1;
  double len_penalty = 0.0;
  std::size_t batch_size = 50;
  std::size_t max_extra_len = 4;  // decode up to reference length + this
};

struct EvalDetail {
  EvalMetrics metrics;
  std::vector<TokenSeq> hypotheses;
};

// Teacher-forced token accuracy, routing metrics on the final A, alignment
// purity of the cached temporal prior, and (optionally) decoded BLEU / ROUGE-L.
EvalDetail evaluate(const SignThoughtModel& model, const std::vector<SyntheticSample>& samples,
                    const EvalOptions& opts = {});

struct LogRow {
  std::uint64_t step = 0;
  double lr = 0.0;
  double ce = 0.0;
  double mono = 0.0;
  double cont = 0.0;
  double total = 0.0;
  std::optional<EvalMetrics> eval;
};

std::string log_csv_header();
std::string log_csv_row(const LogRow& row);

struct TrainerState {
  AdamState adam;
  std::uint64_t epoch = 0;  // completed epochs
  std::size_t reductions = 0;
  std::size_t bad_evals = 0;
  std::optional<double> best;
  std::string rng_state;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  RunConfig config;
  ParameterStore params;
  TrainerState state;
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const ParameterStore& params,
                     const TrainerState& state);
// Reads a checkpoint and rebuilds its parameter store from the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Copies checkpoint parameters into an existing store; every name and shape must match.
void load_params_into(const Checkpoint& ckpt, ParameterStore& params);

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // best.sgtc, last.sgtc, train_log.csv
  std::optional<std::filesystem::path> resume;
  std::optional<std::size_t> max_epochs;         // overrides cfg.train.max_epochs
  bool decode_during_eval = false;               // BLEU at each evaluation (slow)
  std::function<void(const LogRow&)> on_eval;
  std::function<void(const LogRow&)> on_step;
};

struct TrainResult {
  std::uint64_t steps = 0;
  std::uint64_t epochs = 0;
  double best_dev = 0.0;
  EvalMetrics last_eval;
  std::vector<LogRow> log;
  std::string stop_reason;
};

class Trainer {
 public:
  Trainer(RunConfig cfg, const std::vector<SyntheticSample>& train, const std::vector<SyntheticSample>& dev);

  // Runs to a stop condition; the model is left at its final weights.
  TrainResult run(const TrainOptions& opts = {});

  // One optimizer update on the given sample indices; returns the loss breakdown values.
  LogRow train_step(std::span<const std::size_t> indices);

  const SignThoughtModel& model() const { return model_; }
  SignThoughtModel& model() { return model_; }
  const TrainerState& state() const { return state_; }
  TrainerState snapshot() const;
  void restore(const Checkpoint& ckpt);

  // Batch order for an epoch: depends only on (seed, epoch).
  std::vector<std::vector<std::size_t>> epoch_batches(std::uint64_t epoch) const;

 private:
  double dev_score(const EvalMetrics& m) const;

  RunConfig cfg_;
  const std::vector<SyntheticSample>& train_;
  const std::vector<SyntheticSample>& dev_;
  SignThoughtModel model_;
  TrainerState state_;
  PlateauScheduler sched_;
  std::mt19937_64 rng_;
};

}  // namespace signthought
