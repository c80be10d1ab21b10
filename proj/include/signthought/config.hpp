#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace signthought {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kEpsNum = 1e-6;

struct EncoderConfig {
  std::size_t d = 256;
  std::size_t d_x = 32;
  std::size_t n_enc = 2;
  std::size_t heads = 4;
  std::size_t conv_kernel = 3;
  double dropout = 0.1;
  void validate() const;
};

struct SegmentationConfig {
  std::size_t M = 16;
  double gamma = 1.0;
  std::size_t mlp_hidden = 0;  // 0 means "same as d"
  double eps_num = kEpsNum;
  void validate() const;
};

struct RoutingConfig {
  std::size_t sinkhorn_iters = 10;
  double monotonic_bias_eta = 0.0;
  double eps_num = kEpsNum;
  void validate() const;
};

struct ThinkConfig {
  std::size_t K = 8;
  std::size_t L = 2;
  double lambda_p = 1.0;
  bool use_content_bias = true;
  bool use_log_prior_bias = true;
  void validate() const;
};

enum class PriorSource { Final, First };

struct DecoderConfig {
  std::size_t n_dec = 2;
  double lambda_w = 1.0;
  bool use_prior = true;
  PriorSource prior_source = PriorSource::Final;
  void validate() const;
};

struct ModelConfig {
  EncoderConfig enc;
  SegmentationConfig seg;
  RoutingConfig routing;
  ThinkConfig think;
  DecoderConfig dec;
  std::size_t vocab_size = 24;

  std::size_t d() const { return enc.d; }
  std::size_t heads() const { return enc.heads; }
  double dropout() const { return enc.dropout; }
  void validate() const;
};

struct LossConfig {
  double label_smoothing = 0.1;
  double delta = 1.0;
  double lambda_mono = 0.1;
  double lambda_cont = 0.2;
  bool regularize_all_layers = false;
  void validate() const;
};

struct SynthConfig {
  std::size_t lexicon_size = 20;
  std::size_t d_x = 32;
  std::size_t seg_len_min = 4;
  std::size_t seg_len_max = 12;
  std::size_t segs_min = 3;
  std::size_t segs_max = 10;
  double noise_sigma = 0.1;
  double reorder_prob = 0.0;
  std::uint64_t seed = 1;
  void validate() const;
};

enum class DevMetric { TokenAccuracy, Bleu4 };

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.998;
  double adam_eps = 1e-8;
  double weight_decay = 3e-3;
  std::size_t batch_size = 32;
  std::size_t warmup_steps = 2000;
  double plateau_factor = 0.8;
  std::size_t plateau_patience = 3;
  double stop_lr = 1e-4;
  std::size_t max_epochs = 200;
  std::size_t eval_every = 0;  // steps between dev evaluations; 0 means once per epoch
  DevMetric dev_metric = DevMetric::TokenAccuracy;
  double target_dev_acc = 0.0;  // stop once reached; 0 disables
  double max_grad_norm = 0.0;   // 0 disables clipping
  std::uint64_t seed = 1;
  void validate() const;
};

// Everything a run needs, parsed from a flat key=value file.
struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  SynthConfig synth;
  TrainConfig train;
  std::size_t train_count = 2000;
  std::size_t dev_count = 200;
  std::size_t test_count = 200;
  std::optional<std::string> data_dir;
  std::optional<std::string> out_dir;

  // Keeps shared keys (d_x, vocabulary, seed) consistent across sections.
  void sync();
  void validate() const;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  // Ordered key=value map of every setting.
  std::vector<std::pair<std::string, std::string>> entries() const;
  std::string to_text() const;
};

// Keys accepted by RunConfig::set, in canonical order.
const std::vector<std::string>& config_keys();

// Named starting points: "default", "synthetic" (d=128 desk-scale
// task) and "tiny" (gradient-check dimensions).
RunConfig preset(const std::string& name);

// Applies key=value lines over base. '#' starts a comment; unknown keys are rejected.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config_file(const std::string& path, RunConfig base = {});

}  // namespace signthought
