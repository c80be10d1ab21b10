#include "signthought/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace signthought {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + s + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + s + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Key {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class Access>
Key uint_key(std::string name, Access access) {
  return {name, [access](const RunConfig& c) { return std::to_string(*access(const_cast<RunConfig&>(c))); },
          [access, name](RunConfig& c, const std::string& v) {
            *access(c) = static_cast<std::remove_reference_t<decltype(*access(c))>>(parse_uint(name, v));
          }};
}

template <class Access>
Key real_key(std::string name, Access access) {
  return {name, [access](const RunConfig& c) { return fmt_double(*access(const_cast<RunConfig&>(c))); },
          [access, name](RunConfig& c, const std::string& v) { *access(c) = parse_double(name, v); }};
}

template <class Access>
Key bool_key(std::string name, Access access) {
  return {name, [access](const RunConfig& c) { return std::string(*access(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [access, name](RunConfig& c, const std::string& v) { *access(c) = parse_bool(name, v); }};
}

const std::vector<Key>& key_table() {
  static const std::vector<Key> table = [] {
    std::vector<Key> t;
    // model
    t.push_back(uint_key("d", [](RunConfig& c) { return &c.model.enc.d; }));
    t.push_back(uint_key("d_x", [](RunConfig& c) { return &c.model.enc.d_x; }));
    t.push_back(uint_key("n_enc", [](RunConfig& c) { return &c.model.enc.n_enc; }));
    t.push_back(uint_key("n_dec", [](RunConfig& c) { return &c.model.dec.n_dec; }));
    t.push_back(uint_key("heads", [](RunConfig& c) { return &c.model.enc.heads; }));
    t.push_back(uint_key("conv_kernel", [](RunConfig& c) { return &c.model.enc.conv_kernel; }));
    t.push_back(real_key("dropout", [](RunConfig& c) { return &c.model.enc.dropout; }));
    t.push_back(uint_key("num_thoughts", [](RunConfig& c) { return &c.model.think.K; }));
    t.push_back(uint_key("think_layers", [](RunConfig& c) { return &c.model.think.L; }));
    t.push_back(uint_key("num_segments", [](RunConfig& c) { return &c.model.seg.M; }));
    t.push_back(real_key("gamma", [](RunConfig& c) { return &c.model.seg.gamma; }));
    t.push_back(uint_key("mlp_hidden", [](RunConfig& c) { return &c.model.seg.mlp_hidden; }));
    t.push_back(real_key("eps_num", [](RunConfig& c) { return &c.model.seg.eps_num; }));
    t.push_back(uint_key("sinkhorn_iters", [](RunConfig& c) { return &c.model.routing.sinkhorn_iters; }));
    t.push_back(real_key("monotonic_bias_eta", [](RunConfig& c) { return &c.model.routing.monotonic_bias_eta; }));
    t.push_back(real_key("lambda_p", [](RunConfig& c) { return &c.model.think.lambda_p; }));
    t.push_back(bool_key("use_content_bias", [](RunConfig& c) { return &c.model.think.use_content_bias; }));
    t.push_back(bool_key("use_log_prior_bias", [](RunConfig& c) { return &c.model.think.use_log_prior_bias; }));
    t.push_back(real_key("lambda_w", [](RunConfig& c) { return &c.model.dec.lambda_w; }));
    t.push_back(bool_key("use_prior", [](RunConfig& c) { return &c.model.dec.use_prior; }));
    t.push_back({"prior_source",
                 [](const RunConfig& c) {
                   return std::string(c.model.dec.prior_source == PriorSource::Final ? "final" : "first");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "final") c.model.dec.prior_source = PriorSource::Final;
                   else if (v == "first") c.model.dec.prior_source = PriorSource::First;
                   else throw ConfigError("config key 'prior_source': expected final|first, got '" + v + "'");
                 }});
    // objective
    t.push_back(real_key("label_smoothing", [](RunConfig& c) { return &c.loss.label_smoothing; }));
    t.push_back(real_key("delta", [](RunConfig& c) { return &c.loss.delta; }));
    t.push_back(real_key("lambda_mono", [](RunConfig& c) { return &c.loss.lambda_mono; }));
    t.push_back(real_key("lambda_cont", [](RunConfig& c) { return &c.loss.lambda_cont; }));
    t.push_back(bool_key("regularize_all_layers", [](RunConfig& c) { return &c.loss.regularize_all_layers; }));
    // synthetic data
    t.push_back(uint_key("lexicon_size", [](RunConfig& c) { return &c.synth.lexicon_size; }));
    t.push_back(uint_key("seg_len_min", [](RunConfig& c) { return &c.synth.seg_len_min; }));
    t.push_back(uint_key("seg_len_max", [](RunConfig& c) { return &c.synth.seg_len_max; }));
    t.push_back(uint_key("segs_min", [](RunConfig& c) { return &c.synth.segs_min; }));
    t.push_back(uint_key("segs_max", [](RunConfig& c) { return &c.synth.segs_max; }));
    t.push_back(real_key("noise_sigma", [](RunConfig& c) { return &c.synth.noise_sigma; }));
    t.push_back(real_key("reorder_prob", [](RunConfig& c) { return &c.synth.reorder_prob; }));
    t.push_back(uint_key("train_count", [](RunConfig& c) { return &c.train_count; }));
    t.push_back(uint_key("dev_count", [](RunConfig& c) { return &c.dev_count; }));
    t.push_back(uint_key("test_count", [](RunConfig& c) { return &c.test_count; }));
    // training
    t.push_back(real_key("lr", [](RunConfig& c) { return &c.train.lr; }));
    t.push_back(real_key("beta1", [](RunConfig& c) { return &c.train.beta1; }));
    t.push_back(real_key("beta2", [](RunConfig& c) { return &c.train.beta2; }));
    t.push_back(real_key("adam_eps", [](RunConfig& c) { return &c.train.adam_eps; }));
    t.push_back(real_key("weight_decay", [](RunConfig& c) { return &c.train.weight_decay; }));
    t.push_back(uint_key("batch_size", [](RunConfig& c) { return &c.train.batch_size; }));
    t.push_back(uint_key("warmup_steps", [](RunConfig& c) { return &c.train.warmup_steps; }));
    t.push_back(real_key("plateau_factor", [](RunConfig& c) { return &c.train.plateau_factor; }));
    t.push_back(uint_key("plateau_patience", [](RunConfig& c) { return &c.train.plateau_patience; }));
    t.push_back(real_key("stop_lr", [](RunConfig& c) { return &c.train.stop_lr; }));
    t.push_back(uint_key("max_epochs", [](RunConfig& c) { return &c.train.max_epochs; }));
    t.push_back(uint_key("eval_every", [](RunConfig& c) { return &c.train.eval_every; }));
    t.push_back({"dev_metric",
                 [](const RunConfig& c) {
                   return std::string(c.train.dev_metric == DevMetric::TokenAccuracy ? "token_accuracy" : "bleu4");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "token_accuracy") c.train.dev_metric = DevMetric::TokenAccuracy;
                   else if (v == "bleu4") c.train.dev_metric = DevMetric::Bleu4;
                   else throw ConfigError("config key 'dev_metric': expected token_accuracy|bleu4, got '" + v + "'");
                 }});
    t.push_back(real_key("target_dev_acc", [](RunConfig& c) { return &c.train.target_dev_acc; }));
    t.push_back(real_key("max_grad_norm", [](RunConfig& c) { return &c.train.max_grad_norm; }));
    t.push_back(uint_key("seed", [](RunConfig& c) { return &c.train.seed; }));
    // paths (no defaults)
    t.push_back({"data_dir", [](const RunConfig& c) { return c.data_dir.value_or(""); },
                 [](RunConfig& c, const std::string& v) { c.data_dir = v; }});
    t.push_back({"out_dir", [](const RunConfig& c) { return c.out_dir.value_or(""); },
                 [](RunConfig& c, const std::string& v) { c.out_dir = v; }});
    return t;
  }();
  return table;
}

const Key& find_key(const std::string& name) {
  const auto& t = key_table();
  auto it = std::find_if(t.begin(), t.end(), [&](const Key& k) { return k.name == name; });
  if (it == t.end()) throw ConfigError("unknown config key: '" + name + "'");
  return *it;
}

}  // namespace

void EncoderConfig::validate() const {
  require(d >= 1 && heads >= 1 && d % heads == 0, "d must be a positive multiple of heads");
  require(d_x >= 1, "d_x must be >= 1");
  require(conv_kernel % 2 == 1, "conv_kernel must be odd");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
}

void SegmentationConfig::validate() const {
  require(M >= 1, "num_segments must be >= 1");
  require(gamma > 0.0, "gamma must be > 0");
  require(eps_num > 0.0, "eps_num must be > 0");
}

void RoutingConfig::validate() const {
  require(sinkhorn_iters >= 1, "sinkhorn_iters must be >= 1");
  require(monotonic_bias_eta >= 0.0, "monotonic_bias_eta must be >= 0");
}

void ThinkConfig::validate() const {
  require(K >= 1, "num_thoughts must be >= 1");
  require(L >= 1, "think_layers must be >= 1");
  require(lambda_p >= 0.0, "lambda_p must be >= 0");
}

void DecoderConfig::validate() const {
  require(n_dec >= 1, "n_dec must be >= 1");
  require(lambda_w >= 0.0, "lambda_w must be >= 0");
}

void ModelConfig::validate() const {
  enc.validate();
  seg.validate();
  routing.validate();
  think.validate();
  dec.validate();
  require(vocab_size > 4, "vocabulary must hold the 4 reserved ids plus at least one symbol");
}

void LossConfig::validate() const {
  require(label_smoothing >= 0.0 && label_smoothing < 1.0, "label_smoothing must lie in [0, 1)");
  require(delta >= 0.0 && lambda_mono >= 0.0 && lambda_cont >= 0.0, "delta and lambdas must be >= 0");
}

void SynthConfig::validate() const {
  require(lexicon_size >= 2, "lexicon_size must be >= 2");
  require(seg_len_min >= 1 && seg_len_min <= seg_len_max, "seg_len range must be nonempty");
  require(segs_min >= 1 && segs_min <= segs_max, "segs range must be nonempty");
  require(noise_sigma >= 0.0, "noise_sigma must be >= 0");
  require(reorder_prob >= 0.0 && reorder_prob <= 0.5, "reorder_prob must lie in [0, 0.5]");
}

void TrainConfig::validate() const {
  require(lr > 0.0, "lr must be > 0");
  require(plateau_factor > 0.0 && plateau_factor < 1.0, "plateau_factor must lie in (0, 1)");
  require(stop_lr < lr, "stop_lr must be below lr");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "Adam betas must lie in [0, 1)");
}

void RunConfig::sync() {
  synth.d_x = model.enc.d_x;
  synth.seed = train.seed;
  model.vocab_size = synth.lexicon_size + 4;
  model.routing.eps_num = model.seg.eps_num;
}

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  synth.validate();
  train.validate();
}

void RunConfig::set(const std::string& key, const std::string& value) {
  find_key(key).set(*this, value);
  sync();
}

std::string RunConfig::get(const std::string& key) const { return find_key(key).get(*this); }

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : key_table()) out.emplace_back(k.name, k.get(*this));
  return out;
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const auto& [k, v] : entries()) {
    if ((k == "data_dir" && !data_dir) || (k == "out_dir" && !out_dir)) continue;
    os << k << " = " << v << '\n';
  }
  return os.str();
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& e : key_table()) k.push_back(e.name);
    return k;
  }();
  return keys;
}

RunConfig preset(const std::string& name) {
  RunConfig c;
  if (name == "default") {
    // defaults as declared
  } else if (name == "synthetic") {
    c.model.enc.d = 128;
    c.train.warmup_steps = 200;  // ~3 epochs at 2000 samples / batch 32
  } else if (name == "tiny") {
    c.model.enc.d = 8;
    c.model.enc.d_x = 6;
    c.model.enc.heads = 2;
    c.model.think.K = 3;
    c.model.think.L = 2;
    c.model.seg.M = 4;
    c.synth.lexicon_size = 4;
    c.model.enc.dropout = 0.0;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected default|synthetic|tiny)");
  }
  c.sync();
  return c;
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      base.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

RunConfig load_config_file(const std::string& path, RunConfig base) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

}  // namespace signthought
