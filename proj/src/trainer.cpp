#include "signthought/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace signthought {

namespace {

using json = nlohmann::json;

constexpr char kCkptMagic[5] = {'S', 'G', 'T', 'C', '1'};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(8);
  os << v;
  return os.str();
}

std::mt19937_64 epoch_rng(std::uint64_t seed, std::uint64_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32), 0x45504fu};
  return std::mt19937_64(seq);
}

Tensor sample_slice(const Tensor& batched, std::size_t b) {
  Shape inner(batched.shape().begin() + 1, batched.shape().end());
  const std::size_t n = numel(inner);
  const auto src = batched.data().subspan(b * n, n);
  return Tensor(std::move(inner), std::vector<double>(src.begin(), src.end()));
}

}  // namespace

void adam_step(ParameterStore& params, const GradientMap& grads, AdamState& state, const TrainConfig& cfg,
               double lr) {
  const std::uint64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& entry : params) {
    const auto g_it = grads.find(entry.name);
    if (g_it == grads.end()) continue;
    const Tensor& g = g_it->second;
    Tensor& theta = entry.var.mutable_value();
    if (g.shape() != theta.shape()) {
      throw ShapeError("adam_step: gradient shape " + shape_str(g.shape()) + " does not match parameter " +
                       entry.name + " " + shape_str(theta.shape()));
    }
    auto [m_it, m_new] = state.m.try_emplace(entry.name, theta.shape(), 0.0);
    auto [v_it, v_new] = state.v.try_emplace(entry.name, theta.shape(), 0.0);
    auto& m = m_it->second.raw();
    auto& v = v_it->second.raw();
    if (m.size() != theta.size() || v.size() != theta.size()) {
      throw ShapeError("adam_step: moment shape mismatch for " + entry.name);
    }
    auto& w = theta.raw();
    const auto& gd = g.raw();
    const double decay = 1.0 - lr * cfg.weight_decay;
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] *= decay;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gd[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
  }
  state.step = t;
}

double clip_grad_norm(GradientMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (double x : g.raw()) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, g] : grads) {
      for (double& x : g.raw()) x *= s;
    }
  }
  return norm;
}

double lr_at(std::uint64_t step, std::size_t reductions, const TrainConfig& cfg) {
  double lr = cfg.lr * std::pow(cfg.plateau_factor, static_cast<double>(reductions));
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    lr *= static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  return lr;
}

double PlateauScheduler::current_scale() const {
  return std::pow(cfg_.plateau_factor, static_cast<double>(reductions_));
}

double PlateauScheduler::lr_at(std::uint64_t step) const { return signthought::lr_at(step, reductions_, cfg_); }

bool PlateauScheduler::observe(double score, std::uint64_t step) {
  if (!best_ || score > *best_) {
    best_ = score;
    bad_evals_ = 0;
    return true;
  }
  // Stalls during warmup do not count against the schedule.
  if (step < cfg_.warmup_steps) return false;
  if (++bad_evals_ >= cfg_.plateau_patience) {
    ++reductions_;
    bad_evals_ = 0;
  }
  return false;
}

EvalDetail evaluate(const SignThoughtModel& model, const std::vector<SyntheticSample>& samples,
                    const EvalOptions& opts) {
  NoGradGuard no_grad;
  EvalDetail out;
  if (samples.empty()) return out;
  std::size_t correct = 0;
  std::size_t counted = 0;
  PurityCount purity;
  std::size_t max_ref = 0;
  for (const auto& s : samples) max_ref = std::max(max_ref, s.tokens.size());
  std::vector<TokenSeq> refs;

  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  for (std::size_t start = 0; start < samples.size(); start += bs) {
    std::vector<std::size_t> idx(std::min(bs, samples.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch batch = make_batch(samples, idx);
    const ModelOutput fwd = model.forward(batch.clip, batch.tokens);

    const Tensor& logits = fwd.dec.logits.value();
    const std::size_t vocab = logits.dim(2);
    for (std::size_t i = 0; i < batch.tokens.labels.size(); ++i) {
      const std::int32_t y = batch.tokens.labels[i];
      if (y == kPad) continue;
      const auto row = logits.data().subspan(i * vocab, vocab);
      const auto best = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += best == y;
      ++counted;
    }

    const Tensor& A = fwd.source.think.layers.back().A.value();
    const Tensor& r = fwd.source.think.cache.r_final.value();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      out.metrics.interp.add(sample_slice(A, b));
      const SyntheticSample& s = samples[idx[b]];
      purity += alignment_purity(sample_slice(r, b), s.frame_to_segment, s.segment_symbols.size());
    }

    if (opts.decode) {
      const std::size_t max_len = max_ref + opts.max_extra_len;
      std::vector<TokenSeq> hyps = opts.beam <= 1 ? model.greedy_decode(batch.clip, max_len)
                                                  : model.beam_decode(batch.clip, opts.beam, opts.len_penalty, max_len);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        TokenSeq ref(samples[idx[b]].tokens.begin(), samples[idx[b]].tokens.end() - 1);
        refs.push_back(std::move(ref));
        out.hypotheses.push_back(std::move(hyps[b]));
      }
    }
  }
  out.metrics.token_acc = counted == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(counted);
  out.metrics.purity = purity.value();
  if (opts.decode) {
    out.metrics.bleu = corpus_bleu(out.hypotheses, refs);
    double rl = 0.0;
    for (std::size_t i = 0; i < refs.size(); ++i) rl += rouge_l(out.hypotheses[i], refs[i]);
    out.metrics.rouge_l = rl / static_cast<double>(refs.size());
  }
  return out;
}

std::string log_csv_header() { return "step,lr,ce,mono,cont,total,dev_acc,bleu4,entropy,mono_viol,span,tv"; }

std::string log_csv_row(const LogRow& row) {
  std::ostringstream os;
  os << row.step << ',' << fmt(row.lr) << ',' << fmt(row.ce) << ',' << fmt(row.mono) << ',' << fmt(row.cont) << ','
     << fmt(row.total);
  if (row.eval) {
    const EvalMetrics& m = *row.eval;
    os << ',' << fmt(m.token_acc) << ',' << fmt(m.bleu[3]) << ',' << fmt(m.interp.entropy) << ','
       << fmt(m.interp.mono_viol) << ',' << fmt(m.interp.span) << ',' << fmt(m.interp.tv);
  } else {
    os << ",,,,,,";
  }
  return os.str();
}

void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const ParameterStore& params,
                     const TrainerState& state) {
  json man;
  man["format"] = "SGTC1";
  man["format_version"] = kCheckpointVersion;
  json config = json::object();
  for (const auto& [k, v] : cfg.entries()) {
    if ((k == "data_dir" && !cfg.data_dir) || (k == "out_dir" && !cfg.out_dir)) continue;
    config[k] = v;
  }
  man["config"] = config;
  json plist = json::array();
  for (const auto& e : params) plist.push_back({{"name", e.name}, {"shape", e.var.shape()}});
  man["params"] = plist;
  json moments = json::array();
  for (const auto& [name, t] : state.adam.m) moments.push_back({{"name", "m/" + name}, {"shape", t.shape()}});
  for (const auto& [name, t] : state.adam.v) moments.push_back({{"name", "v/" + name}, {"shape", t.shape()}});
  man["moments"] = moments;
  man["step"] = state.adam.step;
  man["epoch"] = state.epoch;
  man["rng_state"] = state.rng_state;
  man["scheduler"] = {{"reductions", state.reductions},
                      {"bad_evals", state.bad_evals},
                      {"best", state.best ? json(*state.best) : json(nullptr)}};

  const std::string text = man.dump();
  std::string bytes(kCkptMagic, sizeof kCkptMagic);
  const std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((len >> (8 * i)) & 0xFF));
  bytes += text;
  auto put = [&bytes](const Tensor& t) {
    for (double x : t.raw()) {
      const auto bits = std::bit_cast<std::uint64_t>(x);
      for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
  };
  for (const auto& e : params) put(e.var.value());
  for (const auto& [name, t] : state.adam.m) put(t);
  for (const auto& [name, t] : state.adam.v) put(t);

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof kCkptMagic || std::memcmp(bytes.data(), kCkptMagic, sizeof kCkptMagic) != 0) {
    throw CheckpointError("bad magic: not an SGTC1 checkpoint");
  }
  std::size_t pos = sizeof kCkptMagic;
  if (bytes.size() - pos < 8) throw CheckpointError("truncated checkpoint");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  pos += 8;
  if (bytes.size() - pos < len) throw CheckpointError("truncated checkpoint");

  Checkpoint ck;
  std::vector<std::pair<std::string, Shape>> param_specs;
  std::vector<std::pair<std::string, Shape>> moment_specs;
  try {
    const json man = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                 bytes.begin() + static_cast<std::ptrdiff_t>(pos + len));
    if (man.at("format_version").get<int>() != kCheckpointVersion) {
      throw CheckpointError("checkpoint version mismatch");
    }
    for (const auto& [k, v] : man.at("config").items()) ck.config.set(k, v.get<std::string>());
    ck.config.sync();
    ck.config.validate();
    for (const auto& p : man.at("params")) param_specs.emplace_back(p.at("name"), p.at("shape").get<Shape>());
    for (const auto& p : man.at("moments")) moment_specs.emplace_back(p.at("name"), p.at("shape").get<Shape>());
    ck.state.adam.step = man.at("step").get<std::uint64_t>();
    ck.state.epoch = man.at("epoch").get<std::uint64_t>();
    ck.state.rng_state = man.at("rng_state").get<std::string>();
    const json& sched = man.at("scheduler");
    ck.state.reductions = sched.at("reductions").get<std::size_t>();
    ck.state.bad_evals = sched.at("bad_evals").get<std::size_t>();
    if (!sched.at("best").is_null()) ck.state.best = sched.at("best").get<double>();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("corrupt manifest: ") + e.what());
  }
  pos += len;

  auto take = [&](const Shape& shape, const std::string& name) {
    Tensor t(shape);
    if ((bytes.size() - pos) / 8 < t.size()) throw CheckpointError("truncated checkpoint at " + name);
    for (double& x : t.raw()) {
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
      x = std::bit_cast<double>(bits);
      pos += 8;
    }
    return t;
  };
  for (const auto& [name, shape] : param_specs) ck.params.add(name, take(shape, name));
  for (const auto& [name, shape] : moment_specs) {
    if (name.size() < 3 || (name[0] != 'm' && name[0] != 'v') || name[1] != '/') {
      throw CheckpointError("corrupt manifest: bad moment name " + name);
    }
    auto& dst = name[0] == 'm' ? ck.state.adam.m : ck.state.adam.v;
    dst.emplace(name.substr(2), take(shape, name));
  }
  if (pos != bytes.size()) throw CheckpointError("checkpoint has trailing bytes");
  return ck;
}

void load_params_into(const Checkpoint& ckpt, ParameterStore& params) {
  if (ckpt.params.size() != params.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(ckpt.params.size()) + " parameters, model has " +
                          std::to_string(params.size()));
  }
  for (auto& e : params) {
    if (!ckpt.params.contains(e.name)) throw CheckpointError("checkpoint lacks parameter " + e.name);
    const Tensor& src = ckpt.params[e.name].value();
    if (src.shape() != e.var.shape()) {
      throw CheckpointError("shape mismatch for parameter " + e.name + ": checkpoint " + shape_str(src.shape()) +
                            ", model " + shape_str(e.var.shape()));
    }
  }
  for (auto& e : params) e.var.mutable_value() = ckpt.params[e.name].value();
}

Trainer::Trainer(RunConfig cfg, const std::vector<SyntheticSample>& train, const std::vector<SyntheticSample>& dev)
    : cfg_(std::move(cfg)),
      train_(train),
      dev_(dev),
      model_(cfg_.model, cfg_.train.seed),
      sched_(cfg_.train),
      rng_(cfg_.train.seed ^ 0xD20F0u) {
  if (train_.empty()) throw std::invalid_argument("training set is empty");
}

std::vector<std::vector<std::size_t>> Trainer::epoch_batches(std::uint64_t epoch) const {
  std::mt19937_64 rng = epoch_rng(cfg_.train.seed, epoch);
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  // Sort within windows of several batches by clip length to cut padding.
  const std::size_t bs = cfg_.train.batch_size;
  const std::size_t window = bs * 8;
  for (std::size_t s = 0; s < order.size(); s += window) {
    const auto first = order.begin() + static_cast<std::ptrdiff_t>(s);
    const auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + window));
    std::stable_sort(first, last, [this](std::size_t a, std::size_t b) { return train_[a].steps() < train_[b].steps(); });
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t s = 0; s < order.size(); s += bs) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + bs)));
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

LogRow Trainer::train_step(std::span<const std::size_t> indices) {
  const Batch batch = make_batch(train_, indices);
  ForwardContext ctx{true, cfg_.model.dropout(), &rng_};
  const ModelOutput out = model_.forward(batch.clip, batch.tokens, ctx);
  const Var ce = label_smoothed_ce(out.dec.logits, batch.tokens.labels, cfg_.loss.label_smoothing);
  const LossBreakdown loss = total_loss(ce, out.routing(), cfg_.loss);
  GradientMap grads = backward(loss.total, model_.params());
  if (cfg_.train.max_grad_norm > 0.0) clip_grad_norm(grads, cfg_.train.max_grad_norm);
  const std::uint64_t step = state_.adam.step + 1;
  const double lr = sched_.lr_at(step);
  adam_step(model_.params(), grads, state_.adam, cfg_.train, lr);

  LogRow row;
  row.step = step;
  row.lr = lr;
  row.ce = loss.ce.item();
  row.mono = loss.mono.item();
  row.cont = loss.cont.item();
  row.total = loss.total.item();
  return row;
}

double Trainer::dev_score(const EvalMetrics& m) const {
  return cfg_.train.dev_metric == DevMetric::Bleu4 ? m.bleu[3] : m.token_acc;
}

TrainerState Trainer::snapshot() const {
  TrainerState s = state_;
  s.reductions = sched_.reductions();
  s.bad_evals = sched_.evals_without_improvement();
  s.best = sched_.best();
  std::ostringstream os;
  os << rng_;
  s.rng_state = os.str();
  return s;
}

void Trainer::restore(const Checkpoint& ckpt) {
  load_params_into(ckpt, model_.params());
  state_ = ckpt.state;
  sched_.restore(ckpt.state.reductions, ckpt.state.bad_evals, ckpt.state.best);
  std::istringstream is(ckpt.state.rng_state);
  is >> rng_;
  if (!is) throw CheckpointError("corrupt RNG state in checkpoint");
}

TrainResult Trainer::run(const TrainOptions& opts) {
  if (opts.resume) restore(load_checkpoint(*opts.resume));
  const std::size_t max_epochs = opts.max_epochs.value_or(cfg_.train.max_epochs);
  const bool decode = opts.decode_during_eval || cfg_.train.dev_metric == DevMetric::Bleu4;

  std::ofstream log_file;
  if (opts.out_dir) {
    std::filesystem::create_directories(*opts.out_dir);
    const auto log_path = *opts.out_dir / "train_log.csv";
    const bool append = opts.resume && std::filesystem::exists(log_path);
    log_file.open(log_path, append ? std::ios::app : std::ios::trunc);
    if (!log_file) throw std::runtime_error("cannot write " + log_path.string());
    if (!append) log_file << log_csv_header() << '\n';
  }

  TrainResult result;
  std::vector<LogRow> pending;
  auto flush = [&] {
    for (const LogRow& r : pending) {
      if (log_file.is_open()) log_file << log_csv_row(r) << '\n';
      result.log.push_back(r);
    }
    if (log_file.is_open()) log_file.flush();
    pending.clear();
  };
  auto run_eval = [&](LogRow& row) {
    EvalOptions eo;
    eo.decode = decode;
    const EvalMetrics m = dev_.empty() ? EvalMetrics{} : evaluate(model_, dev_, eo).metrics;
    row.eval = m;
    result.last_eval = m;
    if (sched_.observe(dev_score(m), state_.adam.step) && opts.out_dir) {
      save_checkpoint(*opts.out_dir / "best.sgtc", cfg_, model_.params(), snapshot());
    }
    if (opts.on_eval) opts.on_eval(row);
  };
  auto target_reached = [&] {
    return cfg_.train.target_dev_acc > 0.0 && result.last_eval.token_acc >= cfg_.train.target_dev_acc;
  };

  result.stop_reason = "max_epochs";
  bool stop = false;
  while (!stop && state_.epoch < max_epochs) {
    for (const auto& idx : epoch_batches(state_.epoch)) {
      pending.push_back(train_step(idx));
      if (opts.on_step) opts.on_step(pending.back());
      if (cfg_.train.eval_every > 0 && state_.adam.step % cfg_.train.eval_every == 0) {
        run_eval(pending.back());
        if (target_reached()) {
          // Finish the epoch so checkpoints stay aligned to epoch boundaries.
          result.stop_reason = "target_dev_acc";
          stop = true;
        }
      }
    }
    ++state_.epoch;
    if (cfg_.train.eval_every == 0) {
      run_eval(pending.back());
      if (target_reached()) {
        result.stop_reason = "target_dev_acc";
        stop = true;
      }
    }
    if (sched_.should_stop()) {
      result.stop_reason = "lr_below_stop";
      stop = true;
    }
    flush();
    if (opts.out_dir) save_checkpoint(*opts.out_dir / "last.sgtc", cfg_, model_.params(), snapshot());
  }
  flush();
  result.steps = state_.adam.step;
  result.epochs = state_.epoch;
  result.best_dev = sched_.best().value_or(0.0);
  return result;
}

}  // namespace signthought
