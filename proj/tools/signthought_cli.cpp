// signthought: data generation, training, evaluation, routing dumps and
// gradient checks. Exit codes: 0 ok, 2 usage, 3 data, 4 numeric.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "signthought/config.hpp"
#include "signthought/data.hpp"
#include "signthought/diagnostics.hpp"
#include "signthought/grad_check.hpp"
#include "signthought/metrics.hpp"
#include "signthought/model.hpp"
#include "signthought/trainer.hpp"

namespace fs = std::filesystem;
using namespace signthought;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigFlags {
  std::string preset = "default";
  std::string path;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd, const std::string& default_preset) {
    preset = default_preset;
    cmd->add_option("--preset", preset, "starting preset: default, synthetic or tiny")->capture_default_str();
    cmd->add_option("--config", path, "key = value config file applied over the preset");
    cmd->add_option("--set", overrides, "extra key=value overrides (repeatable)");
  }

  RunConfig load() const {
    RunConfig cfg = preset_config();
    if (!path.empty()) cfg = load_config_file(path, cfg);
    for (const std::string& kv : overrides) cfg = parse_config(kv, cfg);
    cfg.sync();
    cfg.validate();
    return cfg;
  }

 private:
  RunConfig preset_config() const { return signthought::preset(preset); }
};

std::string fixed(double v, int digits = 6) {
  std::ostringstream os;
  os.precision(digits);
  os << std::fixed << v;
  return os.str();
}

Dataset load_dataset_checked(const fs::path& path, std::size_t d_x) {
  if (!fs::exists(path)) throw DataError(DataError::Kind::Io, "missing data file " + path.string());
  Dataset ds = read_dataset(path);
  if (ds.d_x != d_x) {
    throw DataError(DataError::Kind::Invalid, path.string() + ": d_x " + std::to_string(ds.d_x) +
                                                   " does not match the config (" + std::to_string(d_x) + ")");
  }
  return ds;
}

void write_matrix_csv(const fs::path& path, std::span<const double> data, std::size_t rows, std::size_t cols) {
  std::ofstream out(path);
  if (!out) throw DataError(DataError::Kind::Io, "cannot write " + path.string());
  out.precision(10);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out << (j ? "," : "") << data[i * cols + j];
    out << '\n';
  }
}

void write_pgm(const fs::path& path, std::span<const double> data, std::size_t rows, std::size_t cols) {
  std::ofstream out(path);
  if (!out) throw DataError(DataError::Kind::Io, "cannot write " + path.string());
  out << "P2\n" << cols << ' ' << rows << "\n255\n";
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, data[i * cols + j]);
    for (std::size_t j = 0; j < cols; ++j) {
      const double x = data[i * cols + j];
      const long v = mx > 0.0 ? std::lround(255.0 * x / mx) : 0;
      out << (j ? " " : "") << v;
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------- gen-data

struct GenDataCmd {
  ConfigFlags config;
  std::string out;
  std::string out_dir;
  std::string split = "train";
  std::optional<std::size_t> count;

  int run() const {
    const RunConfig cfg = config.load();
    if (!out_dir.empty()) {
      fs::create_directories(out_dir);
      std::size_t total = 0;
      for (Split s : {Split::Train, Split::Dev, Split::Test}) total += write_split(cfg, s, fs::path(out_dir) / (split_name(s) + ".sgtd"), count);
      std::cout << "OK out_dir=" << out_dir << " samples=" << total << '\n';
      return 0;
    }
    if (out.empty()) throw UsageError("gen-data needs --out or --out-dir");
    const std::size_t n = write_split(cfg, parse_split(split), out, count);
    std::cout << "OK split=" << split << " count=" << n << " path=" << out << '\n';
    return 0;
  }

  static std::size_t default_count(const RunConfig& cfg, Split s) {
    switch (s) {
      case Split::Train: return cfg.train_count;
      case Split::Dev: return cfg.dev_count;
      case Split::Test: return cfg.test_count;
    }
    return 0;
  }

  static std::size_t write_split(const RunConfig& cfg, Split s, const fs::path& path, std::optional<std::size_t> n) {
    const std::size_t c = n.value_or(default_count(cfg, s));
    Dataset ds;
    ds.d_x = static_cast<std::uint32_t>(cfg.synth.d_x);
    ds.lexicon_size = static_cast<std::uint32_t>(cfg.synth.lexicon_size);
    ds.samples = gen_dataset(cfg.synth, split_seed(cfg.synth, s), c);
    write_dataset(ds, path);
    std::cerr << "wrote " << c << ' ' << split_name(s) << " samples to " << path.string() << '\n';
    return c;
  }
};

// ---------------------------------------------------------------- train

struct TrainCmd {
  ConfigFlags config;
  std::string data_dir;
  std::string out_dir;
  std::string resume;
  std::optional<std::size_t> max_epochs;
  bool no_regularizers = false;
  bool no_prior = false;
  bool decode = false;

  int run() const {
    RunConfig cfg = config.load();
    if (no_regularizers) {
      cfg.loss.lambda_mono = 0.0;
      cfg.loss.lambda_cont = 0.0;
    }
    if (no_prior) cfg.model.dec.use_prior = false;
    const std::string data = !data_dir.empty() ? data_dir : cfg.data_dir.value_or("");
    const std::string out = !out_dir.empty() ? out_dir : cfg.out_dir.value_or("");
    if (data.empty()) throw UsageError("train needs --data-dir (or data_dir in the config)");
    if (out.empty()) throw UsageError("train needs --out-dir (or out_dir in the config)");

    const Dataset train = load_dataset_checked(fs::path(data) / "train.sgtd", cfg.model.enc.d_x);
    const Dataset dev = load_dataset_checked(fs::path(data) / "dev.sgtd", cfg.model.enc.d_x);
    if (train.samples.empty()) throw DataError(DataError::Kind::Invalid, "training set is empty");

    Trainer trainer(cfg, train.samples, dev.samples);
    TrainOptions opts;
    opts.out_dir = out;
    if (!resume.empty()) opts.resume = resume;
    opts.max_epochs = max_epochs;
    opts.decode_during_eval = decode;
    const auto t0 = std::chrono::steady_clock::now();
    std::uint64_t epoch = trainer.state().epoch;
    opts.on_eval = [&](const LogRow& row) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cout << "epoch=" << ++epoch << " step=" << row.step << " lr=" << row.lr << " total=" << fixed(row.total, 4)
                << " dev_acc=" << fixed(row.eval->token_acc, 4) << " purity=" << fixed(row.eval->purity, 3)
                << " mono_viol=" << fixed(row.eval->interp.mono_viol, 3) << " tv=" << fixed(row.eval->interp.tv, 3)
                << " elapsed=" << fixed(secs, 1) << "s" << std::endl;
    };
    const TrainResult r = trainer.run(opts);
    std::cout << "OK steps=" << r.steps << " epochs=" << r.epochs << " best_dev=" << fixed(r.best_dev, 4)
              << " stop=" << r.stop_reason << " checkpoint=" << (fs::path(out) / "best.sgtc").string() << '\n';
    return 0;
  }
};

// ---------------------------------------------------------------- eval

struct EvalCmd {
  std::string checkpoint;
  std::string data;
  std::size_t beam = 1;
  double len_penalty = 0.0;
  std::string csv;

  int run() const {
    const Checkpoint ck = load_checkpoint(checkpoint);
    const Dataset ds = load_dataset_checked(data, ck.config.model.enc.d_x);
    const SignThoughtModel model(ck.config.model, ck.params);
    EvalOptions eo;
    eo.beam = beam;
    eo.len_penalty = len_penalty;
    const EvalDetail res = evaluate(model, ds.samples, eo);
    std::cout << to_key_value(res.metrics);
    if (!csv.empty()) {
      const bool fresh = !fs::exists(csv);
      std::ofstream out(csv, std::ios::app);
      if (!out) throw DataError(DataError::Kind::Io, "cannot write " + csv);
      if (fresh) out << "checkpoint,data,beam,len_penalty," << metrics_csv_header() << '\n';
      out << checkpoint << ',' << data << ',' << beam << ',' << len_penalty << ',' << metrics_csv_row(res.metrics)
          << '\n';
    }
    std::cout << "OK samples=" << ds.samples.size() << " token_acc=" << fixed(res.metrics.token_acc)
              << " bleu4=" << fixed(res.metrics.bleu[3]) << " rouge_l=" << fixed(res.metrics.rouge_l)
              << " purity=" << fixed(res.metrics.purity) << '\n';
    return 0;
  }
};

// ---------------------------------------------------------------- inspect-routing

struct InspectCmd {
  std::string checkpoint;
  std::string data;
  std::size_t sample = 0;
  std::string out_prefix;

  int run() const {
    const Checkpoint ck = load_checkpoint(checkpoint);
    const Dataset ds = load_dataset_checked(data, ck.config.model.enc.d_x);
    if (sample >= ds.samples.size()) {
      throw UsageError("sample index " + std::to_string(sample) + " out of range (dataset has " +
                       std::to_string(ds.samples.size()) + ")");
    }
    const SignThoughtModel model(ck.config.model, ck.params);
    NoGradGuard no_grad;
    const std::size_t idx[1] = {sample};
    const Batch batch = make_batch(ds.samples, idx);
    const ModelOutput out = model.forward(batch.clip, batch.tokens);

    const Tensor& A = out.source.think.layers.back().A.value();
    const Tensor& r = out.source.think.cache.r_final.value();
    const Tensor& w = out.dec.priors.back().w.value();
    const std::size_t K = A.dim(1);
    const std::size_t M = A.dim(2);
    const std::size_t T_s = r.dim(2);
    const std::size_t T_t = w.dim(1);
    write_matrix_csv(out_prefix + ".A.csv", A.data(), K, M);
    write_matrix_csv(out_prefix + ".r.csv", r.data(), K, T_s);
    write_matrix_csv(out_prefix + ".w.csv", w.data(), T_t, T_s);
    write_pgm(out_prefix + ".r.pgm", r.data(), K, T_s);
    std::cout << "OK sample=" << sample << " K=" << K << " M=" << M << " T_s=" << T_s << " T_t=" << T_t
              << " prefix=" << out_prefix << '\n';
    return 0;
  }
};

// ---------------------------------------------------------------- grad-check

struct GradCheckCmd {
  ConfigFlags config;
  std::string module = "all";
  double tol = 1e-4;
  double eps = 1e-4;
  std::uint64_t seed = 7;
  double perturb = 0.0;

  int run() const {
    const RunConfig cfg = config.load();
    std::vector<std::string> modules;
    if (module == "all") {
      modules = grad_check_modules();
    } else {
      const auto& known = grad_check_modules();
      if (std::find(known.begin(), known.end(), module) == known.end()) {
        throw UsageError("unknown module '" + module + "'");
      }
      modules = {module};
    }
    TinyProblem problem = make_tiny_problem(cfg, seed);
    GradCheckOptions opts;
    opts.tol = tol;
    opts.eps = eps;
    double worst = 0.0;
    bool ok = true;
    const auto t0 = std::chrono::steady_clock::now();
    for (const std::string& m : modules) {
      const ModuleObjective obj = module_objective(m, problem);
      opts.prefix = obj.prefix;
      GradCheckReport rep;
      if (perturb != 0.0) {
        // Self-test: a corrupted analytic gradient must be rejected.
        GradientMap g = backward(obj.f(problem.model.params()), problem.model.params());
        for (auto& [name, t] : g) {
          if (name.rfind(obj.prefix, 0) == 0) {
            t[0] += perturb;
            break;
          }
        }
        rep = grad_check_against(obj.f, problem.model.params(), g, opts);
      } else {
        rep = grad_check(obj.f, problem.model.params(), opts);
      }
      ok = ok && rep.passed;
      worst = std::max(worst, rep.max_rel_err);
      std::cout << "module=" << m << " max_rel_err=" << rep.max_rel_err << " coords=" << rep.coords_checked
                << " worst=" << rep.worst_param << " analytic=" << rep.worst_analytic
                << " numeric=" << rep.worst_numeric << (rep.passed ? " pass" : " FAIL") << '\n';
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!ok) {
      std::cout << "FAIL max_rel_err=" << worst << " tol=" << tol << '\n';
      return kExitNumeric;
    }
    std::cout << "OK max_rel_err=" << worst << " tol=" << tol << " seconds=" << fixed(secs, 2) << '\n';
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SignThought gloss-free sign language translation on synthetic sign streams"};
  app.require_subcommand(1);

  GenDataCmd gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic SGTD1 dataset");
  gen.config.attach(gen_cmd, "synthetic");
  gen_cmd->add_option("--out", gen.out, "output file for one split");
  gen_cmd->add_option("--out-dir", gen.out_dir, "write train.sgtd, dev.sgtd and test.sgtd here");
  gen_cmd->add_option("--split", gen.split, "train, dev or test")->capture_default_str();
  gen_cmd->add_option("--count", gen.count, "samples per split (default from the config)");

  TrainCmd train;
  auto* train_cmd = app.add_subcommand("train", "train a model, writing checkpoints and train_log.csv");
  train.config.attach(train_cmd, "synthetic");
  train_cmd->add_option("--data-dir", train.data_dir, "directory with train.sgtd and dev.sgtd");
  train_cmd->add_option("--out-dir", train.out_dir, "directory for checkpoints and logs");
  train_cmd->add_option("--resume", train.resume, "continue from this checkpoint");
  train_cmd->add_option("--max-epochs", train.max_epochs, "override max_epochs");
  train_cmd->add_flag("--no-regularizers", train.no_regularizers, "set lambda_mono = lambda_cont = 0");
  train_cmd->add_flag("--no-prior", train.no_prior, "disable the decoder temporal prior");
  train_cmd->add_flag("--decode", train.decode, "decode the dev set at each evaluation for BLEU");

  EvalCmd eval;
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required();
  eval_cmd->add_option("--data", eval.data)->required();
  eval_cmd->add_option("--beam", eval.beam, "beam width (1 = greedy)")->check(CLI::Range(1, 64))->capture_default_str();
  eval_cmd->add_option("--len-penalty", eval.len_penalty, "length penalty exponent a")->capture_default_str();
  eval_cmd->add_option("--csv", eval.csv, "append a metrics row to this CSV");

  InspectCmd inspect;
  auto* inspect_cmd = app.add_subcommand("inspect-routing", "dump A, r and w for one sample as CSV and PGM");
  inspect_cmd->add_option("--checkpoint", inspect.checkpoint)->required();
  inspect_cmd->add_option("--data", inspect.data)->required();
  inspect_cmd->add_option("--sample", inspect.sample)->capture_default_str();
  inspect_cmd->add_option("--out-prefix", inspect.out_prefix)->required();

  GradCheckCmd gc;
  auto* gc_cmd = app.add_subcommand("grad-check", "finite-difference gradient check at tiny dimensions");
  gc.config.attach(gc_cmd, "tiny");
  gc_cmd->add_option("--module", gc.module, "all|encoder|segmentation|thinking|decoder|objectives")->capture_default_str();
  gc_cmd->add_option("--tol", gc.tol)->capture_default_str();
  gc_cmd->add_option("--eps", gc.eps)->capture_default_str();
  gc_cmd->add_option("--seed", gc.seed)->capture_default_str();
  gc_cmd->add_option("--perturb", gc.perturb, "add this to one analytic gradient entry (checker self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen_cmd) return gen.run();
    if (*train_cmd) return train.run();
    if (*eval_cmd) return eval.run();
    if (*inspect_cmd) return inspect.run();
    if (*gc_cmd) return gc.run();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitUsage;
}
