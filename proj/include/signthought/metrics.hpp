#pragma once

// Routing interpretability metrics (on plain tensors, no graph) and
// translation metrics over token-id sequences.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "signthought/config.hpp"
#include "signthought/tensor.hpp"

namespace signthought {

using TokenSeq = std::vector<std::int32_t>;

// Each takes one routing matrix A [K, M] and averages over thoughts.
double thought_entropy(const Tensor& A, double eps = kEpsNum);
std::vector<double> expected_indices(const Tensor& A);  // mu_k, 1-based
double mono_violation_rate(const Tensor& A);
// j(p) is the smallest 1-based index whose inclusive cumulative mass reaches p.
std::size_t quantile_index(std::span<const double> row, double p);
double segment_span(const Tensor& A, double p_lo = 0.05, double p_hi = 0.95);
double total_variation(const Tensor& A);

struct InterpReport {
  double entropy = 0.0;
  double mono_viol = 0.0;
  double span = 0.0;
  double tv = 0.0;
  std::size_t samples = 0;

  // Running mean over samples.
  void add(const Tensor& A);
};

// A [B, K, M] -> per-sample averaged report.
InterpReport interp_report(const Tensor& A_batch);

// Modified n-gram precision with clipping, geometric mean up to n, brevity
// penalty exp(1 - r/c) when c < r; zero precisions become 1e-9.
class BleuAccumulator {
 public:
  static constexpr std::size_t kMaxN = 4;
  void add(const TokenSeq& hyp, const TokenSeq& ref);
  std::array<double, kMaxN> scores() const;  // B@1..B@4

 private:
  std::array<double, kMaxN> matched_{};
  std::array<double, kMaxN> total_{};
  double hyp_len_ = 0.0;
  double ref_len_ = 0.0;
};

std::array<double, 4> bleu(const TokenSeq& hyp, const TokenSeq& ref);
std::array<double, 4> corpus_bleu(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs);

std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b);
double rouge_l(const TokenSeq& hyp, const TokenSeq& ref, double beta2 = 1.0);

// r [K, T_s] for one sample; frame_to_segment covers the valid frames. Counts
// thoughts k < min(K, n_seg) whose argmax frame (lowest index on ties) lies in
// true segment k. Returns {hits, counted}.
struct PurityCount {
  std::size_t hits = 0;
  std::size_t counted = 0;
  double value() const { return counted == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(counted); }
  PurityCount& operator+=(const PurityCount& o) {
    hits += o.hits;
    counted += o.counted;
    return *this;
  }
};
PurityCount alignment_purity(const Tensor& r, std::span<const std::uint32_t> frame_to_segment, std::size_t n_seg);

struct EvalMetrics {
  double token_acc = 0.0;
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  InterpReport interp;
  double purity = 0.0;
};

// Flat `key=value` lines in a fixed order.
std::string to_key_value(const EvalMetrics& m);
std::string metrics_csv_header();
std::string metrics_csv_row(const EvalMetrics& m);

}  // namespace signthought
