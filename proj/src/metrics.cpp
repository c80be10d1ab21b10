#include "signthought/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace signthought {

namespace {

void require_matrix(const Tensor& A, const char* what) {
  if (A.rank() != 2) throw ShapeError(std::string(what) + ": expected [K, M], got " + shape_str(A.shape()));
}

std::span<const double> row_of(const Tensor& A, std::size_t k) {
  const std::size_t M = A.dim(1);
  return A.data().subspan(k * M, M);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << v;
  return os.str();
}

}  // namespace

double thought_entropy(const Tensor& A, double eps) {
  require_matrix(A, "thought_entropy");
  const std::size_t K = A.dim(0);
  double total = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    for (double a : row_of(A, k)) total -= a * std::log(a + eps);
  }
  return total / static_cast<double>(K);
}

std::vector<double> expected_indices(const Tensor& A) {
  require_matrix(A, "expected_indices");
  std::vector<double> mu(A.dim(0), 0.0);
  for (std::size_t k = 0; k < mu.size(); ++k) {
    const auto row = row_of(A, k);
    for (std::size_t j = 0; j < row.size(); ++j) mu[k] += static_cast<double>(j + 1) * row[j];
  }
  return mu;
}

double mono_violation_rate(const Tensor& A) {
  const std::vector<double> mu = expected_indices(A);
  if (mu.size() < 2) return 0.0;
  std::size_t violations = 0;
  for (std::size_t k = 0; k + 1 < mu.size(); ++k) violations += mu[k] > mu[k + 1];
  return static_cast<double>(violations) / static_cast<double>(mu.size() - 1);
}

std::size_t quantile_index(std::span<const double> row, double p) {
  double cum = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    cum += row[j];
    if (cum >= p) return j + 1;
  }
  // Rows that fall short of p through rounding end at the last index.
  return row.size();
}

double segment_span(const Tensor& A, double p_lo, double p_hi) {
  require_matrix(A, "segment_span");
  const std::size_t K = A.dim(0);
  double total = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const auto row = row_of(A, k);
    total += static_cast<double>(quantile_index(row, p_hi)) - static_cast<double>(quantile_index(row, p_lo));
  }
  return total / static_cast<double>(K);
}

double total_variation(const Tensor& A) {
  require_matrix(A, "total_variation");
  const std::size_t K = A.dim(0);
  double total = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const auto row = row_of(A, k);
    for (std::size_t j = 1; j < row.size(); ++j) total += std::abs(row[j] - row[j - 1]);
  }
  return total / static_cast<double>(K);
}

void InterpReport::add(const Tensor& A) {
  const double n = static_cast<double>(++samples);
  entropy += (thought_entropy(A) - entropy) / n;
  mono_viol += (mono_violation_rate(A) - mono_viol) / n;
  span += (segment_span(A) - span) / n;
  tv += (total_variation(A) - tv) / n;
}

InterpReport interp_report(const Tensor& A_batch) {
  if (A_batch.rank() != 3) throw ShapeError("interp_report: expected [B, K, M]");
  const std::size_t K = A_batch.dim(1);
  const std::size_t M = A_batch.dim(2);
  InterpReport report;
  for (std::size_t b = 0; b < A_batch.dim(0); ++b) {
    const auto src = A_batch.data().subspan(b * K * M, K * M);
    report.add(Tensor({K, M}, std::vector<double>(src.begin(), src.end())));
  }
  return report;
}

void BleuAccumulator::add(const TokenSeq& hyp, const TokenSeq& ref) {
  hyp_len_ += static_cast<double>(hyp.size());
  ref_len_ += static_cast<double>(ref.size());
  for (std::size_t n = 1; n <= kMaxN; ++n) {
    std::map<TokenSeq, std::size_t> ref_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[TokenSeq(ref.begin() + i, ref.begin() + i + n)];
    std::map<TokenSeq, std::size_t> hyp_counts;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[TokenSeq(hyp.begin() + i, hyp.begin() + i + n)];
    for (const auto& [gram, count] : hyp_counts) {
      const auto it = ref_counts.find(gram);
      const std::size_t clip = it == ref_counts.end() ? 0 : it->second;
      matched_[n - 1] += static_cast<double>(std::min(count, clip));
      total_[n - 1] += static_cast<double>(count);
    }
  }
}

std::array<double, 4> BleuAccumulator::scores() const {
  std::array<double, kMaxN> out{};
  if (hyp_len_ == 0.0) return out;
  constexpr double kFloor = 1e-9;
  const double bp = hyp_len_ < ref_len_ ? std::exp(1.0 - ref_len_ / hyp_len_) : 1.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < kMaxN; ++n) {
    double p = total_[n] > 0.0 ? matched_[n] / total_[n] : 0.0;
    if (p == 0.0) p = kFloor;
    log_sum += std::log(p);
    out[n] = bp * std::exp(log_sum / static_cast<double>(n + 1));
  }
  return out;
}

std::array<double, 4> bleu(const TokenSeq& hyp, const TokenSeq& ref) {
  BleuAccumulator acc;
  acc.add(hyp, ref);
  return acc.scores();
}

std::array<double, 4> corpus_bleu(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs) {
  if (hyps.size() != refs.size()) throw std::invalid_argument("corpus_bleu: hypothesis/reference count mismatch");
  BleuAccumulator acc;
  for (std::size_t i = 0; i < hyps.size(); ++i) acc.add(hyps[i], refs[i]);
  return acc.scores();
}

std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0);
  std::vector<std::size_t> cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const TokenSeq& hyp, const TokenSeq& ref, double beta2) {
  if (hyp.empty() || ref.empty()) return 0.0;
  const double l = static_cast<double>(lcs_length(hyp, ref));
  const double p = l / static_cast<double>(hyp.size());
  const double r = l / static_cast<double>(ref.size());
  if (p == 0.0 && r == 0.0) return 0.0;
  return (1.0 + beta2) * p * r / (r + beta2 * p);
}

PurityCount alignment_purity(const Tensor& r, std::span<const std::uint32_t> frame_to_segment, std::size_t n_seg) {
  require_matrix(r, "alignment_purity");
  const std::size_t K = r.dim(0);
  const std::size_t valid = std::min(frame_to_segment.size(), r.dim(1));
  PurityCount out;
  for (std::size_t k = 0; k < std::min(K, n_seg); ++k) {
    const auto row = row_of(r, k);
    std::size_t best = 0;
    for (std::size_t t = 1; t < valid; ++t) {
      if (row[t] > row[best]) best = t;
    }
    ++out.counted;
    out.hits += valid > 0 && frame_to_segment[best] == k;
  }
  return out;
}

std::string to_key_value(const EvalMetrics& m) {
  std::ostringstream os;
  os << "token_acc=" << fmt(m.token_acc) << '\n';
  for (std::size_t n = 0; n < 4; ++n) os << "bleu" << n + 1 << '=' << fmt(m.bleu[n]) << '\n';
  os << "rouge_l=" << fmt(m.rouge_l) << '\n'
     << "entropy=" << fmt(m.interp.entropy) << '\n'
     << "mono_viol=" << fmt(m.interp.mono_viol) << '\n'
     << "span=" << fmt(m.interp.span) << '\n'
     << "tv=" << fmt(m.interp.tv) << '\n'
     << "purity=" << fmt(m.purity) << '\n';
  return os.str();
}

std::string metrics_csv_header() { return "token_acc,bleu1,bleu2,bleu3,bleu4,rouge_l,entropy,mono_viol,span,tv,purity"; }

std::string metrics_csv_row(const EvalMetrics& m) {
  std::ostringstream os;
  os << fmt(m.token_acc);
  for (double b : m.bleu) os << ',' << fmt(b);
  os << ',' << fmt(m.rouge_l) << ',' << fmt(m.interp.entropy) << ',' << fmt(m.interp.mono_viol) << ','
     << fmt(m.interp.span) << ',' << fmt(m.interp.tv) << ',' << fmt(m.purity);
  return os.str();
}

}  // namespace signthought
