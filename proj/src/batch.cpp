#include "signthought/batch.hpp"

#include <algorithm>
#include <string>

namespace signthought {

void ClipBatch::validate() const {
  if (features.rank() != 3) throw ShapeError("clip features must be [B, T_s, d_x], got " + shape_str(features.shape()));
  const std::size_t b = features.dim(0);
  const std::size_t t = features.dim(1);
  if (mask.shape() != Shape{b, t}) throw ShapeError("clip mask must be [B, T_s], got " + shape_str(mask.shape()));
  if (valid_len.size() != b) throw ShapeError("clip valid_len must have one entry per sample");
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t len = 0;
    bool seen_pad = false;
    for (std::size_t s = 0; s < t; ++s) {
      const double m = mask[i * t + s];
      if (m != 0.0 && m != 1.0) throw ShapeError("clip mask entries must be 0 or 1");
      if (m == 1.0) {
        if (seen_pad) throw ShapeError("clip mask must be a prefix of ones (sample " + std::to_string(i) + ")");
        ++len;
      } else {
        seen_pad = true;
      }
    }
    if (len == 0) throw ShapeError("sample " + std::to_string(i) + " has no valid frames");
    if (len != valid_len[i]) throw ShapeError("valid_len disagrees with mask for sample " + std::to_string(i));
  }
}

ClipBatch ClipBatch::from_lengths(Tensor features, const std::vector<std::size_t>& lengths) {
  ClipBatch c;
  const std::size_t b = features.dim(0);
  const std::size_t t = features.dim(1);
  if (lengths.size() != b) throw ShapeError("from_lengths: one length per sample required");
  c.mask = Tensor({b, t});
  for (std::size_t i = 0; i < b; ++i) {
    if (lengths[i] > t) throw ShapeError("from_lengths: length exceeds T_s");
    for (std::size_t s = 0; s < lengths[i]; ++s) c.mask[i * t + s] = 1.0;
  }
  c.features = std::move(features);
  c.valid_len = lengths;
  c.validate();
  return c;
}

TokenBatch TokenBatch::from_targets(const std::vector<std::vector<std::int32_t>>& targets) {
  TokenBatch tb;
  tb.batch = targets.size();
  for (const auto& y : targets) {
    if (y.empty() || y.back() != kEos) throw ShapeError("target sequences must end with EOS");
    tb.length = std::max(tb.length, y.size());
  }
  tb.input.assign(tb.batch * tb.length, kPad);
  tb.labels.assign(tb.batch * tb.length, kPad);
  tb.label_mask = Tensor({tb.batch, tb.length});
  for (std::size_t b = 0; b < tb.batch; ++b) {
    const auto& y = targets[b];
    for (std::size_t t = 0; t < y.size(); ++t) {
      tb.labels[b * tb.length + t] = y[t];
      tb.input[b * tb.length + t] = t == 0 ? kBos : y[t - 1];
      tb.label_mask[b * tb.length + t] = 1.0;
    }
  }
  return tb;
}

}  // namespace signthought
