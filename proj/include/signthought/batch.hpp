#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "signthought/tensor.hpp"

namespace signthought {

inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kBos = 1;
inline constexpr std::int32_t kEos = 2;
inline constexpr std::int32_t kUnk = 3;
inline constexpr std::int32_t kNumSpecial = 4;

// Padded frame features with a prefix validity mask per sample.
struct ClipBatch {
  Tensor features;  // [B, T_s, d_x]
  Tensor mask;      // [B, T_s], 1 = valid
  std::vector<std::size_t> valid_len;

  std::size_t batch() const { return features.dim(0); }
  std::size_t steps() const { return features.dim(1); }

  // Checks shapes, that every mask row is ones-then-zeros, and that L_valid >= 1.
  void validate() const;
  // Builds mask and valid_len from lengths; features must already be [B, T_s, d_x].
  static ClipBatch from_lengths(Tensor features, const std::vector<std::size_t>& lengths);
};

// Teacher-forcing view of target sequences: input = BOS + y, labels = y + EOS.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> input;   // [B, T_t]
  std::vector<std::int32_t> labels;  // [B, T_t]
  Tensor label_mask;                 // [B, T_t], 1 where label != PAD

  // targets[b] ends in EOS; shorter rows are right-padded with PAD.
  static TokenBatch from_targets(const std::vector<std::vector<std::int32_t>>& targets);
};

}  // namespace signthought
