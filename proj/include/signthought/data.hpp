#pragma once

// Synthetic segmental sign-to-text task and the SGTD1 dataset container.
//
// A clip is a run of segments; every frame of a segment is the segment symbol's
// fixed embedding plus Gaussian noise. The target emits one token per segment
// (symbol id + kNumSpecial) followed by EOS, optionally with adjacent swaps.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "signthought/batch.hpp"
#include "signthought/config.hpp"
#include "signthought/tensor.hpp"

namespace signthought {

struct SyntheticSample {
  Tensor features;                           // [T_s, d_x]
  std::vector<std::int32_t> tokens;          // ends with EOS
  std::vector<std::uint32_t> frame_to_segment;
  std::vector<std::uint32_t> segment_symbols;

  std::size_t steps() const { return features.dim(0); }
};

// Per-symbol frame embeddings [lexicon_size, d_x], drawn once from cfg.seed.
Tensor symbol_embeddings(const SynthConfig& cfg);

// Deterministic in (cfg, sample_seed). Adjacent segments never share a symbol.
SyntheticSample gen_sample(const SynthConfig& cfg, const Tensor& embeddings, std::uint64_t sample_seed);
SyntheticSample gen_sample(const SynthConfig& cfg, std::uint64_t sample_seed);

// Sample i uses seed mix(split_seed, i).
std::uint64_t sample_seed(std::uint64_t split_seed, std::size_t index);
std::vector<SyntheticSample> gen_dataset(const SynthConfig& cfg, std::uint64_t split_seed, std::size_t count);

enum class Split { Train = 0, Dev = 1, Test = 2 };
std::uint64_t split_seed(const SynthConfig& cfg, Split split);  // cfg.seed + {0, 1, 2}
Split parse_split(const std::string& name);
std::string split_name(Split split);

class DataError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, Truncated, VersionMismatch, Io, Invalid };
  DataError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct Dataset {
  std::uint32_t d_x = 0;
  std::uint32_t lexicon_size = 0;
  std::vector<SyntheticSample> samples;
};

inline constexpr std::uint32_t kDatasetVersion = 1;

std::string encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

struct Batch {
  ClipBatch clip;
  TokenBatch tokens;
  std::vector<std::size_t> indices;  // into the source sample list
};

// Right-pads features with zeros and tokens with PAD, keeping the given order.
Batch make_batch(const std::vector<SyntheticSample>& samples, std::span<const std::size_t> indices);

}  // namespace signthought
