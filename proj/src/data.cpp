#include "signthought/data.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

namespace signthought {

namespace {

constexpr char kMagic[5] = {'S', 'G', 'T', 'D', '1'};

std::mt19937_64 seeded(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32),
                    static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32)};
  return std::mt19937_64(seq);
}

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const char* p, std::size_t n) { out_.append(p, n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError(DataError::Kind::Truncated, "truncated file");
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Tensor symbol_embeddings(const SynthConfig& cfg) {
  std::mt19937_64 rng = seeded(cfg.seed, 0x53594d42ULL, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor e({cfg.lexicon_size, cfg.d_x});
  for (double& v : e.raw()) v = normal(rng);
  return e;
}

SyntheticSample gen_sample(const SynthConfig& cfg, const Tensor& embeddings, std::uint64_t sample_seed) {
  if (embeddings.shape() != Shape{cfg.lexicon_size, cfg.d_x}) {
    throw ShapeError("gen_sample: embeddings do not match the config");
  }
  std::mt19937_64 rng = seeded(cfg.seed, sample_seed, 1);
  std::uniform_int_distribution<std::size_t> n_seg_dist(cfg.segs_min, cfg.segs_max);
  std::uniform_int_distribution<std::size_t> len_dist(cfg.seg_len_min, cfg.seg_len_max);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution swap(cfg.reorder_prob);

  SyntheticSample s;
  const std::size_t n_seg = n_seg_dist(rng);
  std::vector<std::size_t> lengths;
  for (std::size_t i = 0; i < n_seg; ++i) {
    std::uint32_t sym = 0;
    if (i == 0 || cfg.lexicon_size == 1) {
      sym = static_cast<std::uint32_t>(std::uniform_int_distribution<std::size_t>(0, cfg.lexicon_size - 1)(rng));
    } else {
      // Draw from the lexicon minus the previous symbol.
      const auto pick = static_cast<std::uint32_t>(std::uniform_int_distribution<std::size_t>(0, cfg.lexicon_size - 2)(rng));
      sym = pick >= s.segment_symbols.back() ? pick + 1 : pick;
    }
    s.segment_symbols.push_back(sym);
    lengths.push_back(len_dist(rng));
  }

  std::size_t steps = 0;
  for (std::size_t l : lengths) steps += l;
  s.features = Tensor({steps, cfg.d_x});
  std::size_t t = 0;
  for (std::size_t i = 0; i < n_seg; ++i) {
    const auto proto = embeddings.data().subspan(s.segment_symbols[i] * cfg.d_x, cfg.d_x);
    for (std::size_t f = 0; f < lengths[i]; ++f, ++t) {
      s.frame_to_segment.push_back(static_cast<std::uint32_t>(i));
      for (std::size_t c = 0; c < cfg.d_x; ++c) s.features[t * cfg.d_x + c] = proto[c] + cfg.noise_sigma * noise(rng);
    }
  }

  for (std::uint32_t sym : s.segment_symbols) s.tokens.push_back(static_cast<std::int32_t>(sym) + kNumSpecial);
  if (cfg.reorder_prob > 0.0) {
    for (std::size_t i = 0; i + 1 < s.tokens.size();) {
      if (swap(rng)) {
        std::swap(s.tokens[i], s.tokens[i + 1]);
        i += 2;
      } else {
        i += 1;
      }
    }
  }
  s.tokens.push_back(kEos);
  return s;
}

SyntheticSample gen_sample(const SynthConfig& cfg, std::uint64_t seed) {
  return gen_sample(cfg, symbol_embeddings(cfg), seed);
}

std::uint64_t sample_seed(std::uint64_t split, std::size_t index) {
  // splitmix64 finalizer over the pair.
  std::uint64_t z = split * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(index) + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<SyntheticSample> gen_dataset(const SynthConfig& cfg, std::uint64_t split, std::size_t count) {
  cfg.validate();
  const Tensor emb = symbol_embeddings(cfg);
  std::vector<SyntheticSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_sample(cfg, emb, sample_seed(split, i)));
  return out;
}

std::uint64_t split_seed(const SynthConfig& cfg, Split split) {
  return cfg.seed + static_cast<std::uint64_t>(split);
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "dev") return Split::Dev;
  if (name == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + name + "' (expected train, dev or test)");
}

std::string split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

std::string encode_dataset(const Dataset& ds) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.samples.size()));
  w.u32(ds.d_x);
  w.u32(ds.lexicon_size);
  for (const SyntheticSample& s : ds.samples) {
    if (s.features.rank() != 2 || s.features.dim(1) != ds.d_x) throw ShapeError("sample features do not match d_x");
    if (s.frame_to_segment.size() != s.steps()) throw ShapeError("frame_to_segment must cover every frame");
    w.u32(static_cast<std::uint32_t>(s.steps()));
    w.u32(static_cast<std::uint32_t>(s.tokens.size()));
    w.u32(static_cast<std::uint32_t>(s.segment_symbols.size()));
    for (double v : s.features.raw()) w.f32(static_cast<float>(v));
    for (std::int32_t tok : s.tokens) w.u32(static_cast<std::uint32_t>(tok));
    for (std::uint32_t seg : s.frame_to_segment) w.u32(seg);
    for (std::uint32_t sym : s.segment_symbols) w.u32(sym);
  }
  return w.take();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (bytes.size() < sizeof kMagic) {
    // A short prefix of the magic is a truncated file, anything else is foreign.
    if (std::equal(bytes.begin(), bytes.end(), kMagic)) throw DataError(DataError::Kind::Truncated, "truncated file");
    throw DataError(DataError::Kind::BadMagic, "bad magic: not an SGTD1 dataset");
  }
  const auto magic = r.take(sizeof kMagic);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) {
    throw DataError(DataError::Kind::BadMagic, "bad magic: not an SGTD1 dataset");
  }
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw DataError(DataError::Kind::VersionMismatch,
                    "version mismatch: file has " + std::to_string(version) + ", reader supports " +
                        std::to_string(kDatasetVersion));
  }
  Dataset ds;
  const std::uint32_t count = r.u32();
  ds.d_x = r.u32();
  ds.lexicon_size = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    SyntheticSample s;
    const std::uint32_t steps = r.u32();
    const std::uint32_t n_tok = r.u32();
    const std::uint32_t n_seg = r.u32();
    // Check the whole record fits before allocating for it.
    const std::uint64_t record =
        4ULL * (static_cast<std::uint64_t>(steps) * ds.d_x + n_tok + steps + n_seg);
    if (record > r.remaining()) throw DataError(DataError::Kind::Truncated, "truncated file");
    s.features = Tensor({steps, ds.d_x});
    for (double& v : s.features.raw()) v = static_cast<double>(r.f32());
    s.tokens.resize(n_tok);
    for (auto& tok : s.tokens) tok = static_cast<std::int32_t>(r.u32());
    s.frame_to_segment.resize(steps);
    for (auto& seg : s.frame_to_segment) seg = r.u32();
    s.segment_symbols.resize(n_seg);
    for (auto& sym : s.segment_symbols) sym = r.u32();
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  const std::string bytes = encode_dataset(ds);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(DataError::Kind::Io, "cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError(DataError::Kind::Io, "failed writing '" + path.string() + "'");
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::Io, "cannot open '" + path.string() + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_dataset(bytes);
}

Batch make_batch(const std::vector<SyntheticSample>& samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  const std::size_t d_x = samples.at(indices[0]).features.dim(1);
  std::size_t steps = 0;
  std::vector<std::size_t> lengths;
  std::vector<std::vector<std::int32_t>> targets;
  for (std::size_t i : indices) {
    const SyntheticSample& s = samples.at(i);
    if (s.features.dim(1) != d_x) throw ShapeError("make_batch: samples disagree on d_x");
    steps = std::max(steps, s.steps());
    lengths.push_back(s.steps());
    targets.push_back(s.tokens);
  }
  Tensor features({indices.size(), steps, d_x});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& src = samples[indices[b]].features.raw();
    std::copy(src.begin(), src.end(), features.raw().begin() + static_cast<std::ptrdiff_t>(b * steps * d_x));
  }
  Batch out;
  out.clip = ClipBatch::from_lengths(std::move(features), lengths);
  out.tokens = TokenBatch::from_targets(targets);
  out.indices.assign(indices.begin(), indices.end());
  return out;
}

}  // namespace signthought
