#pragma once

#include "normfree/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace normfree {

/// Byte-level vocabulary: every byte value is its own token.
inline constexpr Index kByteVocab = 256;
inline constexpr std::string_view kByteTokenizerName = "byte-level-256";

std::vector<Index> tokenize(std::string_view bytes);
std::string detokenize(std::span<const Index> ids);

/// Raw training text with a contiguous train/eval split: the first
/// floor(split * size) bytes train, the rest evaluate.
class Corpus {
 public:
  Corpus(std::string source, std::vector<std::uint8_t> bytes, double split_fraction = 0.9);
  static Corpus from_file(const std::filesystem::path& path, double split_fraction = 0.9);

  const std::string& source() const { return source_; }
  std::span<const std::uint8_t> bytes() const { return bytes_; }
  std::span<const std::uint8_t> train() const { return std::span(bytes_).first(train_end_); }
  std::span<const std::uint8_t> eval() const { return std::span(bytes_).subspan(train_end_); }
  double split_fraction() const { return split_; }
  std::size_t train_end() const { return train_end_; }
  /// FNV-1a 64 of the bytes, recorded in manifests for comparability checks.
  std::uint64_t fingerprint() const { return fingerprint_; }

 private:
  std::string source_;
  std::vector<std::uint8_t> bytes_;
  double split_;
  std::size_t train_end_;
  std::uint64_t fingerprint_;
};

/// B rows of T input ids and the same rows shifted by one as targets.
struct Batch {
  Index batch = 0;
  Index context = 0;
  std::vector<Index> inputs;
  std::vector<Index> targets;
  std::vector<Index> offsets;
};

/// Windows of length T+1 starting at the given offsets inside region.
Batch batch_at(std::span<const std::uint8_t> region, std::span<const Index> offsets, Index context);

/// Seeded stream of training batches drawn uniformly from the train split.
class BatchSampler {
 public:
  BatchSampler(std::span<const std::uint8_t> region, Index batch, Index context, std::uint64_t seed);
  Batch next();

 private:
  std::span<const std::uint8_t> region_;
  Index batch_;
  Index context_;
  std::mt19937_64 rng_;
  std::uniform_int_distribution<Index> offset_;
};

Batch next_batch(const Corpus& corpus, Index batch, Index context, std::mt19937_64& rng);

/// A fixed held-out set of `count` batches from the eval split.
std::vector<Batch> eval_batches(const Corpus& corpus, Index batch, Index context, Index count, std::uint64_t seed);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

}  // namespace normfree
