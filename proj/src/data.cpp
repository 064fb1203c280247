#include "normfree/data.hpp"

#include <fstream>
#include <iterator>

namespace normfree {

std::vector<Index> tokenize(std::string_view bytes) {
  std::vector<Index> ids;
  ids.reserve(bytes.size());
  for (char c : bytes) ids.push_back(static_cast<Index>(static_cast<unsigned char>(c)));
  return ids;
}

std::string detokenize(std::span<const Index> ids) {
  std::string out;
  out.reserve(ids.size());
  for (Index id : ids) {
    if (id < 0 || id >= kByteVocab) throw std::out_of_range("detokenize: id " + std::to_string(id) + " is not a byte");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Corpus::Corpus(std::string source, std::vector<std::uint8_t> bytes, double split_fraction)
    : source_(std::move(source)), bytes_(std::move(bytes)), split_(split_fraction) {
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
    throw ConfigError("split fraction must be in (0, 1), got " + std::to_string(split_fraction));
  }
  train_end_ = static_cast<std::size_t>(split_ * static_cast<double>(bytes_.size()));
  fingerprint_ = fnv1a64(bytes_);
}

Corpus Corpus::from_file(const std::filesystem::path& path, double split_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open corpus " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return Corpus(path.string(), std::move(bytes), split_fraction);
}

Batch batch_at(std::span<const std::uint8_t> region, std::span<const Index> offsets, Index context) {
  Batch b;
  b.batch = static_cast<Index>(offsets.size());
  b.context = context;
  b.inputs.reserve(offsets.size() * static_cast<std::size_t>(context));
  b.targets.reserve(b.inputs.capacity());
  for (Index off : offsets) {
    if (off < 0 || off + context + 1 > static_cast<Index>(region.size())) {
      throw std::out_of_range("batch_at: window at " + std::to_string(off) + " leaves the region");
    }
    for (Index t = 0; t < context; ++t) {
      b.inputs.push_back(region[static_cast<std::size_t>(off + t)]);
      b.targets.push_back(region[static_cast<std::size_t>(off + t + 1)]);
    }
  }
  b.offsets.assign(offsets.begin(), offsets.end());
  return b;
}

namespace {

void require_room(std::span<const std::uint8_t> region, Index context, const char* which) {
  if (static_cast<Index>(region.size()) < context + 2) {
    throw ConfigError(std::string(which) + " split has " + std::to_string(region.size()) +
                      " bytes, need more than context+1 = " + std::to_string(context + 1));
  }
}

}  // namespace

BatchSampler::BatchSampler(std::span<const std::uint8_t> region, Index batch, Index context, std::uint64_t seed)
    : region_(region), batch_(batch), context_(context), rng_(seed) {
  if (batch < 1 || context < 1) throw ConfigError("batch and context must be >= 1");
  require_room(region, context, "train");
  offset_ = std::uniform_int_distribution<Index>(0, static_cast<Index>(region.size()) - context - 1);
}

Batch BatchSampler::next() {
  std::vector<Index> offsets(static_cast<std::size_t>(batch_));
  for (auto& o : offsets) o = offset_(rng_);
  return batch_at(region_, offsets, context_);
}

Batch next_batch(const Corpus& corpus, Index batch, Index context, std::mt19937_64& rng) {
  require_room(corpus.train(), context, "train");
  std::uniform_int_distribution<Index> dist(0, static_cast<Index>(corpus.train().size()) - context - 1);
  std::vector<Index> offsets(static_cast<std::size_t>(batch));
  for (auto& o : offsets) o = dist(rng);
  return batch_at(corpus.train(), offsets, context);
}

std::vector<Batch> eval_batches(const Corpus& corpus, Index batch, Index context, Index count, std::uint64_t seed) {
  require_room(corpus.eval(), context, "eval");
  BatchSampler sampler(corpus.eval(), batch, context, seed);
  std::vector<Batch> out;
  for (Index i = 0; i < count; ++i) out.push_back(sampler.next());
  return out;
}

}  // namespace normfree
