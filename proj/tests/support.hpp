#pragma once

#include "normfree/model.hpp"
#include "normfree/ops.hpp"

#include <random>
#include <vector>

namespace normfree::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, Scalar lo = -1.0, Scalar hi = 1.0,
                            bool requires_grad = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Scalar> dist(lo, hi);
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

/// sum(y * r) for a fixed random r, so every output element carries a distinct weight.
inline Tensor weighted_sum(Tape& tape, const Tensor& y, std::uint64_t seed = 99) {
  return sum(tape, mul(tape, y, random_tensor(y.shape(), seed)));
}

inline std::vector<Index> random_ids(Index n, Index vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> dist(0, vocab - 1);
  std::vector<Index> ids(static_cast<std::size_t>(n));
  for (auto& id : ids) id = dist(rng);
  return ids;
}

inline std::vector<Scalar> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline Scalar max_abs_diff(const RowMatrix& a, const RowMatrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

inline RowMatrix as_matrix(const Tensor& t) { return t.matrix(); }

inline Tensor to_tensor(const RowMatrix& m) {
  return Tensor::from({m.rows(), m.cols()}, std::vector<Scalar>(m.data(), m.data() + m.size()));
}

/// Small model configuration for exhaustive checks.
inline ModelConfig small_config(NormMode norm, ActivationKind act, std::uint64_t seed = 7) {
  ModelConfig c;
  c.layers = 1;
  c.heads = 2;
  c.dim = 8;
  c.context = 4;
  c.vocab = 11;
  c.norm = norm;
  c.act = act;
  c.seed = seed;
  return c;
}

/// Overwrites every parameter with seeded noise so biases and gains are non-trivial.
inline void randomize(Model& model, std::uint64_t seed, Scalar scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Scalar> dist(-scale, scale);
  for (auto& p : model.parameters().entries()) {
    for (auto& v : p.value.data()) v = dist(rng);
    if (p.name.ends_with(".g")) {
      for (auto& v : p.value.data()) v += 1.0;
    }
  }
}

/// Writes a value into element 1 of one probe site at one layer, on every
/// training forward pass after the first `from_call`.
class Injector final : public ForwardObserver {
 public:
  Injector(Index layer, ProbeSite site, Scalar value, Index from_call = 0)
      : layer_(layer), site_(site), value_(value), from_call_(from_call) {}
  void on_probe(Index layer, ProbeSite site, Tensor& v) override {
    if (site == ProbeSite::AttentionScores && layer == 0) ++calls_;
    if (layer == layer_ && site == site_ && calls_ > from_call_) v.data()[1] = value_;
  }

 private:
  Index layer_;
  ProbeSite site_;
  Scalar value_;
  Index from_call_;
  Index calls_ = 0;
};

}  // namespace normfree::test

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace normfree::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("normfree-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream s(line);
  for (std::string cell; std::getline(s, cell, ',');) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// Deterministic text with enough structure to learn from.
inline std::string repeated_text(std::size_t bytes) {
  const std::string unit = "the quick brown fox jumps over the lazy dog. pack my box with five dozen liquor jugs!\n";
  std::string out;
  while (out.size() < bytes) out += unit;
  out.resize(bytes);
  return out;
}

}  // namespace normfree::test
