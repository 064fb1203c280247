#include "normfree/entropy.hpp"
#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

using namespace normfree;
using normfree::test::random_tensor;
using normfree::test::to_tensor;

namespace {

// (1/T) sum_{i=1..T} ln i, evaluated at 30 digits.
struct ClosedForm {
  Index t;
  Scalar value;
};
const ClosedForm kUniformCausal[] = {
    {2, 0.346573590279972654708616060729},
    {8, 1.32557536284315627855215342509},
    {64, 3.20575311691626872712164737321},
    {128, 3.87816780068138766144369389598},
};

AttentionSnapshot snapshot_of(std::vector<std::vector<Scalar>> rows, Index context = 64, Index step = 0) {
  RowMatrix e(static_cast<Index>(rows.size()), static_cast<Index>(rows[0].size()));
  for (Index l = 0; l < e.rows(); ++l)
    for (Index h = 0; h < e.cols(); ++h) e(l, h) = rows[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
  return AttentionSnapshot{step, context, e};
}

RowMatrix random_causal_attention(Index t, std::uint64_t seed, Scalar spread) {
  const Tensor s = random_tensor({t, t}, seed, -spread, spread);
  Tape tape(false);
  return causal_softmax(tape, s, CausalMask(t)).matrix();
}

}  // namespace

TEST_SUITE("entropy") {
  TEST_CASE("one-hot rows have zero entropy") {
    RowMatrix a = RowMatrix::Zero(4, 4);
    for (Index i = 0; i < 4; ++i) a(i, 0) = 1.0;
    CHECK(headwise_entropy(to_tensor(a)) == 0.0);
    // The unclamped value is -log(1 + eps) per row.
    CHECK(-std::log(1.0 + kEntropyEps) < 0.0);
  }

  TEST_CASE("two-token hand computation") {
    RowMatrix a(2, 2);
    a << 1, 0, 0.5, 0.5;
    CHECK(headwise_entropy(to_tensor(a), 0.0) == doctest::Approx(std::log(2.0) / 2).epsilon(1e-15));
    CHECK(std::abs(headwise_entropy(to_tensor(a)) - 0.34657359) < 1e-7);
  }

  TEST_CASE("uniform-causal attention matches the closed form") {
    for (const auto& c : kUniformCausal) {
      INFO("T = " << c.t);
      const RowMatrix a = kernels::uniform_causal_attention<Scalar>(c.t);
      CHECK(std::abs(headwise_entropy(to_tensor(a), 0.0) - c.value) < 1e-9);
      CHECK(std::abs(headwise_entropy(to_tensor(a)) - c.value) < 1e-6);
      // The ln T bound for full rows is not the causal value.
      CHECK(c.value < std::log(static_cast<Scalar>(c.t)));
    }
  }

  TEST_CASE("entropy lies in [0, ln T] and ignores query order") {
    std::mt19937_64 rng(5);
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      const Index t = 2 + static_cast<Index>(seed % 7) * 5;
      const RowMatrix a = random_causal_attention(t, seed, 1.0 + static_cast<Scalar>(seed));
      const Scalar e = headwise_entropy(to_tensor(a));
      CHECK(e >= 0.0);
      CHECK(e <= std::log(static_cast<Scalar>(t)) + 1e-6);
      std::vector<Index> perm(static_cast<std::size_t>(t));
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      RowMatrix shuffled(t, t);
      for (Index i = 0; i < t; ++i) shuffled.row(i) = a.row(perm[static_cast<std::size_t>(i)]);
      CHECK(headwise_entropy(to_tensor(shuffled)) == doctest::Approx(e).epsilon(1e-13));
    }
  }

  TEST_CASE("non-finite attention yields NaN and non-square input is rejected") {
    RowMatrix a = kernels::uniform_causal_attention<Scalar>(3);
    a(2, 1) = std::numeric_limits<Scalar>::quiet_NaN();
    CHECK(std::isnan(headwise_entropy(to_tensor(a))));
    CHECK_THROWS_AS(headwise_entropy(Tensor::zeros({2, 3})), DimensionError);
  }

  TEST_CASE("untrained model with zero query and key weights is uniform-causal in every head") {
    ModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.dim = 16;
    c.context = 128;
    c.norm = NormMode::NormFree;
    Model m(c);
    for (auto& p : m.parameters().entries()) {
      if (p.name.ends_with("attn.wq") || p.name.ends_with("attn.wk")) p.value.array() = 0.0;
    }
    Batch probe;
    probe.batch = 1;
    probe.context = 128;
    probe.inputs = test::random_ids(128, 256, 1);
    const AttentionSnapshot s = snapshot(m, std::span(&probe, 1), 0);
    CHECK(s.layers() == 2);
    CHECK(s.heads() == 2);
    for (Index l = 0; l < 2; ++l)
      for (Index h = 0; h < 2; ++h) CHECK(std::abs(s.entropies(l, h) - 3.87816780068138766) < 1e-6);
  }

  TEST_CASE("snapshots have shape L x H and are repeatable") {
    ModelConfig c;
    c.layers = 3;
    c.heads = 2;
    c.dim = 8;
    c.context = 8;
    Model m(c);
    test::randomize(m, 4, 1.0);
    std::vector<Batch> probe(2);
    for (auto& b : probe) {
      b.batch = 2;
      b.context = 8;
    }
    probe[0].inputs = test::random_ids(16, 256, 2);
    probe[1].inputs = test::random_ids(16, 256, 3);
    const AttentionSnapshot a = snapshot(m, probe, 7), b = snapshot(m, probe, 7);
    CHECK(a.entropies.rows() == 3);
    CHECK(a.entropies.cols() == 2);
    CHECK(a.step == 7);
    CHECK((a.entropies.array() == b.entropies.array()).all());
    for (Index l = 0; l < 3; ++l)
      for (Index h = 0; h < 2; ++h) {
        CHECK(a.entropies(l, h) >= 0.0);
        CHECK(a.entropies(l, h) <= std::log(8.0) + 1e-6);
      }
  }

  TEST_CASE("recorder averages over every sequence") {
    EntropyRecorder rec(1, 2);
    RowMatrix first = kernels::uniform_causal_attention<Scalar>(2);
    RowMatrix second = RowMatrix::Zero(2, 2);
    second(0, 0) = second(1, 1) = 1.0;
    // [batch=2, heads=2] blocks: (b0,h0)=uniform (b0,h1)=onehot (b1,h0)=onehot (b1,h1)=uniform
    std::vector<Scalar> data;
    for (const RowMatrix* m : {&first, &second, &second, &first}) data.insert(data.end(), m->data(), m->data() + 4);
    rec.on_attention(0, Tensor::from({4, 2, 2}, data), 2, 2);
    const RowMatrix mean = rec.mean();
    const Scalar half = headwise_entropy(to_tensor(first)) / 2;
    CHECK(mean(0, 0) == doctest::Approx(half));
    CHECK(mean(0, 1) == doctest::Approx(half));
    CHECK(rec.sequences() == 2);
  }
}

TEST_SUITE("summary") {
  TEST_CASE("quartile example") {
    const EntropySummary s = summarize(snapshot_of({{4.0, 1.0, 2.0, 3.9}}));
    REQUIRE(s.max_observed.has_value());
    CHECK(*s.max_observed == 4.0);
    CHECK(s.bins == std::array<Index, 4>{0, 1, 1, 2});
    CHECK(*s.overload_fraction == 0.5);
  }

  TEST_CASE("all heads equal land in the closed top bin") {
    const EntropySummary s = summarize(snapshot_of({{2.5, 2.5}, {2.5, 2.5}}));
    CHECK(*s.max_observed == 2.5);
    CHECK(*s.overload_fraction == 1.0);
  }

  TEST_CASE("bin counts and fractions are consistent") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<Scalar> dist(0.0, 4.0);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<std::vector<Scalar>> rows(4, std::vector<Scalar>(3));
      for (auto& r : rows)
        for (auto& v : r) v = dist(rng);
      if (trial % 5 == 0) rows[1][2] = std::numeric_limits<Scalar>::quiet_NaN();
      const EntropySummary s = summarize(snapshot_of(rows));
      CHECK(s.bins[0] + s.bins[1] + s.bins[2] + s.bins[3] == s.finite_heads);
      CHECK(s.finite_heads + s.nonfinite_heads == 12);
      CHECK(*s.overload_fraction + *s.midband_fraction + *s.bottom_fraction == doctest::Approx(1.0).epsilon(1e-15));
    }
  }

  TEST_CASE("no finite head means no fractions and a collapsed snapshot") {
    const Scalar nan = std::numeric_limits<Scalar>::quiet_NaN();
    const EntropySummary s = summarize(snapshot_of({{nan, nan}}));
    CHECK_FALSE(s.max_observed.has_value());
    CHECK_FALSE(s.overload_fraction.has_value());
    CHECK(s.collapsed);
    CHECK(s.collapsed_layers == std::vector<Index>{0});
  }
}

TEST_SUITE("layerwise") {
  TEST_CASE("layer means") {
    const AttentionSnapshot s = snapshot_of({{1.0, 3.0}, {2.0, 2.0}});
    const auto rows = layerwise_series(std::span(&s, 1));
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].mean == 2.0);
    CHECK(rows[1].mean == 2.0);
  }

  TEST_CASE("series has one entry per snapshot and layer") {
    const std::vector<AttentionSnapshot> snaps{snapshot_of({{1.0}, {2.0}}, 64, 0), snapshot_of({{1.0}, {2.0}}, 64, 5),
                                               snapshot_of({{1.0}, {2.0}}, 64, 9)};
    const auto rows = layerwise_series(snaps);
    CHECK(rows.size() == 6);
    CHECK(rows[4].step == 9);
    CHECK(rows[4].layer == 0);
  }

  TEST_CASE("collapse flag follows the 0.1 ln T threshold") {
    const Index t = 64;
    const Scalar edge = 0.1 * std::log(64.0);
    // A synthetic decaying series for one layer; a second layer stays high.
    std::vector<AttentionSnapshot> snaps;
    const std::vector<Scalar> means{3.0, 1.5, 0.8, edge + 1e-9, edge - 1e-9, 0.05};
    for (std::size_t i = 0; i < means.size(); ++i) {
      snaps.push_back(snapshot_of({{means[i], means[i]}, {3.0, 3.0}}, t, static_cast<Index>(i)));
    }
    const auto rows = layerwise_series(snaps);
    std::vector<bool> flags;
    for (const auto& r : rows)
      if (r.layer == 0) flags.push_back(r.collapsed);
    CHECK(flags == std::vector<bool>{false, false, false, false, true, true});
    for (const auto& r : rows)
      if (r.layer == 1) CHECK_FALSE(r.collapsed);
    CHECK(summarize(snaps[4]).collapsed_layers == std::vector<Index>{0});
  }

  TEST_CASE("non-finite heads are excluded from the mean") {
    const Scalar nan = std::numeric_limits<Scalar>::quiet_NaN();
    const AttentionSnapshot s = snapshot_of({{nan, 3.0}, {nan, nan}});
    const auto rows = layerwise_series(std::span(&s, 1));
    CHECK(rows[0].mean == 3.0);
    CHECK(rows[0].excluded_heads == 1);
    CHECK(std::isnan(rows[1].mean));
    CHECK(rows[1].collapsed);
  }
}
