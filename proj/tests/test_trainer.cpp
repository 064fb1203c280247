#include "normfree/optim.hpp"
#include "normfree/run_io.hpp"
#include "normfree/trainer.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>

using namespace normfree;
using normfree::test::Injector;
using normfree::test::random_ids;
using normfree::test::read_file;
using normfree::test::read_lines;
using normfree::test::split_csv;
using normfree::test::TempDir;

namespace {

Corpus repeated_corpus(std::size_t bytes = 20000) {
  const std::string text = test::repeated_text(bytes);
  return Corpus("repeated", std::vector<std::uint8_t>(text.begin(), text.end()), 0.9);
}

ModelConfig micro_config(ActivationKind act = ActivationKind::gelu(), NormMode norm = NormMode::PreLN) {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.dim = 16;
  c.context = 16;
  c.norm = norm;
  c.act = act;
  c.seed = 3;
  return c;
}

TrainConfig micro_train(Index steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch = 4;
  t.lr = 3e-3;
  t.eval_batches = 4;
  t.probe_batches = 2;
  t.snapshot_every = 5;
  t.seed = 11;
  return t;
}

}  // namespace

TEST_SUITE("loss") {
  TEST_CASE("uniform logits give ln V") {
    Tape tape(false);
    const Tensor logits = Tensor::zeros({3, 256});
    CHECK(cross_entropy(tape, logits, std::vector<Index>{0, 17, 255}).item() ==
          doctest::Approx(5.545177444479562).epsilon(1e-14));
  }

  TEST_CASE("a dominant correct logit drives the loss to zero") {
    Tape tape(false);
    Tensor logits = Tensor::zeros({1, 5});
    logits.data()[2] = 1e4;
    CHECK(cross_entropy(tape, logits, std::vector<Index>{2}).item() == 0.0);
    logits.data()[2] = 50.0;
    CHECK(cross_entropy(tape, logits, std::vector<Index>{2}).item() < 1e-20);
  }

  TEST_CASE("perplexity of loss 1 is e") { CHECK(std::exp(1.0) == doctest::Approx(2.718281828459045)); }
}

TEST_SUITE("optimizer") {
  TEST_CASE("one AdamW step with weight decay") {
    std::vector<Scalar> w{1.0}, g{1.0}, m{0.0}, v{0.0};
    adamw_update(w, g, m, v, 1, 1e-3, AdamWHyper{0.9, 0.999, 1e-8, 0.1}, true);
    CHECK(std::abs(w[0] - 0.9989) < 1e-10);
  }

  TEST_CASE("zero gradient and zero decay leave the weight unchanged") {
    std::vector<Scalar> w{0.37, -2.0}, g{0.0, 0.0}, m{0.0, 0.0}, v{0.0, 0.0};
    for (Index t = 1; t <= 3; ++t) adamw_update(w, g, m, v, t, 1e-2, AdamWHyper{0.9, 0.999, 1e-8, 0.0}, true);
    CHECK(w == std::vector<Scalar>{0.37, -2.0});
  }

  TEST_CASE("two steps equal the closed form") {
    // With a constant gradient g the bias-corrected moments are g and g^2
    // at every step, so w_{t+1} = w_t (1 - lr wd) - lr g / (|g| + eps).
    const long double lr = 1e-3L, wd = 0.1L, eps = 1e-8L, g = 0.5L, w0 = 1.5L;
    const long double w1 = w0 * (1 - lr * wd) - lr * g / (g + eps);
    const long double w2 = w1 * (1 - lr * wd) - lr * g / (g + eps);
    std::vector<Scalar> w{static_cast<Scalar>(w0)}, gv{static_cast<Scalar>(g)}, m{0.0}, v{0.0};
    adamw_update(w, gv, m, v, 1, 1e-3, AdamWHyper{0.9, 0.999, 1e-8, 0.1}, true);
    adamw_update(w, gv, m, v, 2, 1e-3, AdamWHyper{0.9, 0.999, 1e-8, 0.1}, true);
    CHECK(std::abs(w[0] - static_cast<Scalar>(w2)) < 1e-14);
  }

  TEST_CASE("weight decay skips vectors and scalars") {
    ModelConfig c = micro_config(ActivationKind::leaky_global(0.1));
    Model model(c);
    const Scalar bias_before = model.parameters().get("h0.attn.bq").at(0);
    const Scalar slope_before = model.parameters().get("slope").item();
    for (auto& p : model.parameters().entries()) p.value.ensure_grad();
    AdamW opt(model.parameters(), AdamWHyper{0.9, 0.999, 1e-8, 0.5});
    const Scalar w_before = model.parameters().get("h0.attn.wq").at(0);
    opt.step(1, 0.1);
    CHECK(model.parameters().get("h0.attn.bq").at(0) == bias_before);
    CHECK(model.parameters().get("slope").item() == slope_before);
    CHECK(model.parameters().get("h0.attn.wq").at(0) == doctest::Approx(w_before * (1 - 0.05)).epsilon(1e-15));
  }

  TEST_CASE("schedule: linear warmup, cosine decay, floor at the end") {
    const LrSchedule s{1e-3, 1e-4, 10, 100};
    for (Index t = 1; t <= 10; ++t) CHECK(s.at(t) == doctest::Approx(1e-3 * static_cast<Scalar>(t) / 10.0));
    for (Index t = 11; t <= 100; ++t) CHECK(s.at(t) <= s.at(t - 1));
    CHECK(s.at(100) == 1e-4);
    CHECK(s.at(55) == doctest::Approx(1e-4 + 0.5 * 9e-4));
  }

  TEST_CASE("gradient clipping rescales to the bound") {
    Model model(micro_config());
    for (auto& p : model.parameters().entries()) {
      p.value.ensure_grad();
      p.value.grad_array() = 1.0;
    }
    const Scalar before = clip_grad_norm(model.parameters(), 2.0);
    CHECK(before == doctest::Approx(std::sqrt(static_cast<Scalar>(model.parameters().count()))));
    CHECK(global_grad_norm(model.parameters()) == doctest::Approx(2.0).epsilon(1e-12));
  }
}

TEST_SUITE("nan scan") {
  TEST_CASE("clean forward pass produces no events") {
    Model model(micro_config());
    NaNScanner scanner;
    Tape tape(false);
    model.forward(tape, random_ids(16, 256, 1), 1, &scanner);
    CHECK(scanner.events().empty());
  }

  TEST_CASE("NaN in layer 7 ffn pre-activation is attributed to that site") {
    ModelConfig c = micro_config(ActivationKind::relu(), NormMode::NormFree);
    c.layers = 8;
    Model model(c);
    Injector inject(7, ProbeSite::FfnPreact, std::numeric_limits<Scalar>::quiet_NaN());
    NaNScanner scanner(5);
    ObserverChain chain({&inject, &scanner});
    Tape tape(false);
    model.forward(tape, random_ids(16, 256, 2), 1, &chain);
    REQUIRE(scanner.events().size() == 1);
    CHECK(scanner.events()[0] == NaNEvent{5, 7, "ffn-preact", 1});
  }

  TEST_CASE("overflow to Inf in attention scores is reported") {
    Model model(micro_config());
    Injector inject(1, ProbeSite::AttentionScores, std::numeric_limits<Scalar>::max() * 10.0);
    NaNScanner scanner;
    ObserverChain chain({&inject, &scanner});
    Tape tape(false);
    model.forward(tape, random_ids(16, 256, 3), 1, &chain);
    REQUIRE(scanner.events().size() == 1);
    CHECK(scanner.events()[0].layer == 1);
    CHECK(scanner.events()[0].site == "attention-scores");
  }

  TEST_CASE("non-finite counting includes both infinities") {
    const std::vector<Scalar> v{1.0, std::numeric_limits<Scalar>::infinity(),
                                -std::numeric_limits<Scalar>::infinity(), std::nan("")};
    CHECK(count_nonfinite(v) == 3);
  }
}

TEST_SUITE("trainer") {
  TEST_CASE("zero steps writes the manifest and the initial snapshot only") {
    TempDir tmp;
    const Corpus corpus = repeated_corpus();
    const ModelConfig mc = micro_config();
    const TrainConfig tc = micro_train(0);
    RunDirectoryWriter writer(tmp.path() / "run", run_info("zero", mc, tc, corpus));
    Model model(mc);
    const RunResult r = train(model, corpus, tc, &writer);
    CHECK(r.steps_completed == 0);
    CHECK(r.status == RunStatus::Completed);
    const auto dir = tmp.path() / "run";
    CHECK(std::filesystem::exists(dir / "manifest.json"));
    CHECK(read_lines(dir / "metrics.csv").size() == 2);
    CHECK(std::filesystem::exists(dir / "entropy" / "step_0.csv"));
    CHECK(std::distance(std::filesystem::directory_iterator(dir / "entropy"), {}) == 1);
    const auto manifest = read_manifest(dir);
    CHECK(manifest.at("status") == "completed");
    CHECK(manifest.at("steps_completed") == 0);
  }

  TEST_CASE("same seed and configuration give byte-identical metrics") {
    TempDir tmp;
    const Corpus corpus = repeated_corpus();
    const ModelConfig mc = micro_config(ActivationKind::leaky_layerwise(0.1), NormMode::NormFree);
    const TrainConfig tc = micro_train(12);
    for (const char* name : {"a", "b"}) {
      RunDirectoryWriter writer(tmp.path() / name, run_info(name, mc, tc, corpus));
      Model model(mc);
      train(model, corpus, tc, &writer);
    }
    for (const char* file : {"metrics.csv", "slopes.csv", "summary.csv", "layer_entropy.csv"}) {
      INFO(file);
      CHECK(read_file(tmp.path() / "a" / file) == read_file(tmp.path() / "b" / file));
    }
    CHECK(read_lines(tmp.path() / "a" / "metrics.csv").size() == 1 + 4);
  }

  TEST_CASE("a short run on repeated text beats the uniform predictor") {
    ModelConfig mc;
    mc.layers = 2;
    mc.heads = 2;
    mc.dim = 64;
    mc.context = 32;
    mc.norm = NormMode::PreLN;
    TrainConfig tc;
    tc.steps = 200;
    tc.batch = 8;
    tc.lr = 3e-3;
    tc.eval_batches = 4;
    tc.probe_batches = 1;
    tc.snapshot_every = 100;
    Model model(mc);
    const RunResult r = train(model, repeated_corpus(), tc);
    REQUIRE(r.metrics.size() == 3);
    CHECK(r.metrics.back().eval_loss < std::log(256.0));
    CHECK(r.metrics.back().eval_loss < r.metrics.front().eval_loss);
    for (const auto& m : r.metrics) CHECK(m.eval_ppl == std::exp(m.eval_loss));
  }

  TEST_CASE("global slope is logged identically for every layer at every step") {
    TempDir tmp;
    const Corpus corpus = repeated_corpus();
    ModelConfig mc = micro_config(ActivationKind::leaky_global(0.1), NormMode::NormFree);
    mc.layers = 3;
    const TrainConfig tc = micro_train(10);
    RunDirectoryWriter writer(tmp.path(), run_info("global", mc, tc, corpus));
    Model model(mc);
    train(model, corpus, tc, &writer);
    const auto lines = read_lines(tmp.path() / "slopes.csv");
    REQUIRE(lines.size() == 1 + 11 * 3);
    for (std::size_t i = 1; i < lines.size(); i += 3) {
      const auto a = split_csv(lines[i]), b = split_csv(lines[i + 1]), c = split_csv(lines[i + 2]);
      CHECK(a[0] == b[0]);
      CHECK(a[2] == b[2]);
      CHECK(b[2] == c[2]);
    }
  }

  TEST_CASE("a diverged run halts with complete artifacts") {
    TempDir tmp;
    const Corpus corpus = repeated_corpus();
    const ModelConfig mc = micro_config(ActivationKind::relu(), NormMode::NormFree);
    TrainConfig tc = micro_train(40);
    tc.divergence_window = 3;
    Injector inject(1, ProbeSite::FfnPreact, std::numeric_limits<Scalar>::quiet_NaN(), 5);
    RunDirectoryWriter writer(tmp.path(), run_info("diverge", mc, tc, corpus));
    Model model(mc);
    const RunResult r = train(model, corpus, tc, &writer, TrainHooks{&inject});
    CHECK(r.status == RunStatus::Diverged);
    CHECK(r.steps_completed == 8);
    REQUIRE(r.first_nan_step().has_value());
    CHECK(*r.first_nan_step() == 6);
    CHECK(r.nan_events.front() == NaNEvent{6, 1, "ffn-preact", 1});
    const auto manifest = read_manifest(tmp.path());
    CHECK(manifest.at("status") == "diverged");
    CHECK(manifest.at("steps_completed") == 8);
    CHECK(manifest.at("final").at("first_nan_step") == 6);
    const auto metrics = read_lines(tmp.path() / "metrics.csv");
    CHECK(split_csv(metrics.back())[0] == "8");
    CHECK(std::filesystem::exists(tmp.path() / "entropy" / "step_8.csv"));
    CHECK(std::filesystem::exists(tmp.path() / "checkpoints" / "final.ckpt"));
    CHECK(read_lines(tmp.path() / "nan_events.csv").size() >= 4);
  }

  TEST_CASE("snapshot steps") {
    TrainConfig tc;
    tc.steps = 10;
    tc.snapshot_every = 4;
    CHECK(snapshot_steps(tc) == std::vector<Index>{0, 4, 8, 10});
    tc.steps = 8;
    CHECK(snapshot_steps(tc) == std::vector<Index>{0, 4, 8});
    tc.steps = 0;
    CHECK(snapshot_steps(tc) == std::vector<Index>{0});
  }

  TEST_CASE("invalid training settings are rejected") {
    TrainConfig tc;
    tc.batch = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = TrainConfig{};
    tc.warmup = tc.steps + 1;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = TrainConfig{};
    tc.clip = -1;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
  }
}
