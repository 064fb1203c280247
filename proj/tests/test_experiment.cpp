#include "normfree/checkpoint.hpp"
#include "normfree/experiment.hpp"
#include "normfree/serialize.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

using namespace normfree;
using nlohmann::json;
using normfree::test::read_file;
using normfree::test::TempDir;

namespace {

Corpus repeated_corpus(const std::filesystem::path& dir) {
  const std::string text = test::repeated_text(30000);
  const auto path = dir / "corpus.txt";
  std::ofstream(path, std::ios::binary) << text;
  return Corpus::from_file(path);
}

/// A recipe small enough to train in well under a second.
Recipe micro_recipe(const std::string& name, std::optional<std::string> config = std::nullopt) {
  Recipe r;
  r.name = name;
  r.config = std::move(config);
  r.model = json{{"layers", 2}, {"heads", 2}, {"dim", 16}, {"context", 16}};
  r.train = json{{"steps", 6}, {"batch", 2}, {"eval_batches", 2}, {"probe_batches", 1}, {"snapshot_every", 3}};
  return r;
}

void write_json(const std::filesystem::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(NFLAB_BINARY) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_SUITE("serialization") {
  TEST_CASE("model and train configs round-trip through JSON") {
    ModelConfig m;
    m.layers = 3;
    m.norm = NormMode::NormFree;
    m.act = ActivationKind::leaky_layerwise(0.1);
    m.gelu_approx = GeluApprox::Erf;
    m.init_std = 0.013;
    m.seed = 77;
    CHECK(model_config_from_json(json::parse(to_json(m).dump())) == m);
    TrainConfig t;
    t.steps = 123;
    t.lr = 1.7e-4;
    t.warmup = 7;
    t.clip = 0.0;
    CHECK(train_config_from_json(json::parse(to_json(t).dump())) == t);
  }

  TEST_CASE("unknown keys are rejected") {
    ModelConfig m;
    CHECK_THROWS_AS(apply_json(m, json{{"depth", 3}}), ConfigError);
    CHECK_THROWS_AS(apply_json(m, json{{"act", "swish"}}), ConfigError);
    TrainConfig t;
    CHECK_THROWS_AS(apply_json(t, json{{"steps", "many"}}), ConfigError);
  }

  TEST_CASE("checkpoint round-trip restores every parameter bit for bit") {
    TempDir tmp;
    ModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.dim = 8;
    c.context = 8;
    c.act = ActivationKind::leaky_global(0.1);
    c.seed = 9;
    Model m(c);
    test::randomize(m, 3);
    save_checkpoint(tmp.path() / "m.ckpt", m, 42);
    Checkpoint meta;
    const Model back = load_checkpoint(tmp.path() / "m.ckpt", &meta);
    CHECK(meta.step == 42);
    CHECK(meta.config == c);
    for (const auto& p : m.parameters().entries()) {
      INFO(p.name);
      CHECK(test::values(back.parameters().get(p.name)) == test::values(p.value));
    }
    std::ofstream(tmp.path() / "bad.ckpt") << "NOTACKPT";
    CHECK_THROWS(load_checkpoint(tmp.path() / "bad.ckpt"));
  }
}

TEST_SUITE("recipes") {
  TEST_CASE("shipped recipes load and resolve for every seed") {
    int count = 0;
    for (const auto& entry : std::filesystem::directory_iterator(std::filesystem::path(NFLAB_SOURCE_DIR) / "recipes")) {
      if (entry.path().extension() != ".json") continue;
      INFO(entry.path().filename().string());
      ++count;
      const Recipe r = load_recipe(entry.path());
      CHECK(r.data == std::optional<std::string>("data/corpus.txt"));
      for (auto seed : r.seeds) {
        const ResolvedRun run = resolve(r, seed);
        CHECK(run.model.layers == 4);
        CHECK(run.train.steps == 3000);
        CHECK(run.train.batch == 8);
      }
    }
    CHECK(count == 7);
  }

  TEST_CASE("serialization round-trips") {
    Recipe r = micro_recipe("rt", "sm-g");
    r.seeds = {1, 2, 3};
    r.data = "/tmp/corpus.txt";
    CHECK(recipe_from_json(json::parse(to_json(r).dump())) == r);
    Recipe bare;
    bare.name = "bare";
    CHECK(recipe_from_json(to_json(bare)) == bare);
  }

  TEST_CASE("malformed recipes are usage errors") {
    CHECK_THROWS_AS(recipe_from_json(json{{"name", "x"}, {"seeds", json::array()}}), UsageError);
    CHECK_THROWS_AS(recipe_from_json(json{{"name", "x"}, {"colour", "red"}}), UsageError);
    CHECK_THROWS_AS(recipe_from_json(json{{"seeds", {1}}}), UsageError);
  }

  TEST_CASE("named configurations map to norm and activation") {
    const auto check = [](const char* name, NormMode norm, ActivationType act) {
      const ResolvedRun r = resolve(micro_recipe("x", name), 0);
      CHECK(r.model.norm == norm);
      CHECK(r.model.act.type == act);
    };
    check("sm-ln-g", NormMode::PreLN, ActivationType::Gelu);
    check("sm-ln-r", NormMode::PreLN, ActivationType::Relu);
    check("sm-g", NormMode::NormFree, ActivationType::Gelu);
    check("sm-r", NormMode::NormFree, ActivationType::Relu);
  }

  TEST_CASE("presets") {
    const auto tiny = preset("tiny");
    REQUIRE(tiny.has_value());
    CHECK(std::tuple(tiny->layers, tiny->heads, tiny->dim, tiny->context) == std::tuple(4, 4, 128, 64));
    CHECK(preset("small")->context == 128);
    CHECK(preset("paper-gpt2")->dim == 768);
    CHECK_FALSE(preset("huge").has_value());
  }

  TEST_CASE("inconsistent recipes fail before any compute") {
    Recipe r = micro_recipe("x", "sm-g");
    r.model["act"] = "leaky-learnable-global";
    CHECK_THROWS_AS(resolve(r, 0), UsageError);

    r = micro_recipe("x");
    r.model["act"] = "gelu";
    r.model["slope"] = 0.1;
    CHECK_THROWS_AS(resolve(r, 0), UsageError);

    r = micro_recipe("x");
    r.model["heads"] = 3;
    CHECK_THROWS_AS(resolve(r, 0), UsageError);

    r = micro_recipe("x");
    r.preset = "huge";
    CHECK_THROWS_AS(resolve(r, 0), UsageError);

    r = micro_recipe("x");
    r.train["seed"] = 4;
    CHECK_THROWS_AS(resolve(r, 0), UsageError);
  }

  TEST_CASE("the seed drives both initialization and batches") {
    const ResolvedRun r = resolve(micro_recipe("x", "sm-r"), 5);
    CHECK(r.model.seed == 5);
    CHECK(r.train.seed == 5);
    CHECK(run_dir_name("x", 5) == "x-seed5");
  }
}

TEST_SUITE("runs") {
  TEST_CASE("re-running a manifest reproduces metrics.csv bit for bit") {
    TempDir tmp;
    const Corpus corpus = repeated_corpus(tmp.path());
    const auto outcomes = run_recipe(micro_recipe("orig", "sm-g"), corpus, tmp.path() / "runs");
    REQUIRE(outcomes.size() == 1);
    const auto dir = outcomes[0].dir;
    for (const auto& file : Recipe::default_artifacts()) {
      INFO(file);
      CHECK(std::filesystem::exists(dir / file));
    }
    const RunOutcome again = rerun(dir, tmp.path() / "again");
    CHECK(read_file(dir / "metrics.csv") == read_file(tmp.path() / "again" / "metrics.csv"));
    CHECK(read_file(dir / "summary.csv") == read_file(tmp.path() / "again" / "summary.csv"));

    const ComparisonReport report = compare_runs({dir, tmp.path() / "again"});
    REQUIRE(report.rows.size() == 2);
    CHECK(*report.rows[1].delta_pct == 0.0);
    CHECK(report.table().find("+0.00") != std::string::npos);
  }

  TEST_CASE("rerun refuses a corpus with a different fingerprint") {
    TempDir tmp;
    const Corpus corpus = repeated_corpus(tmp.path());
    const auto dir = run_recipe(micro_recipe("orig"), corpus, tmp.path())[0].dir;
    std::ofstream(tmp.path() / "other.txt") << test::repeated_text(30001);
    CHECK_THROWS_AS(rerun(dir, tmp.path() / "x", tmp.path() / "other.txt"), ComparabilityError);
  }

  TEST_CASE("compare rejects runs that differ in context, tokenizer or corpus") {
    TempDir tmp;
    const Corpus corpus = repeated_corpus(tmp.path());
    Recipe a = micro_recipe("a");
    Recipe b = micro_recipe("b");
    b.model["context"] = 8;
    const auto da = run_recipe(a, corpus, tmp.path())[0].dir;
    const auto db = run_recipe(b, corpus, tmp.path())[0].dir;
    try {
      compare_runs({da, db});
      FAIL("expected a comparability error");
    } catch (const ComparabilityError& e) {
      CHECK(std::string(e.what()).find("context") != std::string::npos);
    }

    const auto dc = run_recipe(micro_recipe("c"), corpus, tmp.path())[0].dir;
    json m = read_manifest(dc);
    m["tokenizer"] = "bpe-50257";
    write_json(dc / "manifest.json", m);
    CHECK_THROWS_AS(compare_runs({da, dc}), ComparabilityError);
    m["tokenizer"] = read_manifest(da)["tokenizer"];
    m["corpus"]["fingerprint"] = "0000000000000000";
    write_json(dc / "manifest.json", m);
    CHECK_THROWS_AS(compare_runs({da, dc}), ComparabilityError);
    CHECK_THROWS_AS(compare_runs({da}), UsageError);
  }

  TEST_CASE("delta percent") {
    CHECK(delta_percent(2.688, 2.688) == 0.0);
    CHECK(delta_percent(2.936, 2.688) == doctest::Approx(100.0 * 0.248 / 2.688));
    // The published +9.20 and +18.92 lie within 0.05 points of the exact 9.226 and 18.936.
    CHECK(std::abs(delta_percent(2.936, 2.688) - 9.20) < 0.05);
    CHECK(std::abs(delta_percent(3.197, 2.688) - 18.92) < 0.05);
  }
}

TEST_SUITE("grid") {
  TEST_CASE("slope 0 reproduces the relu recipe and rows follow the axis") {
    TempDir tmp;
    const Corpus corpus = repeated_corpus(tmp.path());
    const auto relu_dir = run_recipe(micro_recipe("relu", "sm-r"), corpus, tmp.path())[0].dir;
    const GridReport report = run_grid(micro_recipe("g", "sm-r"), {0.0, 0.2}, corpus, tmp.path());
    REQUIRE(report.rows.size() == 2);
    CHECK(report.rows[0].slope == 0.0);
    REQUIRE(report.rows[0].runs.size() == 1);
    CHECK(read_file(std::filesystem::path(report.rows[0].runs[0].dir) / "metrics.csv") ==
          read_file(relu_dir / "metrics.csv"));
    CHECK(read_file(std::filesystem::path(report.rows[1].runs[0].dir) / "metrics.csv") !=
          read_file(relu_dir / "metrics.csv"));
    const json j = json::parse(read_file(tmp.path() / "g-grid" / "instability_report.json"));
    CHECK(j.at("rows").size() == 2);
    CHECK(j.at("rows")[0].at("first_nan_step").is_null());
    CHECK(test::read_lines(tmp.path() / "g-grid" / "instability_report.csv").size() == 3);
  }

  TEST_CASE("a diverging member is recorded without stopping the grid") {
    TempDir tmp;
    const Corpus corpus = repeated_corpus(tmp.path());
    Recipe r = micro_recipe("hot");
    r.model["norm"] = "none";
    r.train["lr"] = 1e200;
    r.train["clip"] = 0.0;
    r.train["divergence_window"] = 1;
    const GridReport report = run_grid(r, {0.01, 0.2}, corpus, tmp.path());
    REQUIRE(report.rows.size() == 2);
    for (const auto& row : report.rows) {
      CHECK(row.runs[0].status == "diverged");
      CHECK(row.first_nan_step.has_value());
    }
  }
}

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit with 2 before any compute") {
    TempDir tmp;
    const auto corpus = tmp.path() / "c.txt";
    std::ofstream(corpus) << test::repeated_text(5000);
    const std::string data = " --data " + corpus.string() + " --out " + (tmp.path() / "out").string();
    CHECK(run_cli("run --config sm-g --act leaky-learnable-global" + data) == 2);
    CHECK(run_cli("run --act gelu --slope 0.1" + data) == 2);
    CHECK(run_cli("run --act leaky-fixed --slope-init 0.1" + data) == 2);
    CHECK(run_cli("run --config sm-x" + data) == 2);
    CHECK(run_cli("run --config sm-g --data " + (tmp.path() / "missing.txt").string()) == 2);
    CHECK(run_cli("bogus") == 2);
    CHECK_FALSE(std::filesystem::exists(tmp.path() / "out"));
  }

  TEST_CASE("run, compare and grid from the command line") {
    TempDir tmp;
    const auto corpus = tmp.path() / "c.txt";
    std::ofstream(corpus) << test::repeated_text(20000);
    const std::string common = " --layers 1 --dim 16 --heads 2 --ctx 16 --steps 4 --batch 2 --snapshot-every 2 --data " +
                               corpus.string() + " --out " + tmp.path().string();
    CHECK(run_cli("run --config sm-r --seed 1 --seed 2" + common) == 0);
    CHECK(std::filesystem::exists(tmp.path() / "sm-r-seed1" / "manifest.json"));
    CHECK(std::filesystem::exists(tmp.path() / "sm-r-seed2" / "manifest.json"));
    const json m = read_manifest(tmp.path() / "sm-r-seed1");
    CHECK(m.at("model").at("norm") == "none");
    CHECK(m.at("model").at("act") == "relu");
    CHECK(run_cli("compare " + (tmp.path() / "sm-r-seed1").string() + " " + (tmp.path() / "sm-r-seed2").string()) ==
          0);
    CHECK(run_cli("grid --slopes 0,0.1" + common) == 0);
    CHECK(std::filesystem::exists(tmp.path() / "leaky-grid" / "instability_report.json"));

    const std::string hot = " --layers 1 --dim 16 --heads 2 --ctx 16 --steps 60 --batch 2 --lr 1e200 --clip 0 --data " +
                            corpus.string() + " --out " + tmp.path().string();
    CHECK(run_cli("run --norm none --act relu --name hot" + hot) == 3);
    CHECK(run_cli("grid --slopes 0.2 --name hotgrid" + hot) == 0);
  }

  TEST_CASE("the output root defaults to NFLAB_OUT") {
    TempDir tmp;
    const auto corpus = tmp.path() / "c.txt";
    std::ofstream(corpus) << test::repeated_text(20000);
    const std::string cmd = "NFLAB_OUT=" + (tmp.path() / "envout").string() +
                            " " NFLAB_BINARY " run --config sm-g --layers 1 --dim 16 --heads 2 --ctx 16 --steps 2 "
                            "--batch 2 --data " +
                            corpus.string() + " > /dev/null";
    CHECK(std::system(cmd.c_str()) == 0);
    CHECK(std::filesystem::exists(tmp.path() / "envout" / "sm-g-seed0" / "manifest.json"));
  }
}
