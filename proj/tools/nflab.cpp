#include "normfree/experiment.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace nf = normfree;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitDiverged = 3;

struct RunFlags {
  std::optional<std::string> recipe;
  std::optional<std::string> name;
  std::optional<std::string> config;
  std::optional<std::string> norm;
  std::optional<std::string> act;
  std::optional<double> slope;
  std::optional<double> slope_init;
  std::optional<std::string> preset;
  std::optional<nf::Index> layers, heads, dim, ctx, vocab;
  std::optional<nf::Index> steps, warmup, batch, snapshot_every;
  std::optional<double> lr, wd, clip;
  std::vector<std::uint64_t> seeds;
  std::optional<std::string> data;
  std::optional<std::string> out;
};

void add_run_flags(CLI::App* app, RunFlags& f) {
  app->add_option("--recipe", f.recipe, "Recipe JSON; other flags override it");
  app->add_option("--name", f.name, "Run name (default: config name or <norm>-<act>)");
  app->add_option("--config", f.config, "Named configuration")
      ->check(CLI::IsMember(nf::named_config_names()));
  app->add_option("--norm", f.norm, "Normalization")->check(CLI::IsMember({"pre-ln", "none"}));
  app->add_option("--act", f.act, "FFN activation")
      ->check(CLI::IsMember({"gelu", "relu", "leaky-fixed", "leaky-learnable-layerwise", "leaky-learnable-global"}));
  app->add_option("--slope", f.slope, "Negative slope for leaky-fixed");
  app->add_option("--slope-init", f.slope_init, "Initial slope for learnable leaky activations");
  app->add_option("--preset", f.preset, "Architecture preset")->check(CLI::IsMember(nf::preset_names()));
  app->add_option("--layers", f.layers, "Number of blocks");
  app->add_option("--heads", f.heads, "Attention heads per block");
  app->add_option("--dim", f.dim, "Model width");
  app->add_option("--ctx", f.ctx, "Context length T");
  app->add_option("--vocab", f.vocab, "Vocabulary size (byte tokenizer: 256)");
  app->add_option("--steps", f.steps, "Optimizer steps");
  app->add_option("--lr", f.lr, "Peak learning rate");
  app->add_option("--warmup", f.warmup, "Warmup steps");
  app->add_option("--wd", f.wd, "Weight decay");
  app->add_option("--clip", f.clip, "Global gradient-norm clip (0 disables)");
  app->add_option("--batch", f.batch, "Sequences per step");
  app->add_option("--snapshot-every", f.snapshot_every, "Steps between eval and entropy snapshots");
  app->add_option("--seed", f.seeds, "Seed (repeatable)");
  app->add_option("--data", f.data, "Corpus file");
  app->add_option("--out", f.out, "Output root (default: $NFLAB_OUT or ./runs)");
}

fs::path out_root(const std::optional<std::string>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("NFLAB_OUT"); env && *env) return env;
  return "runs";
}

// Turns flags into a recipe. Every inconsistency surfaces here or in resolve().
nf::Recipe build_recipe(const RunFlags& f) {
  nf::Recipe r;
  if (f.recipe) r = nf::load_recipe(*f.recipe);
  if (f.config) {
    if (f.norm || f.act) {
      throw nf::UsageError("--config " + *f.config + " already fixes norm and activation; drop --norm/--act");
    }
    r.config = f.config;
  }
  if (f.norm) r.model["norm"] = *f.norm;
  if (f.act) r.model["act"] = *f.act;
  if (f.slope && f.slope_init) throw nf::UsageError("--slope and --slope-init are mutually exclusive");
  if (f.preset) r.preset = *f.preset;
  auto set = [](json& j, const char* key, const auto& v) {
    if (v) j[key] = *v;
  };
  set(r.model, "layers", f.layers);
  set(r.model, "heads", f.heads);
  set(r.model, "dim", f.dim);
  set(r.model, "context", f.ctx);
  set(r.model, "vocab", f.vocab);
  set(r.train, "steps", f.steps);
  set(r.train, "lr", f.lr);
  set(r.train, "warmup", f.warmup);
  set(r.train, "weight_decay", f.wd);
  set(r.train, "clip", f.clip);
  set(r.train, "batch", f.batch);
  set(r.train, "snapshot_every", f.snapshot_every);
  if (!f.seeds.empty()) r.seeds = f.seeds;
  if (f.data) r.data = f.data;

  const std::string act = r.model.value("act", std::string(r.config ? "" : "gelu"));
  if (f.slope) {
    if (act != "leaky-fixed") throw nf::UsageError("--slope needs --act leaky-fixed");
    r.model["slope"] = *f.slope;
  }
  if (f.slope_init) {
    if (act.rfind("leaky-learnable", 0) != 0) throw nf::UsageError("--slope-init needs a learnable leaky --act");
    r.model["slope"] = *f.slope_init;
  }
  if (f.name) {
    r.name = *f.name;
  } else if (r.name.empty()) {
    r.name = r.config ? *r.config
                      : r.model.value("norm", std::string("pre-ln")) + "-" + (act.empty() ? "gelu" : act);
  }
  return r;
}

nf::Corpus load_corpus(const std::optional<std::string>& data) {
  if (!data) throw nf::UsageError("no corpus: pass --data or set \"data\" in the recipe");
  if (!fs::is_regular_file(*data)) throw nf::UsageError("corpus " + *data + " does not exist");
  return nf::Corpus::from_file(*data);
}

std::string opt_str(const std::optional<nf::Scalar>& v, const char* fmt) {
  if (!v) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, *v);
  return buf;
}

void print_summary(const nf::RunOutcome& o) {
  std::optional<nf::Scalar> ppl, overload;
  if (!o.result.metrics.empty()) ppl = o.result.metrics.back().eval_ppl;
  if (!o.result.summaries.empty()) overload = o.result.summaries.back().overload_fraction;
  std::cout << o.dir.string() << ": eval_ppl=" << opt_str(ppl, "%.4f") << " overload=" << opt_str(overload, "%.3f")
            << " status=" << nf::to_string(o.result.status) << " steps=" << o.result.steps_completed << '\n';
}

int exit_for(const std::vector<nf::RunOutcome>& outcomes) {
  for (const auto& o : outcomes)
    if (o.result.status == nf::RunStatus::Diverged) return kExitDiverged;
  return kExitOk;
}

std::vector<double> parse_slopes(const std::string& text) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find(',', start), text.size());
    const std::string item = text.substr(start, end - start);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw nf::UsageError("bad slope value '" + item + "'");
    }
    if (used != item.size() || !std::isfinite(v)) throw nf::UsageError("bad slope value '" + item + "'");
    out.push_back(v);
    start = end + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Keep large activation buffers on the heap free lists instead of mapping
  // and unmapping them every step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"nflab: train and measure transformers with and without LayerNorm"};
  app.set_version_flag("--version", nf::code_version());
  app.require_subcommand(1);

  RunFlags run_flags;
  auto* run = app.add_subcommand("run", "Train one run per seed");
  add_run_flags(run, run_flags);

  std::string rerun_dir;
  std::optional<std::string> rerun_out, rerun_data;
  auto* rerun_cmd = app.add_subcommand("rerun", "Re-execute a run from its manifest");
  rerun_cmd->add_option("run_dir", rerun_dir, "Existing run directory")->required();
  rerun_cmd->add_option("--out", rerun_out, "Directory for the new run (default: <run_dir>-rerun)");
  rerun_cmd->add_option("--data", rerun_data, "Corpus override; must match the recorded fingerprint");

  std::vector<std::string> compare_dirs;
  std::optional<std::string> compare_json;
  auto* compare = app.add_subcommand("compare", "Compare finished runs (first is the reference)");
  compare->add_option("runs", compare_dirs, "Run directories")->required();
  compare->add_option("--json", compare_json, "Also write the report as JSON to this file");

  RunFlags grid_flags;
  std::string grid_slopes;
  auto* grid = app.add_subcommand("grid", "One leaky-fixed run per slope value and seed");
  add_run_flags(grid, grid_flags);
  grid->add_option("--slopes", grid_slopes, "Comma-separated slope values")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (run->parsed()) {
      const nf::Recipe recipe = build_recipe(run_flags);
      std::vector<nf::ResolvedRun> runs;
      for (auto seed : recipe.seeds) runs.push_back(nf::resolve(recipe, seed));
      const nf::Corpus corpus = load_corpus(recipe.data);
      const fs::path root = out_root(run_flags.out);
      std::vector<nf::RunOutcome> outcomes;
      for (const auto& r : runs) {
        outcomes.push_back(nf::execute(r, corpus, root / nf::run_dir_name(r.name, r.train.seed)));
        print_summary(outcomes.back());
      }
      return exit_for(outcomes);
    }
    if (rerun_cmd->parsed()) {
      const fs::path src = rerun_dir;
      const fs::path dst = rerun_out ? fs::path(*rerun_out) : fs::path(src.string() + "-rerun");
      std::optional<fs::path> data;
      if (rerun_data) data = *rerun_data;
      const nf::RunOutcome o = nf::rerun(src, dst, data);
      print_summary(o);
      return exit_for({o});
    }
    if (compare->parsed()) {
      std::vector<fs::path> dirs(compare_dirs.begin(), compare_dirs.end());
      const nf::ComparisonReport report = nf::compare_runs(dirs);
      std::cout << report.table();
      if (compare_json) std::ofstream(*compare_json) << report.to_json().dump(2) << '\n';
      return kExitOk;
    }
    if (grid->parsed()) {
      if (grid_flags.slope || grid_flags.slope_init || grid_flags.act) {
        throw nf::UsageError("grid sets the activation to leaky-fixed and takes slopes from --slopes");
      }
      if (!grid_flags.config && !grid_flags.norm && !grid_flags.recipe) grid_flags.norm = "none";
      nf::Recipe base = build_recipe(grid_flags);
      if (!grid_flags.name && !grid_flags.recipe) base.name = base.config ? *base.config : "leaky";
      const auto slopes = parse_slopes(grid_slopes);
      const nf::Corpus corpus = load_corpus(base.data);
      const nf::GridReport report = nf::run_grid(base, slopes, corpus, out_root(grid_flags.out));
      std::cout << report.table();
      return kExitOk;
    }
  } catch (const nf::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const nf::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const nf::ComparabilityError& e) {
    std::cerr << "comparability error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitOk;
}
