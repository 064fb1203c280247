#pragma once

#include "normfree/run_io.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace normfree {

/// Architecture presets: tiny (4,4,128,64), small (6,8,256,128), paper-gpt2 (12,12,768,128).
std::optional<ModelConfig> preset(std::string_view name);
std::vector<std::string> preset_names();

/// Named configurations: sm-ln-g, sm-ln-r, sm-g, sm-r.
struct NamedConfig {
  NormMode norm;
  ActivationType act;
};
std::optional<NamedConfig> named_config(std::string_view name);
std::vector<std::string> named_config_names();

/// A re-runnable experiment description. model/train hold overrides in the
/// manifest's JSON vocabulary; a named config fixes norm and act.
struct Recipe {
  std::string name;
  std::string preset = "tiny";
  std::optional<std::string> config;
  nlohmann::json model = nlohmann::json::object();
  nlohmann::json train = nlohmann::json::object();
  std::vector<std::uint64_t> seeds{0};
  std::optional<std::string> data;
  std::vector<std::string> expected_artifacts = default_artifacts();

  static std::vector<std::string> default_artifacts();
  bool operator==(const Recipe&) const = default;
};

nlohmann::json to_json(const Recipe& recipe);
/// Throws UsageError on unknown keys or malformed values.
Recipe recipe_from_json(const nlohmann::json& j);
Recipe load_recipe(const std::filesystem::path& path);

struct ResolvedRun {
  std::string name;
  ModelConfig model;
  TrainConfig train;
};

/// Applies preset, config name and overrides for one seed. Every
/// inconsistency throws UsageError before any compute.
ResolvedRun resolve(const Recipe& recipe, std::uint64_t seed);

/// <name>-seed<seed>
std::string run_dir_name(const std::string& name, std::uint64_t seed);

struct RunOutcome {
  std::filesystem::path dir;
  RunResult result;
};

RunOutcome execute(const ResolvedRun& run, const Corpus& corpus, const std::filesystem::path& dir,
                   TrainHooks hooks = {});

/// Runs every seed of a recipe under out_root.
std::vector<RunOutcome> run_recipe(const Recipe& recipe, const Corpus& corpus, const std::filesystem::path& out_root);

/// Re-executes the run described by run_dir/manifest.json into out_dir. The
/// corpus is re-read from the manifest path (or corpus_override) and must
/// match the recorded fingerprint.
RunOutcome rerun(const std::filesystem::path& run_dir, const std::filesystem::path& out_dir,
                 const std::optional<std::filesystem::path>& corpus_override = std::nullopt);

/// 100 * (ppl - reference) / reference.
Scalar delta_percent(Scalar ppl, Scalar reference);

struct CompareRow {
  std::string dir;
  std::string name;
  std::string status;
  std::optional<Scalar> eval_loss;
  std::optional<Scalar> eval_ppl;
  std::optional<Scalar> delta_pct;
  std::optional<Scalar> overload_fraction;
};

struct ComparisonReport {
  std::vector<CompareRow> rows;
  nlohmann::json to_json() const;
  std::string table() const;
};

/// Needs >= 2 finished runs sharing corpus fingerprint, tokenizer and context;
/// otherwise throws ComparabilityError naming the offending fields.
ComparisonReport compare_runs(const std::vector<std::filesystem::path>& run_dirs);

struct GridRun {
  std::uint64_t seed = 0;
  std::string dir;
  std::string status;
  std::optional<Index> first_nan_step;
  std::optional<Index> first_collapse_step;
  std::optional<Scalar> final_eval_ppl;
};

struct GridRow {
  Scalar slope = 0.0;
  std::vector<GridRun> runs;
  /// Earliest over seeds; empty when no run produced the event.
  std::optional<Index> first_nan_step;
  std::optional<Index> first_collapse_step;
};

struct GridReport {
  std::string name;
  std::vector<GridRow> rows;
  nlohmann::json to_json() const;
  std::string table() const;
};

/// One leaky-fixed run per (slope, seed). Divergence is recorded, not fatal.
/// Writes instability_report.json and .csv under out_root/<name>-grid.
GridReport run_grid(const Recipe& base, const std::vector<Scalar>& slopes, const Corpus& corpus,
                    const std::filesystem::path& out_root);

}  // namespace normfree
