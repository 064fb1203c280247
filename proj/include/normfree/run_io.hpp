#pragma once

#include "normfree/data.hpp"
#include "normfree/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>

namespace normfree {

/// "<semver>+<git rev>" of the build, recorded in every manifest.
std::string code_version();

/// Formats with 9 significant digits; non-finite values print as nan, inf, -inf.
std::string format_float(Scalar v);

/// Everything needed to re-create a run.
struct RunInfo {
  std::string name;
  ModelConfig model;
  TrainConfig train;
  std::string corpus_path;
  std::uint64_t corpus_fingerprint = 0;
  std::size_t corpus_bytes = 0;
  double split = 0.9;
};

RunInfo run_info(std::string name, const ModelConfig& model, const TrainConfig& train, const Corpus& corpus);

std::string fingerprint_hex(std::uint64_t fingerprint);

/// Writes a run directory:
///   manifest.json, metrics.csv, nan_events.csv, slopes.csv, summary.csv,
///   layer_entropy.csv, entropy/step_<N>.csv, checkpoints/final.ckpt
class RunDirectoryWriter final : public RunSink {
 public:
  RunDirectoryWriter(std::filesystem::path dir, RunInfo info);

  const std::filesystem::path& dir() const { return dir_; }

  void on_metric(const MetricRecord& m) override;
  void on_nan_events(std::span<const NaNEvent> events) override;
  void on_slopes(Index step, std::span<const Scalar> slopes) override;
  void on_snapshot(const AttentionSnapshot& snapshot, const EntropySummary& summary) override;
  void flush() override;
  void on_finish(const Model& model, const RunResult& result) override;

 private:
  void write_manifest(const std::string& status, const RunResult* result) const;

  std::filesystem::path dir_;
  RunInfo info_;
  std::ofstream metrics_, nan_events_, slopes_, summary_, layers_;
};

nlohmann::json read_manifest(const std::filesystem::path& run_dir);

}  // namespace normfree
