#pragma once

#include "normfree/data.hpp"
#include "normfree/entropy.hpp"
#include "normfree/model.hpp"
#include "normfree/optim.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace normfree {

/// Optimization and measurement settings for one run. Optional fields are
/// derived from `steps` and `lr` by resolved().
struct TrainConfig {
  Index steps = 3000;
  Index batch = 16;
  Scalar lr = 3e-4;
  std::optional<Index> warmup;     // default: 5% of steps
  std::optional<Scalar> min_lr;    // default: 10% of lr
  Scalar weight_decay = 0.1;
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.999;
  Scalar adam_eps = 1e-8;
  Scalar clip = 1.0;               // 0 disables clipping
  std::optional<Index> snapshot_every;  // default: 5% of steps
  Index eval_batches = 32;
  Index probe_batches = 4;
  Index divergence_window = 50;
  std::uint64_t seed = 0;
  /// Seed of the held-out eval and probe batches; shared across runs so
  /// their eval numbers are measured on identical windows.
  std::uint64_t eval_seed = 0x5eedULL;

  /// Copy with every optional field filled in.
  TrainConfig resolved() const;
  /// Throws ConfigError.
  void validate() const;
  LrSchedule schedule() const;

  bool operator==(const TrainConfig&) const = default;
};

/// Non-finite values seen at one probe site.
struct NaNEvent {
  Index step = 0;
  /// Block index, or -1 for sites outside the blocks (loss, embeddings).
  Index layer = -1;
  std::string site;
  Index count = 0;

  bool operator==(const NaNEvent&) const = default;
};

struct MetricRecord {
  Index step = 0;
  /// Mean training loss over the steps since the previous record; NaN at step 0.
  Scalar train_loss = 0.0;
  Scalar eval_loss = 0.0;
  Scalar eval_ppl = 0.0;
  Scalar lr = 0.0;
  std::vector<Scalar> slopes;
};

/// Forward observer that attributes non-finite values to their origin: the
/// first probe site of a pass holding a NaN or +-Inf is recorded, and the
/// sites it propagates into afterwards are not.
class NaNScanner final : public ForwardObserver {
 public:
  explicit NaNScanner(Index step = 0) : step_(step) {}
  void on_probe(Index layer, ProbeSite site, Tensor& value) override;
  /// Checks a non-layer tensor such as the loss.
  void scan(Index layer, ProbeSite site, const Tensor& value);
  bool tripped() const { return !events_.empty(); }

  const std::vector<NaNEvent>& events() const { return events_; }

 private:
  Index step_;
  std::vector<NaNEvent> events_;
};

/// Count of NaN and +-Inf entries.
Index count_nonfinite(std::span<const Scalar> values);

/// One event per layer whose parameter gradients hold a non-finite value.
std::vector<NaNEvent> scan_gradients(const ParameterSet& params, Index step);

enum class RunStatus { Completed, Diverged };
std::string_view to_string(RunStatus status);

struct RunResult {
  RunStatus status = RunStatus::Completed;
  Index steps_completed = 0;
  std::vector<MetricRecord> metrics;
  std::vector<NaNEvent> nan_events;
  std::vector<AttentionSnapshot> snapshots;
  std::vector<EntropySummary> summaries;

  std::optional<Index> first_nan_step() const;
  std::optional<Index> first_collapse_step() const;
};

/// Receives artifacts as they are produced. All hooks are optional.
class RunSink {
 public:
  virtual ~RunSink() = default;
  virtual void on_metric(const MetricRecord&) {}
  virtual void on_nan_events(std::span<const NaNEvent>) {}
  virtual void on_slopes(Index /*step*/, std::span<const Scalar> /*slopes*/) {}
  virtual void on_snapshot(const AttentionSnapshot&, const EntropySummary&) {}
  /// Called once per snapshot interval after the other hooks.
  virtual void flush() {}
  virtual void on_finish(const Model&, const RunResult&) {}
};

/// Extra hooks for tests: an observer that sees (and may modify) every
/// training forward pass.
struct TrainHooks {
  ForwardObserver* observer = nullptr;
};

/// Mean cross-entropy over a set of batches, without recording.
Scalar evaluate(const Model& model, std::span<const Batch> batches);

/// Steps on which an entropy snapshot and eval are taken: 0, every interval, and the last.
std::vector<Index> snapshot_steps(const TrainConfig& config);

/// Runs the training loop. Stops early with status Diverged after
/// `divergence_window` consecutive non-finite losses.
RunResult train(Model& model, const Corpus& corpus, const TrainConfig& config, RunSink* sink = nullptr,
                TrainHooks hooks = {});

}  // namespace normfree
