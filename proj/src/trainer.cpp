#include "normfree/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace normfree {

TrainConfig TrainConfig::resolved() const {
  TrainConfig c = *this;
  if (!c.warmup) c.warmup = steps / 20;
  if (!c.min_lr) c.min_lr = 0.1 * lr;
  if (!c.snapshot_every) c.snapshot_every = std::max<Index>(1, steps / 20);
  return c;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
  if (steps < 0) fail("steps must be >= 0");
  if (batch < 1) fail("batch must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be > 0");
  if (warmup && (*warmup < 0 || *warmup > steps)) fail("warmup must lie in [0, steps]");
  if (min_lr && (!(*min_lr > 0.0) || *min_lr > lr)) fail("min_lr must lie in (0, lr]");
  if (weight_decay < 0.0) fail("weight decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam eps must be > 0");
  if (clip < 0.0 || !std::isfinite(clip)) fail("clip must be >= 0 (0 disables)");
  if (snapshot_every && *snapshot_every < 1) fail("snapshot interval must be >= 1");
  if (eval_batches < 1) fail("eval batches must be >= 1");
  if (probe_batches < 1) fail("probe batches must be >= 1");
  if (divergence_window < 1) fail("divergence window must be >= 1");
}

LrSchedule TrainConfig::schedule() const {
  const TrainConfig c = resolved();
  return LrSchedule{c.lr, *c.min_lr, *c.warmup, c.steps};
}

Index count_nonfinite(std::span<const Scalar> values) {
  const ConstArrayMap a(values.data(), static_cast<Index>(values.size()));
  if (a.allFinite()) return 0;
  return static_cast<Index>((!a.isFinite()).count());
}

void NaNScanner::on_probe(Index layer, ProbeSite site, Tensor& value) { scan(layer, site, value); }

void NaNScanner::scan(Index layer, ProbeSite site, const Tensor& value) {
  if (tripped()) return;
  const Index n = count_nonfinite(value.data());
  if (n > 0) events_.push_back(NaNEvent{step_, layer, std::string(to_string(site)), n});
}

std::vector<NaNEvent> scan_gradients(const ParameterSet& params, Index step) {
  std::map<Index, Index> per_layer;
  for (const auto& p : params.entries()) {
    if (!p.value.has_grad()) continue;
    const Index n = count_nonfinite(p.value.grad());
    if (n > 0) per_layer[p.layer] += n;
  }
  std::vector<NaNEvent> out;
  for (const auto& [layer, n] : per_layer) {
    out.push_back(NaNEvent{step, layer, std::string(to_string(ProbeSite::Gradient)), n});
  }
  return out;
}

std::string_view to_string(RunStatus status) {
  return status == RunStatus::Completed ? "completed" : "diverged";
}

std::optional<Index> RunResult::first_nan_step() const {
  if (nan_events.empty()) return std::nullopt;
  Index first = nan_events.front().step;
  for (const auto& e : nan_events) first = std::min(first, e.step);
  return first;
}

std::optional<Index> RunResult::first_collapse_step() const {
  for (const auto& s : summaries) {
    if (s.collapsed || !s.collapsed_layers.empty()) return s.step;
  }
  return std::nullopt;
}

Scalar evaluate(const Model& model, std::span<const Batch> batches) {
  Scalar total = 0.0;
  for (const auto& b : batches) {
    Tape tape(false);
    total += cross_entropy(tape, model.forward(tape, b.inputs, b.batch), b.targets).item();
  }
  return total / static_cast<Scalar>(batches.size());
}

std::vector<Index> snapshot_steps(const TrainConfig& config) {
  const TrainConfig c = config.resolved();
  std::vector<Index> steps{0};
  for (Index s = *c.snapshot_every; s < c.steps; s += *c.snapshot_every) steps.push_back(s);
  if (c.steps > 0) steps.push_back(c.steps);
  return steps;
}

RunResult train(Model& model, const Corpus& corpus, const TrainConfig& config, RunSink* sink, TrainHooks hooks) {
  config.validate();
  const TrainConfig cfg = config.resolved();
  const Index context = model.config().context;
  RunSink null_sink;
  RunSink& out = sink ? *sink : null_sink;

  const std::vector<Batch> evals = eval_batches(corpus, cfg.batch, context, cfg.eval_batches, cfg.eval_seed);
  const std::span<const Batch> probe =
      std::span(evals).first(static_cast<std::size_t>(std::min<Index>(cfg.probe_batches, cfg.eval_batches)));
  BatchSampler sampler(corpus.train(), cfg.batch, context, cfg.seed);
  AdamW optimizer(model.parameters(), AdamWHyper{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});
  const LrSchedule schedule = cfg.schedule();
  const std::vector<Index> snaps = snapshot_steps(cfg);
  const bool learnable = model.config().act.learnable();

  RunResult result;
  Scalar loss_sum = 0.0;
  Index loss_count = 0;
  Index last_recorded = -1;

  auto record = [&](Index step) {
    const Scalar eval_loss = evaluate(model, evals);
    MetricRecord m{step,
                   loss_count > 0 ? loss_sum / static_cast<Scalar>(loss_count)
                                  : std::numeric_limits<Scalar>::quiet_NaN(),
                   eval_loss,
                   std::exp(eval_loss),
                   schedule.at(step),
                   learnable ? model.slope_values() : std::vector<Scalar>{}};
    AttentionSnapshot snap = snapshot(model, probe, step);
    EntropySummary summary = summarize(snap);
    out.on_metric(m);
    out.on_snapshot(snap, summary);
    out.flush();
    result.metrics.push_back(std::move(m));
    result.snapshots.push_back(std::move(snap));
    result.summaries.push_back(std::move(summary));
    loss_sum = 0.0;
    loss_count = 0;
    last_recorded = step;
  };

  if (learnable) out.on_slopes(0, model.slope_values());
  record(0);

  Index bad_losses = 0;
  std::size_t next_snap = 1;
  for (Index step = 1; step <= cfg.steps; ++step) {
    const Batch batch = sampler.next();
    model.parameters().zero_grad();

    NaNScanner scanner(step);
    std::vector<ForwardObserver*> observers;
    if (hooks.observer) observers.push_back(hooks.observer);
    observers.push_back(&scanner);
    ObserverChain chain(std::move(observers));

    Scalar loss_value;
    {
      Tape tape;
      Tensor logits = model.forward(tape, batch.inputs, batch.batch, &chain);
      Tensor loss = cross_entropy(tape, logits, batch.targets);
      scanner.scan(-1, ProbeSite::Loss, loss);
      backward(loss, tape);
      loss_value = loss.item();
    }

    std::vector<NaNEvent> events = scanner.events();
    // Gradients are checked only when the forward pass was clean, so a
    // backward-only overflow is still attributed.
    if (!scanner.tripped()) events = scan_gradients(model.parameters(), step);
    if (cfg.clip > 0.0) clip_grad_norm(model.parameters(), cfg.clip);
    optimizer.step(step, schedule.at(step));

    result.steps_completed = step;
    if (std::isfinite(loss_value)) {
      loss_sum += loss_value;
      ++loss_count;
      bad_losses = 0;
    } else {
      ++bad_losses;
    }
    if (!events.empty()) {
      out.on_nan_events(events);
      result.nan_events.insert(result.nan_events.end(), events.begin(), events.end());
    }
    if (learnable) out.on_slopes(step, model.slope_values());

    if (bad_losses >= cfg.divergence_window) {
      result.status = RunStatus::Diverged;
      if (last_recorded != step) record(step);
      break;
    }
    if (next_snap < snaps.size() && snaps[next_snap] == step) {
      record(step);
      ++next_snap;
    }
  }
  out.flush();
  out.on_finish(model, result);
  return result;
}

}  // namespace normfree
