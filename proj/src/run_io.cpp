#include "normfree/run_io.hpp"

#include "normfree/checkpoint.hpp"
#include "normfree/serialize.hpp"

#include <cmath>
#include <cstdio>

#ifndef NORMFREE_VERSION_STRING
#define NORMFREE_VERSION_STRING "unknown"
#endif

namespace normfree {

namespace fs = std::filesystem;

std::string code_version() { return NORMFREE_VERSION_STRING; }

std::string format_float(Scalar v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string fingerprint_hex(std::uint64_t fingerprint) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fingerprint));
  return buf;
}

RunInfo run_info(std::string name, const ModelConfig& model, const TrainConfig& train, const Corpus& corpus) {
  std::error_code ec;
  const fs::path absolute = fs::absolute(corpus.source(), ec);
  return RunInfo{std::move(name),
                 model,
                 train.resolved(),
                 ec ? corpus.source() : absolute.lexically_normal().string(),
                 corpus.fingerprint(),
                 corpus.bytes().size(),
                 corpus.split_fraction()};
}

namespace {

std::ofstream open_csv(const fs::path& path, const char* header) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << header << '\n';
  return out;
}

nlohmann::json optional_number(const std::optional<Scalar>& v) {
  return v && std::isfinite(*v) ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

RunDirectoryWriter::RunDirectoryWriter(fs::path dir, RunInfo info) : dir_(std::move(dir)), info_(std::move(info)) {
  fs::create_directories(dir_ / "entropy");
  fs::create_directories(dir_ / "checkpoints");
  metrics_ = open_csv(dir_ / "metrics.csv", "step,train_loss,eval_loss,eval_ppl,lr");
  nan_events_ = open_csv(dir_ / "nan_events.csv", "step,layer,site,count");
  slopes_ = open_csv(dir_ / "slopes.csv", "step,layer,slope");
  summary_ = open_csv(dir_ / "summary.csv",
                      "step,max_observed,bin0,bin1,bin2,bin3,overload_fraction,collapsed_layers,"
                      "midband_fraction,bottom_fraction,finite_heads,nonfinite_heads,ln_context");
  layers_ = open_csv(dir_ / "layer_entropy.csv", "step,layer,mean_entropy,excluded_heads,collapsed");
  write_manifest("running", nullptr);
}

void RunDirectoryWriter::on_metric(const MetricRecord& m) {
  metrics_ << m.step << ',' << format_float(m.train_loss) << ',' << format_float(m.eval_loss) << ','
           << format_float(m.eval_ppl) << ',' << format_float(m.lr) << '\n';
}

void RunDirectoryWriter::on_nan_events(std::span<const NaNEvent> events) {
  for (const auto& e : events) nan_events_ << e.step << ',' << e.layer << ',' << e.site << ',' << e.count << '\n';
}

void RunDirectoryWriter::on_slopes(Index step, std::span<const Scalar> slopes) {
  for (std::size_t l = 0; l < slopes.size(); ++l) slopes_ << step << ',' << l << ',' << format_float(slopes[l]) << '\n';
}

void RunDirectoryWriter::on_snapshot(const AttentionSnapshot& s, const EntropySummary& sum) {
  std::ofstream heads = open_csv(dir_ / "entropy" / ("step_" + std::to_string(s.step) + ".csv"),
                                 "layer,head,entropy_nats,finite_flag");
  for (Index l = 0; l < s.layers(); ++l)
    for (Index h = 0; h < s.heads(); ++h)
      heads << l << ',' << h << ',' << format_float(s.entropies(l, h)) << ',' << (s.finite(l, h) ? 1 : 0) << '\n';

  std::string collapsed;
  for (std::size_t i = 0; i < sum.collapsed_layers.size(); ++i) {
    if (i) collapsed += ';';
    collapsed += std::to_string(sum.collapsed_layers[i]);
  }
  auto opt = [](const std::optional<Scalar>& v) { return v ? format_float(*v) : std::string(); };
  summary_ << sum.step << ',' << opt(sum.max_observed) << ',' << sum.bins[0] << ',' << sum.bins[1] << ','
           << sum.bins[2] << ',' << sum.bins[3] << ',' << opt(sum.overload_fraction) << ',' << collapsed << ','
           << opt(sum.midband_fraction) << ',' << opt(sum.bottom_fraction) << ',' << sum.finite_heads << ','
           << sum.nonfinite_heads << ',' << format_float(sum.ln_context) << '\n';

  for (const auto& row : layerwise_series(std::span(&s, 1))) {
    layers_ << row.step << ',' << row.layer << ',' << format_float(row.mean) << ',' << row.excluded_heads << ','
            << (row.collapsed ? 1 : 0) << '\n';
  }
}

void RunDirectoryWriter::flush() {
  for (auto* f : {&metrics_, &nan_events_, &slopes_, &summary_, &layers_}) f->flush();
}

void RunDirectoryWriter::on_finish(const Model& model, const RunResult& result) {
  flush();
  save_checkpoint(dir_ / "checkpoints" / "final.ckpt", model, result.steps_completed);
  write_manifest(std::string(to_string(result.status)), &result);
}

void RunDirectoryWriter::write_manifest(const std::string& status, const RunResult* result) const {
  nlohmann::json j;
  j["format"] = "normfree-run/1";
  j["name"] = info_.name;
  j["code_version"] = code_version();
  j["seed"] = info_.train.seed;
  j["model"] = to_json(info_.model);
  j["train"] = to_json(info_.train);
  j["corpus"] = {{"path", info_.corpus_path},
                 {"bytes", info_.corpus_bytes},
                 {"fingerprint", fingerprint_hex(info_.corpus_fingerprint)},
                 {"split", info_.split}};
  j["tokenizer"] = std::string(kByteTokenizerName);
  j["parameter_count"] = expected_parameter_count(info_.model);
  j["status"] = status;
  if (result) {
    j["steps_completed"] = result->steps_completed;
    nlohmann::json fin = nlohmann::json::object();
    if (!result->metrics.empty()) {
      const auto& m = result->metrics.back();
      fin["step"] = m.step;
      fin["eval_loss"] = optional_number(m.eval_loss);
      fin["eval_ppl"] = optional_number(m.eval_ppl);
    }
    if (!result->summaries.empty()) fin["overload_fraction"] = optional_number(result->summaries.back().overload_fraction);
    const auto first_nan = result->first_nan_step();
    const auto first_collapse = result->first_collapse_step();
    fin["first_nan_step"] = first_nan ? nlohmann::json(*first_nan) : nlohmann::json(nullptr);
    fin["first_collapse_step"] = first_collapse ? nlohmann::json(*first_collapse) : nlohmann::json(nullptr);
    j["final"] = fin;
  }
  std::ofstream out(dir_ / "manifest.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest in " + dir_.string());
  out << j.dump(2) << '\n';
}

nlohmann::json read_manifest(const fs::path& run_dir) {
  std::ifstream in(run_dir / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + run_dir.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed manifest in " + run_dir.string() + ": " + e.what());
  }
}

}  // namespace normfree
