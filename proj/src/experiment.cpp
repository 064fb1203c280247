#include "normfree/experiment.hpp"

#include "normfree/serialize.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace normfree {

namespace fs = std::filesystem;
using nlohmann::json;

std::optional<ModelConfig> preset(std::string_view name) {
  auto make = [](Index layers, Index heads, Index dim, Index context) {
    ModelConfig c;
    c.layers = layers;
    c.heads = heads;
    c.dim = dim;
    c.context = context;
    return c;
  };
  if (name == "tiny") return make(4, 4, 128, 64);
  if (name == "small") return make(6, 8, 256, 128);
  if (name == "paper-gpt2") return make(12, 12, 768, 128);
  return std::nullopt;
}

std::vector<std::string> preset_names() { return {"tiny", "small", "paper-gpt2"}; }

std::optional<NamedConfig> named_config(std::string_view name) {
  if (name == "sm-ln-g") return NamedConfig{NormMode::PreLN, ActivationType::Gelu};
  if (name == "sm-ln-r") return NamedConfig{NormMode::PreLN, ActivationType::Relu};
  if (name == "sm-g") return NamedConfig{NormMode::NormFree, ActivationType::Gelu};
  if (name == "sm-r") return NamedConfig{NormMode::NormFree, ActivationType::Relu};
  return std::nullopt;
}

std::vector<std::string> named_config_names() { return {"sm-ln-g", "sm-ln-r", "sm-g", "sm-r"}; }

std::vector<std::string> Recipe::default_artifacts() {
  return {"manifest.json",     "metrics.csv",       "nan_events.csv", "slopes.csv",
          "summary.csv",       "layer_entropy.csv", "entropy/step_0.csv", "checkpoints/final.ckpt"};
}

json to_json(const Recipe& r) {
  json j{{"name", r.name},
         {"preset", r.preset},
         {"model", r.model},
         {"train", r.train},
         {"seeds", r.seeds},
         {"expected_artifacts", r.expected_artifacts}};
  j["config"] = r.config ? json(*r.config) : json(nullptr);
  j["data"] = r.data ? json(*r.data) : json(nullptr);
  return j;
}

Recipe recipe_from_json(const json& j) {
  if (!j.is_object()) throw UsageError("recipe must be a JSON object");
  static const std::set<std::string> known{"name",  "preset", "config", "model",
                                           "train", "seeds",  "data",   "expected_artifacts"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw UsageError("unknown recipe key '" + key + "'");
  }
  Recipe r;
  try {
    r.name = j.at("name").get<std::string>();
    if (j.contains("preset")) r.preset = j.at("preset").get<std::string>();
    if (j.contains("config") && !j.at("config").is_null()) r.config = j.at("config").get<std::string>();
    if (j.contains("model")) r.model = j.at("model");
    if (j.contains("train")) r.train = j.at("train");
    if (j.contains("seeds")) r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("data") && !j.at("data").is_null()) r.data = j.at("data").get<std::string>();
    if (j.contains("expected_artifacts")) {
      r.expected_artifacts = j.at("expected_artifacts").get<std::vector<std::string>>();
    }
  } catch (const json::exception& e) {
    throw UsageError(std::string("malformed recipe: ") + e.what());
  }
  if (r.name.empty()) throw UsageError("recipe name must not be empty");
  if (r.seeds.empty()) throw UsageError("recipe '" + r.name + "' lists no seeds");
  if (!r.model.is_object() || !r.train.is_object()) throw UsageError("recipe model/train must be objects");
  return r;
}

Recipe load_recipe(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open recipe " + path.string());
  try {
    return recipe_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw UsageError("recipe " + path.string() + " is not valid JSON: " + e.what());
  }
}

ResolvedRun resolve(const Recipe& recipe, std::uint64_t seed) {
  auto base = preset(recipe.preset);
  if (!base) throw UsageError("unknown preset '" + recipe.preset + "'");
  ModelConfig model = *base;
  if (recipe.config) {
    const auto named = named_config(*recipe.config);
    if (!named) throw UsageError("unknown config '" + *recipe.config + "'");
    for (const char* key : {"norm", "act"}) {
      if (recipe.model.contains(key)) {
        throw UsageError("config '" + *recipe.config + "' already fixes " + key + "; drop the explicit " + key);
      }
    }
    model.norm = named->norm;
    model.act = ActivationKind{named->act, 0.0};
  }
  if (recipe.model.contains("seed") || recipe.train.contains("seed")) {
    throw UsageError("seeds come from the recipe seed list, not from model/train overrides");
  }
  TrainConfig train;
  try {
    apply_json(model, recipe.model);
    apply_json(train, recipe.train);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (recipe.model.contains("slope")) {
    const auto t = model.act.type;
    if (t == ActivationType::Gelu || t == ActivationType::Relu) {
      throw UsageError("a slope only applies to leaky activations, not " + std::string(to_string(t)));
    }
  }
  if (!std::isfinite(model.act.slope)) throw UsageError("slope must be finite");
  model.seed = seed;
  train.seed = seed;
  try {
    model.validate();
    train.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  return ResolvedRun{recipe.name, model, train.resolved()};
}

std::string run_dir_name(const std::string& name, std::uint64_t seed) {
  return name + "-seed" + std::to_string(seed);
}

RunOutcome execute(const ResolvedRun& run, const Corpus& corpus, const fs::path& dir, TrainHooks hooks) {
  RunDirectoryWriter writer(dir, run_info(run.name, run.model, run.train, corpus));
  Model model(run.model);
  RunResult result = train(model, corpus, run.train, &writer, hooks);
  return RunOutcome{dir, std::move(result)};
}

std::vector<RunOutcome> run_recipe(const Recipe& recipe, const Corpus& corpus, const fs::path& out_root) {
  std::vector<ResolvedRun> runs;
  for (auto seed : recipe.seeds) runs.push_back(resolve(recipe, seed));
  std::vector<RunOutcome> out;
  for (const auto& run : runs) out.push_back(execute(run, corpus, out_root / run_dir_name(run.name, run.train.seed)));
  return out;
}

RunOutcome rerun(const fs::path& run_dir, const fs::path& out_dir, const std::optional<fs::path>& corpus_override) {
  const json m = read_manifest(run_dir);
  ResolvedRun run{m.at("name").get<std::string>(), model_config_from_json(m.at("model")),
                  train_config_from_json(m.at("train"))};
  const auto& c = m.at("corpus");
  const fs::path path = corpus_override ? *corpus_override : fs::path(c.at("path").get<std::string>());
  Corpus corpus = Corpus::from_file(path, c.at("split").get<double>());
  const auto recorded = c.at("fingerprint").get<std::string>();
  if (fingerprint_hex(corpus.fingerprint()) != recorded) {
    throw ComparabilityError("corpus " + path.string() + " has fingerprint " + fingerprint_hex(corpus.fingerprint()) +
                             ", manifest records " + recorded);
  }
  return execute(run, corpus, out_dir);
}

Scalar delta_percent(Scalar ppl, Scalar reference) { return 100.0 * (ppl - reference) / reference; }

namespace {

std::optional<Scalar> opt_number(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<Scalar>();
}

std::string fixed(const std::optional<Scalar>& v, int digits, bool sign = false) {
  if (!v) return "-";
  std::ostringstream out;
  if (sign) out << std::showpos;
  out << std::fixed << std::setprecision(digits) << *v;
  return out.str();
}

std::string render_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& r : rows) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c) out << "  ";
      if (c == 0) {
        out << std::left << std::setw(static_cast<int>(width[c])) << cells[c];
      } else {
        out << std::right << std::setw(static_cast<int>(width[c])) << cells[c];
      }
    }
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out.str();
}

json opt_json(const std::optional<Scalar>& v) { return v ? json(*v) : json(nullptr); }
json opt_json(const std::optional<Index>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

ComparisonReport compare_runs(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.size() < 2) throw UsageError("compare needs at least two run directories");
  std::vector<json> manifests;
  for (const auto& d : run_dirs) manifests.push_back(read_manifest(d));

  const json& ref = manifests.front();
  std::vector<std::string> problems;
  for (std::size_t i = 1; i < manifests.size(); ++i) {
    const json& m = manifests[i];
    auto check = [&](const std::string& field, const json& a, const json& b) {
      if (a != b) {
        problems.push_back(field + " (" + a.dump() + " in " + run_dirs[0].string() + " vs " + b.dump() + " in " +
                           run_dirs[i].string() + ")");
      }
    };
    check("corpus fingerprint", ref.at("corpus").at("fingerprint"), m.at("corpus").at("fingerprint"));
    check("tokenizer", ref.at("tokenizer"), m.at("tokenizer"));
    check("context", ref.at("model").at("context"), m.at("model").at("context"));
  }
  if (!problems.empty()) {
    std::string msg = "runs are not comparable:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ComparabilityError(msg);
  }

  ComparisonReport report;
  std::optional<Scalar> ref_ppl;
  for (std::size_t i = 0; i < manifests.size(); ++i) {
    const json& m = manifests[i];
    if (!m.contains("final")) throw ComparabilityError("run " + run_dirs[i].string() + " has not finished");
    const json& fin = m.at("final");
    CompareRow row{run_dirs[i].string(),
                   m.at("name").get<std::string>(),
                   m.at("status").get<std::string>(),
                   opt_number(fin, "eval_loss"),
                   opt_number(fin, "eval_ppl"),
                   std::nullopt,
                   opt_number(fin, "overload_fraction")};
    if (i == 0) ref_ppl = row.eval_ppl;
    if (ref_ppl && row.eval_ppl) row.delta_pct = delta_percent(*row.eval_ppl, *ref_ppl);
    report.rows.push_back(std::move(row));
  }
  return report;
}

json ComparisonReport::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) {
    rows_j.push_back({{"dir", r.dir},
                      {"name", r.name},
                      {"status", r.status},
                      {"eval_loss", opt_json(r.eval_loss)},
                      {"eval_ppl", opt_json(r.eval_ppl)},
                      {"delta_pct", opt_json(r.delta_pct)},
                      {"overload_fraction", opt_json(r.overload_fraction)}});
  }
  return json{{"reference", rows.empty() ? json(nullptr) : json(rows.front().dir)}, {"runs", rows_j}};
}

std::string ComparisonReport::table() const {
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    cells.push_back({r.dir, r.status, fixed(r.eval_loss, 4), fixed(r.eval_ppl, 3), fixed(r.delta_pct, 2, true),
                     fixed(r.overload_fraction, 3)});
  }
  return render_table({"run", "status", "eval_loss", "eval_ppl", "delta_%", "overload"}, cells);
}

namespace {

std::string slope_label(Scalar s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", s);
  return buf;
}

}  // namespace

GridReport run_grid(const Recipe& base, const std::vector<Scalar>& slopes, const Corpus& corpus,
                    const fs::path& out_root) {
  if (slopes.empty()) throw UsageError("grid needs at least one slope value");
  std::vector<std::pair<Scalar, std::vector<ResolvedRun>>> plan;
  for (Scalar s : slopes) {
    if (!std::isfinite(s)) throw UsageError("grid slope values must be finite");
    Recipe r = base;
    if (r.config) {
      const auto named = named_config(*r.config);
      if (!named) throw UsageError("unknown config '" + *r.config + "'");
      r.model["norm"] = std::string(to_string(named->norm));
      r.config.reset();
    }
    r.model["act"] = std::string(to_string(ActivationType::LeakyFixed));
    r.model["slope"] = s;
    r.name = base.name + "-slope" + slope_label(s);
    std::vector<ResolvedRun> runs;
    for (auto seed : r.seeds) runs.push_back(resolve(r, seed));
    plan.emplace_back(s, std::move(runs));
  }

  const fs::path grid_dir = out_root / (base.name + "-grid");
  GridReport report{base.name, {}};
  for (const auto& [slope, runs] : plan) {
    GridRow row{slope, {}, std::nullopt, std::nullopt};
    for (const auto& run : runs) {
      const fs::path dir = grid_dir / run_dir_name(run.name, run.train.seed);
      RunOutcome o = execute(run, corpus, dir);
      GridRun g{run.train.seed,
                dir.string(),
                std::string(to_string(o.result.status)),
                o.result.first_nan_step(),
                o.result.first_collapse_step(),
                std::nullopt};
      if (!o.result.metrics.empty() && std::isfinite(o.result.metrics.back().eval_ppl)) {
        g.final_eval_ppl = o.result.metrics.back().eval_ppl;
      }
      auto earliest = [](std::optional<Index>& acc, const std::optional<Index>& v) {
        if (v && (!acc || *v < *acc)) acc = v;
      };
      earliest(row.first_nan_step, g.first_nan_step);
      earliest(row.first_collapse_step, g.first_collapse_step);
      row.runs.push_back(std::move(g));
    }
    report.rows.push_back(std::move(row));
  }

  fs::create_directories(grid_dir);
  std::ofstream(grid_dir / "instability_report.json") << report.to_json().dump(2) << '\n';
  std::ofstream csv(grid_dir / "instability_report.csv");
  csv << "slope,seed,status,first_nan_step,first_collapse_step,final_eval_ppl,dir\n";
  for (const auto& row : report.rows) {
    for (const auto& g : row.runs) {
      csv << format_float(row.slope) << ',' << g.seed << ',' << g.status << ','
          << (g.first_nan_step ? std::to_string(*g.first_nan_step) : "") << ','
          << (g.first_collapse_step ? std::to_string(*g.first_collapse_step) : "") << ','
          << (g.final_eval_ppl ? format_float(*g.final_eval_ppl) : "") << ',' << g.dir << '\n';
    }
  }
  return report;
}

json GridReport::to_json() const {
  json rows_j = json::array();
  for (const auto& row : rows) {
    json runs_j = json::array();
    for (const auto& g : row.runs) {
      runs_j.push_back({{"seed", g.seed},
                        {"dir", g.dir},
                        {"status", g.status},
                        {"first_nan_step", opt_json(g.first_nan_step)},
                        {"first_collapse_step", opt_json(g.first_collapse_step)},
                        {"final_eval_ppl", opt_json(g.final_eval_ppl)}});
    }
    rows_j.push_back({{"slope", row.slope},
                      {"first_nan_step", opt_json(row.first_nan_step)},
                      {"first_collapse_step", opt_json(row.first_collapse_step)},
                      {"runs", runs_j}});
  }
  return json{{"name", name}, {"rows", rows_j}};
}

std::string GridReport::table() const {
  std::vector<std::vector<std::string>> cells;
  for (const auto& row : rows) {
    std::string statuses;
    for (const auto& g : row.runs) statuses += (statuses.empty() ? "" : ",") + g.status;
    cells.push_back({slope_label(row.slope), statuses,
                     row.first_nan_step ? std::to_string(*row.first_nan_step) : "none",
                     row.first_collapse_step ? std::to_string(*row.first_collapse_step) : "none"});
  }
  return render_table({"slope", "status", "first_nan_step", "first_collapse_step"}, cells);
}

}  // namespace normfree
