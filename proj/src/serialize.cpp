#include "normfree/serialize.hpp"

#include <set>

namespace normfree {

using nlohmann::json;

namespace {

std::string_view to_string(GeluApprox a) { return a == GeluApprox::Erf ? "erf" : "tanh"; }

template <typename T>
T read(const json& j, std::string_view key) {
  try {
    return j.at(std::string(key)).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for '" + std::string(key) + "': " + e.what());
  }
}

void reject_unknown(const json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError(std::string("unknown ") + what + " key '" + key + "'");
  }
}

}  // namespace

json to_json(const ModelConfig& c) {
  return json{{"layers", c.layers},
              {"heads", c.heads},
              {"dim", c.dim},
              {"context", c.context},
              {"vocab", c.vocab},
              {"norm", to_string(c.norm)},
              {"act", to_string(c.act.type)},
              {"slope", c.act.slope},
              {"ffn_mult", c.ffn_mult},
              {"bias", c.bias},
              {"gelu_approx", to_string(c.gelu_approx)},
              {"ln_eps", c.ln_eps},
              {"init_std", c.init_std},
              {"seed", c.seed}};
}

void apply_json(ModelConfig& c, const json& j) {
  reject_unknown(j,
                 {"layers", "heads", "dim", "context", "vocab", "norm", "act", "slope", "ffn_mult", "bias",
                  "gelu_approx", "ln_eps", "init_std", "seed"},
                 "model");
  if (j.contains("layers")) c.layers = read<Index>(j, "layers");
  if (j.contains("heads")) c.heads = read<Index>(j, "heads");
  if (j.contains("dim")) c.dim = read<Index>(j, "dim");
  if (j.contains("context")) c.context = read<Index>(j, "context");
  if (j.contains("vocab")) c.vocab = read<Index>(j, "vocab");
  if (j.contains("norm")) {
    const auto name = read<std::string>(j, "norm");
    const auto mode = parse_norm_mode(name);
    if (!mode) throw ConfigError("unknown norm mode '" + name + "'");
    c.norm = *mode;
  }
  if (j.contains("act")) {
    const auto name = read<std::string>(j, "act");
    const auto type = parse_activation_type(name);
    if (!type) throw ConfigError("unknown activation '" + name + "'");
    c.act.type = *type;
  }
  if (j.contains("slope")) c.act.slope = read<Scalar>(j, "slope");
  if (j.contains("ffn_mult")) c.ffn_mult = read<Index>(j, "ffn_mult");
  if (j.contains("bias")) c.bias = read<bool>(j, "bias");
  if (j.contains("gelu_approx")) {
    const auto name = read<std::string>(j, "gelu_approx");
    if (name == "tanh") {
      c.gelu_approx = GeluApprox::Tanh;
    } else if (name == "erf") {
      c.gelu_approx = GeluApprox::Erf;
    } else {
      throw ConfigError("unknown gelu approximation '" + name + "'");
    }
  }
  if (j.contains("ln_eps")) c.ln_eps = read<Scalar>(j, "ln_eps");
  if (j.contains("init_std")) c.init_std = read<Scalar>(j, "init_std");
  if (j.contains("seed")) c.seed = read<std::uint64_t>(j, "seed");
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  apply_json(c, j);
  return c;
}

json to_json(const TrainConfig& c) {
  json j{{"steps", c.steps},
         {"batch", c.batch},
         {"lr", c.lr},
         {"weight_decay", c.weight_decay},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_eps", c.adam_eps},
         {"clip", c.clip},
         {"eval_batches", c.eval_batches},
         {"probe_batches", c.probe_batches},
         {"divergence_window", c.divergence_window},
         {"seed", c.seed},
         {"eval_seed", c.eval_seed}};
  j["warmup"] = c.warmup ? json(*c.warmup) : json(nullptr);
  j["min_lr"] = c.min_lr ? json(*c.min_lr) : json(nullptr);
  j["snapshot_every"] = c.snapshot_every ? json(*c.snapshot_every) : json(nullptr);
  return j;
}

void apply_json(TrainConfig& c, const json& j) {
  reject_unknown(j,
                 {"steps", "batch", "lr", "warmup", "min_lr", "weight_decay", "beta1", "beta2", "adam_eps", "clip",
                  "snapshot_every", "eval_batches", "probe_batches", "divergence_window", "seed", "eval_seed"},
                 "train");
  auto opt_index = [&](const char* key, std::optional<Index>& field) {
    if (!j.contains(key)) return;
    field = j.at(key).is_null() ? std::nullopt : std::optional<Index>(read<Index>(j, key));
  };
  if (j.contains("steps")) c.steps = read<Index>(j, "steps");
  if (j.contains("batch")) c.batch = read<Index>(j, "batch");
  if (j.contains("lr")) c.lr = read<Scalar>(j, "lr");
  opt_index("warmup", c.warmup);
  if (j.contains("min_lr")) {
    c.min_lr = j.at("min_lr").is_null() ? std::nullopt : std::optional<Scalar>(read<Scalar>(j, "min_lr"));
  }
  if (j.contains("weight_decay")) c.weight_decay = read<Scalar>(j, "weight_decay");
  if (j.contains("beta1")) c.beta1 = read<Scalar>(j, "beta1");
  if (j.contains("beta2")) c.beta2 = read<Scalar>(j, "beta2");
  if (j.contains("adam_eps")) c.adam_eps = read<Scalar>(j, "adam_eps");
  if (j.contains("clip")) c.clip = read<Scalar>(j, "clip");
  opt_index("snapshot_every", c.snapshot_every);
  if (j.contains("eval_batches")) c.eval_batches = read<Index>(j, "eval_batches");
  if (j.contains("probe_batches")) c.probe_batches = read<Index>(j, "probe_batches");
  if (j.contains("divergence_window")) c.divergence_window = read<Index>(j, "divergence_window");
  if (j.contains("seed")) c.seed = read<std::uint64_t>(j, "seed");
  if (j.contains("eval_seed")) c.eval_seed = read<std::uint64_t>(j, "eval_seed");
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  apply_json(c, j);
  return c;
}

}  // namespace normfree
