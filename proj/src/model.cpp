#include "normfree/model.hpp"

#include <cmath>
#include <random>

namespace normfree {

void ModelConfig::validate() const {
  if (layers < 0) throw ConfigError("layers must be >= 0");
  if (heads < 1) throw ConfigError("heads must be >= 1");
  if (dim < 1) throw ConfigError("dim must be >= 1");
  if (dim % heads != 0) {
    throw ConfigError("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
  }
  if (context < 1) throw ConfigError("context length must be >= 1");
  if (vocab < 2) throw ConfigError("vocabulary size must be >= 2");
  if (ffn_mult < 1) throw ConfigError("ffn multiplier must be >= 1");
  if (norm == NormMode::PreLN && dim < 2) throw ConfigError("layernorm needs dim >= 2");
  if (!std::isfinite(act.slope)) throw ConfigError("activation slope must be finite");
  if (!(ln_eps > 0)) throw ConfigError("layernorm eps must be positive");
  if (!(init_std > 0)) throw ConfigError("init std must be positive");
}

Index expected_parameter_count(const ModelConfig& c) {
  const Index d = c.dim, m = c.ffn_mult;
  Index per_layer = 4 * d * d + 2 * m * d * d;
  if (c.bias) per_layer += 4 * d + m * d + d;
  if (c.norm == NormMode::PreLN) per_layer += 4 * d;
  if (c.act.type == ActivationType::LeakyLearnableLayerwise) per_layer += 1;

  Index total = c.vocab * d + c.context * d + c.layers * per_layer;
  if (c.norm == NormMode::PreLN) total += 2 * d;
  if (c.act.type == ActivationType::LeakyLearnableGlobal) total += 1;
  return total;
}

Tensor& ParameterSet::add(std::string name, Tensor value, Index layer) {
  if (index_.contains(name)) throw ContractError("duplicate parameter " + name);
  value.set_requires_grad(true);
  index_.emplace(name, entries_.size());
  entries_.push_back(NamedParameter{std::move(name), std::move(value), layer});
  return entries_.back().value;
}

const Tensor& ParameterSet::get(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return entries_[it->second].value;
}

Tensor& ParameterSet::get(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return entries_[it->second].value;
}

bool ParameterSet::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

Index ParameterSet::count() const {
  Index n = 0;
  for (const auto& p : entries_) n += p.value.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : entries_)
    if (p.value.has_grad()) p.value.zero_grad();
}

std::string_view to_string(ProbeSite site) {
  switch (site) {
    case ProbeSite::AttentionScores: return "attention-scores";
    case ProbeSite::AttentionOutput: return "attention-output";
    case ProbeSite::FfnPreact: return "ffn-preact";
    case ProbeSite::BlockOutput: return "block-output";
    case ProbeSite::Loss: return "loss";
    case ProbeSite::Gradient: return "grad";
  }
  return "?";
}

void ObserverChain::on_probe(Index layer, ProbeSite site, Tensor& value) {
  for (auto* o : observers_) o->on_probe(layer, site, value);
}

void ObserverChain::on_attention(Index layer, const Tensor& probs, Index batch, Index heads) {
  for (auto* o : observers_) o->on_attention(layer, probs, batch, heads);
}

void ObserverChain::on_layernorm(Index layer) {
  for (auto* o : observers_) o->on_layernorm(layer);
}

std::string layer_prefix(Index layer) { return "h" + std::to_string(layer) + "."; }

Tensor attention_head(Tape& tape, const Tensor& x, const HeadParams& head, const CausalMask& mask, Tensor* attn) {
  auto project = [&](const Tensor& w, const Tensor& b) {
    Tensor y = matmul(tape, x, w);
    return b.defined() ? add_row(tape, y, b) : y;
  };
  Tensor q = project(head.wq, head.bq);
  Tensor k = project(head.wk, head.bk);
  Tensor v = project(head.wv, head.bv);
  const Scalar inv_sqrt_dk = 1.0 / std::sqrt(static_cast<Scalar>(head.wq.dim(1)));
  Tensor scores = scale(tape, matmul(tape, q, transpose_last_two(tape, k)), inv_sqrt_dk);
  Tensor probs = causal_softmax(tape, scores, mask);
  if (attn) *attn = probs;
  return matmul(tape, probs, v);
}

namespace {

Tensor normal_tensor(Shape shape, Scalar stddev, std::mt19937_64& rng) {
  std::normal_distribution<Scalar> dist(0.0, stddev);
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

ModelConfig validated(ModelConfig config) {
  config.validate();
  return config;
}

}  // namespace

Model::Model(ModelConfig config) : config_(validated(std::move(config))), full_mask_(config_.context) {
  const Index d = config_.dim, h = config_.ffn_hidden();
  std::mt19937_64 rng(config_.seed);
  const Scalar init_std = config_.init_std;
  const Scalar resid_std =
      config_.layers > 0 ? init_std / std::sqrt(2.0 * static_cast<Scalar>(config_.layers)) : init_std;
  const bool pre_ln = config_.norm == NormMode::PreLN;

  params_.add("wte", normal_tensor({config_.vocab, d}, init_std, rng), -1);
  params_.add("wpe", normal_tensor({config_.context, d}, init_std, rng), -1);
  if (config_.act.type == ActivationType::LeakyLearnableGlobal) {
    params_.add("slope", Tensor::scalar(config_.act.slope), -1);
  }

  for (Index l = 0; l < config_.layers; ++l) {
    const std::string p = layer_prefix(l);
    if (pre_ln) {
      params_.add(p + "ln1.g", Tensor::full({d}, 1.0), l);
      params_.add(p + "ln1.b", Tensor::zeros({d}), l);
    }
    for (const char* name : {"wq", "wk", "wv"}) {
      params_.add(p + "attn." + name, normal_tensor({d, d}, init_std, rng), l);
    }
    params_.add(p + "attn.wo", normal_tensor({d, d}, resid_std, rng), l);
    if (config_.bias) {
      for (const char* name : {"bq", "bk", "bv", "bo"}) params_.add(p + "attn." + name, Tensor::zeros({d}), l);
    }
    if (pre_ln) {
      params_.add(p + "ln2.g", Tensor::full({d}, 1.0), l);
      params_.add(p + "ln2.b", Tensor::zeros({d}), l);
    }
    params_.add(p + "ffn.w_in", normal_tensor({d, h}, init_std, rng), l);
    params_.add(p + "ffn.w_out", normal_tensor({h, d}, resid_std, rng), l);
    if (config_.bias) {
      params_.add(p + "ffn.b_in", Tensor::zeros({h}), l);
      params_.add(p + "ffn.b_out", Tensor::zeros({d}), l);
    }
    if (config_.act.type == ActivationType::LeakyLearnableLayerwise) {
      params_.add(p + "slope", Tensor::scalar(config_.act.slope), l);
    }
  }
  if (pre_ln) {
    params_.add("lnf.g", Tensor::full({d}, 1.0), -1);
    params_.add("lnf.b", Tensor::zeros({d}), -1);
  }
}

CausalMask Model::mask(Index t) const { return t == config_.context ? full_mask_ : CausalMask(t); }

const Tensor* Model::slope_for(Index layer) const {
  switch (config_.act.type) {
    case ActivationType::LeakyLearnableGlobal:
      return &params_.get("slope");
    case ActivationType::LeakyLearnableLayerwise:
      return &params_.get(layer_prefix(layer) + "slope");
    default:
      return nullptr;
  }
}

std::vector<Scalar> Model::slope_values() const {
  std::vector<Scalar> out;
  if (!config_.act.learnable()) return out;
  for (Index l = 0; l < config_.layers; ++l) out.push_back(slope_for(l)->item());
  return out;
}

Tensor Model::linear(Tape& tape, const Tensor& x, const std::string& prefix, std::string_view w,
                     std::string_view b) const {
  Tensor y = matmul(tape, x, params_.get(prefix + std::string(w)));
  if (!config_.bias) return y;
  return add_row(tape, y, params_.get(prefix + std::string(b)));
}

Tensor Model::maybe_layernorm(Tape& tape, const Tensor& x, const std::string& prefix, Index layer,
                              ForwardObserver* observer) const {
  if (config_.norm == NormMode::NormFree) return x;
  if (observer) observer->on_layernorm(layer);
  return layernorm(tape, x, params_.get(prefix + "g"), params_.get(prefix + "b"), config_.ln_eps);
}

HeadParams Model::head_params(Index layer, Index head) const {
  const Index d = config_.dim, dk = config_.head_dim();
  const std::string p = layer_prefix(layer) + "attn.";
  auto cols = [&](std::string_view name) {
    const auto m = params_.get(p + std::string(name)).matrix();
    RowMatrix slice = m.middleCols(head * dk, dk);
    return Tensor::from({d, dk}, std::vector<Scalar>(slice.data(), slice.data() + slice.size()));
  };
  auto segment = [&](std::string_view name) {
    if (!config_.bias) return Tensor();
    const auto v = params_.get(p + std::string(name)).data();
    return Tensor::from({dk}, std::vector<Scalar>(v.begin() + head * dk, v.begin() + (head + 1) * dk));
  };
  return HeadParams{cols("wq"), segment("bq"), cols("wk"), segment("bk"), cols("wv"), segment("bv")};
}

Tensor Model::mha(Tape& tape, const Tensor& x, Index layer, Index batch, ForwardObserver* observer) const {
  const Index n = x.dim(0), d = config_.dim, heads = config_.heads, dk = config_.head_dim();
  if (n % batch != 0) throw DimensionError("mha: " + std::to_string(n) + " rows do not split into batch " +
                                           std::to_string(batch));
  const Index t = n / batch;
  const std::string p = layer_prefix(layer) + "attn.";

  auto split_heads = [&](const Tensor& y) {
    Tensor s = swap_axes_12(tape, reshape(tape, y, {batch, t, heads, dk}));
    return reshape(tape, s, {batch * heads, t, dk});
  };
  Tensor q = split_heads(linear(tape, x, p, "wq", "bq"));
  Tensor k = split_heads(linear(tape, x, p, "wk", "bk"));
  Tensor v = split_heads(linear(tape, x, p, "wv", "bv"));

  Tensor scores = scale(tape, bmm(tape, q, transpose_last_two(tape, k)), 1.0 / std::sqrt(static_cast<Scalar>(dk)));
  if (observer) observer->on_probe(layer, ProbeSite::AttentionScores, scores);
  Tensor probs = causal_softmax(tape, scores, mask(t));
  if (observer) observer->on_attention(layer, probs, batch, heads);

  Tensor ctx = bmm(tape, probs, v);
  Tensor merged = reshape(tape, swap_axes_12(tape, reshape(tape, ctx, {batch, heads, t, dk})), {n, d});
  Tensor out = linear(tape, merged, p, "wo", "bo");
  if (observer) observer->on_probe(layer, ProbeSite::AttentionOutput, out);
  return out;
}

Tensor Model::ffn(Tape& tape, const Tensor& x, Index layer, ForwardObserver* observer) const {
  const std::string p = layer_prefix(layer) + "ffn.";
  Tensor pre = linear(tape, x, p, "w_in", "b_in");
  if (observer) observer->on_probe(layer, ProbeSite::FfnPreact, pre);
  Tensor act = activate(tape, pre, config_.act, slope_for(layer), config_.gelu_approx);
  return linear(tape, act, p, "w_out", "b_out");
}

Tensor Model::block_forward(Tape& tape, const Tensor& x, Index layer, Index batch, ForwardObserver* observer) const {
  const std::string p = layer_prefix(layer);
  Tensor attn_in = maybe_layernorm(tape, x, p + "ln1.", layer, observer);
  Tensor hidden = add(tape, x, mha(tape, attn_in, layer, batch, observer));
  Tensor ffn_in = maybe_layernorm(tape, hidden, p + "ln2.", layer, observer);
  Tensor out = add(tape, hidden, ffn(tape, ffn_in, layer, observer));
  if (observer) observer->on_probe(layer, ProbeSite::BlockOutput, out);
  return out;
}

Tensor Model::forward(Tape& tape, std::span<const Index> ids, Index batch, ForwardObserver* observer) const {
  if (batch < 1 || ids.empty() || ids.size() % static_cast<std::size_t>(batch) != 0) {
    throw std::invalid_argument("forward: " + std::to_string(ids.size()) + " ids do not form " +
                                std::to_string(batch) + " equal rows");
  }
  const Index t = static_cast<Index>(ids.size()) / batch;
  if (t > config_.context) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(t) + " exceeds context " +
                                std::to_string(config_.context));
  }
  for (Index id : ids) {
    if (id < 0 || id >= config_.vocab) {
      throw std::out_of_range("forward: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(config_.vocab));
    }
  }
  std::vector<Index> positions(ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<Index>(i) % t;

  const Tensor& wte = params_.get("wte");
  Tensor x = add(tape, embedding(tape, wte, ids), embedding(tape, params_.get("wpe"), positions));
  for (Index l = 0; l < config_.layers; ++l) x = block_forward(tape, x, l, batch, observer);
  x = maybe_layernorm(tape, x, "lnf.", -1, observer);
  return matmul(tape, x, transpose_last_two(tape, wte));
}

}  // namespace normfree
