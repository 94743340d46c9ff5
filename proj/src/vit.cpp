#include "npath/vit.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "npath/error.hpp"
#include "npath/rng.hpp"
#include "npath/tape.hpp"
#include "npath/vit_graph.hpp"

namespace npath {

void VitConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw InvalidParameter("patch_size " + std::to_string(patch_size) + " must divide image_size " +
                           std::to_string(image_size));
  }
  if (heads == 0 || hidden == 0 || hidden % heads != 0) {
    throw InvalidParameter("hidden " + std::to_string(hidden) + " must be divisible by heads " +
                           std::to_string(heads));
  }
  if (layers < 1 || ffn < 1 || classes < 1 || channels < 1) {
    throw InvalidParameter("layers, ffn, classes and channels must all be >= 1");
  }
}

std::string to_string(const NeuronId& id) {
  return "L" + std::to_string(id.layer) + ":" + std::to_string(id.channel);
}

void validate_neuron(const NeuronId& id, const VitConfig& config) {
  if (id.layer < 1 || id.layer > config.layers) {
    throw IndexError("neuron layer " + std::to_string(id.layer) + " outside [1, " + std::to_string(config.layers) +
                     "]");
  }
  if (id.channel >= config.ffn) {
    throw IndexError("neuron channel " + std::to_string(id.channel) + " outside [0, " + std::to_string(config.ffn) +
                     ")");
  }
}

const char* to_string(TokenScope scope) { return scope == TokenScope::cls_only ? "cls" : "all-tokens"; }
const char* to_string(OutputMode mode) { return mode == OutputMode::logit ? "logit" : "prob"; }

TokenScope parse_scope(const std::string& s) {
  if (s == "all-tokens" || s == "all") return TokenScope::all_tokens;
  if (s == "cls" || s == "cls-only") return TokenScope::cls_only;
  throw UsageError("unknown scope '" + s + "' (expected all-tokens or cls)");
}

OutputMode parse_output_mode(const std::string& s) {
  if (s == "prob" || s == "probability") return OutputMode::probability;
  if (s == "logit") return OutputMode::logit;
  throw UsageError("unknown output mode '" + s + "' (expected prob or logit)");
}

std::vector<std::size_t> scope_rows(TokenScope scope, std::size_t seq_len) {
  if (scope == TokenScope::cls_only) return {0};
  std::vector<std::size_t> rows(seq_len);
  for (std::size_t i = 0; i < seq_len; ++i) rows[i] = i;
  return rows;
}

InterventionSpec& InterventionSpec::add(NeuronId neuron, InterventionMode mode) {
  for (const auto& e : entries_) {
    if (e.neuron == neuron) throw UsageError("duplicate intervention on neuron " + to_string(neuron));
  }
  entries_.push_back({neuron, mode});
  return *this;
}

namespace {

template <typename Model, typename Ptr>
std::vector<std::pair<std::string, Ptr>> collect(Model& m) {
  std::vector<std::pair<std::string, Ptr>> out;
  out.emplace_back("patch_embed.weight", &m.patch_weight);
  out.emplace_back("patch_embed.bias", &m.patch_bias);
  out.emplace_back("cls_token", &m.cls_token);
  out.emplace_back("pos_embed", &m.pos_embed);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    auto& l = m.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "ln1.gamma", &l.ln1_gamma);
    out.emplace_back(p + "ln1.beta", &l.ln1_beta);
    out.emplace_back(p + "attn.qkv.weight", &l.qkv_weight);
    out.emplace_back(p + "attn.qkv.bias", &l.qkv_bias);
    out.emplace_back(p + "attn.proj.weight", &l.proj_weight);
    out.emplace_back(p + "attn.proj.bias", &l.proj_bias);
    out.emplace_back(p + "ln2.gamma", &l.ln2_gamma);
    out.emplace_back(p + "ln2.beta", &l.ln2_beta);
    out.emplace_back(p + "ffn.fc1.weight", &l.fc1_weight);
    out.emplace_back(p + "ffn.fc1.bias", &l.fc1_bias);
    out.emplace_back(p + "ffn.fc2.weight", &l.fc2_weight);
    out.emplace_back(p + "ffn.fc2.bias", &l.fc2_bias);
  }
  out.emplace_back("norm.gamma", &m.norm_gamma);
  out.emplace_back("norm.beta", &m.norm_beta);
  out.emplace_back("head.weight", &m.head_weight);
  out.emplace_back("head.bias", &m.head_bias);
  return out;
}

bool is_gain(const std::string& name) { return name.ends_with("gamma"); }

}  // namespace

std::vector<std::pair<std::string, const Tensor*>> VitModel::named_tensors() const {
  return collect<const VitModel, const Tensor*>(*this);
}

std::vector<std::pair<std::string, Tensor*>> VitModel::named_tensors() { return collect<VitModel, Tensor*>(*this); }

std::vector<std::pair<std::string, Shape>> expected_shapes(const VitConfig& c) {
  c.validate();
  const std::size_t d = c.hidden, n = c.ffn;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("patch_embed.weight", Shape{c.patch_dim(), d});
  out.emplace_back("patch_embed.bias", Shape{d});
  out.emplace_back("cls_token", Shape{1, d});
  out.emplace_back("pos_embed", Shape{c.seq_len(), d});
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "ln1.gamma", Shape{d});
    out.emplace_back(p + "ln1.beta", Shape{d});
    out.emplace_back(p + "attn.qkv.weight", Shape{d, 3 * d});
    out.emplace_back(p + "attn.qkv.bias", Shape{3 * d});
    out.emplace_back(p + "attn.proj.weight", Shape{d, d});
    out.emplace_back(p + "attn.proj.bias", Shape{d});
    out.emplace_back(p + "ln2.gamma", Shape{d});
    out.emplace_back(p + "ln2.beta", Shape{d});
    out.emplace_back(p + "ffn.fc1.weight", Shape{d, n});
    out.emplace_back(p + "ffn.fc1.bias", Shape{n});
    out.emplace_back(p + "ffn.fc2.weight", Shape{n, d});
    out.emplace_back(p + "ffn.fc2.bias", Shape{d});
  }
  out.emplace_back("norm.gamma", Shape{d});
  out.emplace_back("norm.beta", Shape{d});
  out.emplace_back("head.weight", Shape{d, c.classes});
  out.emplace_back("head.bias", Shape{c.classes});
  return out;
}

VitModel make_zero_model(const VitConfig& config) {
  VitModel m;
  m.config = config;
  m.layers.resize(config.layers);
  const auto shapes = expected_shapes(config);
  auto slots = m.named_tensors();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    *slots[i].second = Tensor(shapes[i].second, is_gain(shapes[i].first) ? 1.0 : 0.0);
  }
  return m;
}

VitModel init_model(const VitConfig& config, std::uint64_t seed) {
  VitModel m = make_zero_model(config);
  Rng rng(seed);
  for (auto& [name, t] : m.named_tensors()) {
    double std_dev = 0.0;
    if (name == "cls_token" || name == "pos_embed") {
      std_dev = 0.02;
    } else if (name.ends_with("weight")) {
      std_dev = 1.0 / std::sqrt(static_cast<double>(t->dim(0)));
    }
    if (std_dev == 0.0) continue;
    for (auto& v : t->mutable_data()) v = std_dev * rng.normal();
  }
  return m;
}

void validate_image(const Tensor& image, const VitConfig& c) {
  const Shape want{c.channels, c.image_size, c.image_size};
  if (image.shape() != want) {
    throw DimensionError("image shape " + shape_string(image.shape()) + " does not match config " +
                         shape_string(want));
  }
}

Tensor extract_patches(const Tensor& image, const VitConfig& c) {
  validate_image(image, c);
  const std::size_t g = c.grid(), p = c.patch_size, s = c.image_size;
  Tensor out({c.num_patches(), c.patch_dim()});
  for (std::size_t pr = 0; pr < g; ++pr) {
    for (std::size_t pc = 0; pc < g; ++pc) {
      const std::size_t patch = pr * g + pc;
      std::size_t k = 0;
      for (std::size_t ch = 0; ch < c.channels; ++ch)
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < p; ++j)
            out.at(patch, k++) = image[(ch * s + pr * p + i) * s + pc * p + j];
    }
  }
  return out;
}

std::vector<ColumnHook> intervention_hooks(Tape& tape, const InterventionSpec& spec, const VitConfig& config) {
  std::vector<ColumnHook> hooks;
  const auto rows = scope_rows(spec.scope(), config.seq_len());
  for (const auto& e : spec.entries()) {
    validate_neuron(e.neuron, config);
    ColumnHook h;
    h.layer = e.neuron.layer;
    h.channel = e.neuron.channel;
    h.rows = rows;
    switch (e.mode.kind) {
      case InterventionMode::Kind::scale:
        h.kind = ColumnHook::Kind::scale;
        h.factor = e.mode.value;
        break;
      case InterventionMode::Kind::zero:
        h.kind = ColumnHook::Kind::scale;
        h.factor = 0.0;
        break;
      case InterventionMode::Kind::twice:
        h.kind = ColumnHook::Kind::scale;
        h.factor = 2.0;
        break;
      case InterventionMode::Kind::set:
        h.kind = ColumnHook::Kind::overwrite;
        h.operand = tape.constant(Tensor({rows.size()}, e.mode.value));
        break;
    }
    hooks.push_back(std::move(h));
  }
  return hooks;
}

VitGraph build_vit_graph(Tape& tape, const VitModel& model, const Tensor& image, const GraphOptions& options) {
  const VitConfig& c = model.config;
  VitGraph g;
  for (const auto& [name, t] : model.named_tensors()) {
    g.weights.push_back(options.weights_require_grad ? tape.variable_ref(*t) : tape.constant_ref(*t));
  }
  std::size_t w = 0;
  auto next = [&]() { return g.weights[w++]; };
  const Var patch_w = next(), patch_b = next(), cls = next(), pos = next();

  const Var patches = tape.constant(extract_patches(image, c));
  const Var embedded = tape.add(tape.matmul(patches, patch_w), patch_b);
  const Var seq_parts[] = {cls, embedded};
  Var x = tape.add(tape.concat(seq_parts, 0), pos);

  const std::size_t d = c.hidden, dh = c.head_dim();
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto column_range = [](std::size_t start, std::size_t len) {
    std::vector<std::size_t> idx(len);
    for (std::size_t i = 0; i < len; ++i) idx[i] = start + i;
    return idx;
  };

  for (std::size_t l = 0; l < c.layers; ++l) {
    const Var ln1_g = next(), ln1_b = next(), qkv_w = next(), qkv_b = next(), proj_w = next(), proj_b = next();
    const Var ln2_g = next(), ln2_b = next(), fc1_w = next(), fc1_b = next(), fc2_w = next(), fc2_b = next();

    const Var a = tape.layer_norm(x, ln1_g, ln1_b, model.layer_norm_eps);
    const Var qkv = tape.add(tape.matmul(a, qkv_w), qkv_b);
    std::vector<Var> heads;
    for (std::size_t h = 0; h < c.heads; ++h) {
      const Var q = tape.index_select(qkv, 1, column_range(h * dh, dh));
      const Var k = tape.index_select(qkv, 1, column_range(d + h * dh, dh));
      const Var v = tape.index_select(qkv, 1, column_range(2 * d + h * dh, dh));
      const Var scores = tape.scale(tape.matmul(q, tape.transpose(k)), score_scale);
      heads.push_back(tape.matmul(tape.softmax(scores, 1), v));
    }
    const Var attn = tape.add(tape.matmul(tape.concat(heads, 1), proj_w), proj_b);
    x = tape.add(x, attn);

    const Var b = tape.layer_norm(x, ln2_g, ln2_b, model.layer_norm_eps);
    Var hidden = tape.gelu(tape.add(tape.matmul(b, fc1_w), fc1_b));
    for (const auto& hook : options.hooks) {
      if (hook.layer != l + 1) continue;
      switch (hook.kind) {
        case ColumnHook::Kind::scale:
          hidden = tape.scale_column(hidden, hook.channel, hook.rows, hook.factor);
          break;
        case ColumnHook::Kind::overwrite:
          hidden = tape.overwrite_column(hidden, hook.channel, hook.rows, hook.operand);
          break;
        case ColumnHook::Kind::shift:
          hidden = tape.shift_column(hidden, hook.channel, hook.rows, hook.operand);
          break;
      }
    }
    g.hidden.push_back(hidden);
    x = tape.add(x, tape.add(tape.matmul(hidden, fc2_w), fc2_b));
  }

  const Var norm_g = next(), norm_b = next(), head_w = next(), head_b = next();
  const Var cls_row = tape.layer_norm(tape.index_select(x, 0, {0}), norm_g, norm_b, model.layer_norm_eps);
  g.logits = tape.add(tape.matmul(cls_row, head_w), head_b);
  g.probs = tape.softmax(g.logits, 1);
  return g;
}

Var output_scalar(Tape& tape, const VitGraph& graph, std::size_t label, OutputMode mode) {
  return tape.index_select(mode == OutputMode::logit ? graph.logits : graph.probs, 1, {label});
}

Tensor patchify(const VitModel& model, const Tensor& image) {
  Tape tape;
  const VitConfig& c = model.config;
  const Var patches = tape.constant(extract_patches(image, c));
  const Var embedded = tape.add(tape.matmul(patches, tape.constant_ref(model.patch_weight)),
                                tape.constant_ref(model.patch_bias));
  const Var parts[] = {tape.constant_ref(model.cls_token), embedded};
  return tape.value(tape.add(tape.concat(parts, 0), tape.constant_ref(model.pos_embed)));
}

std::size_t ForwardResult::predicted() const {
  return static_cast<std::size_t>(std::max_element(probabilities.begin(), probabilities.end()) -
                                  probabilities.begin());
}

ForwardResult forward(const VitModel& model, const Tensor& image, const InterventionSpec& interventions,
                      std::optional<std::size_t> upto) {
  const std::size_t limit = upto.value_or(model.config.layers);
  if (limit < 1 || limit > model.config.layers) {
    throw IndexError("upto " + std::to_string(limit) + " outside [1, " + std::to_string(model.config.layers) + "]");
  }
  for (const auto& e : interventions.entries()) {
    validate_neuron(e.neuron, model.config);
    if (e.neuron.layer > limit) {
      throw IndexError("intervention on " + to_string(e.neuron) + " beyond upto layer " + std::to_string(limit));
    }
  }
  Tape tape;
  GraphOptions options;
  options.hooks = intervention_hooks(tape, interventions, model.config);
  const VitGraph g = build_vit_graph(tape, model, image, options);
  ForwardResult r;
  r.logits = tape.value(g.logits).values();
  r.probabilities = tape.value(g.probs).values();
  for (const Var& h : g.hidden) r.intermediates.push_back(tape.value(h));
  return r;
}

std::vector<double> NeuronActivations::values(const NeuronId& id, TokenScope scope) const {
  const Tensor& t = per_token.at(id.layer - 1);
  if (scope == TokenScope::cls_only) return {t.at(0, id.channel)};
  std::vector<double> out(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) out[r] = t.at(r, id.channel);
  return out;
}

NeuronActivations neuron_activations(const VitModel& model, const Tensor& image) {
  ForwardResult r = forward(model, image);
  const std::size_t L = model.config.layers, n = model.config.ffn;
  NeuronActivations a;
  a.cls = Tensor({L, n});
  a.mean = Tensor({L, n});
  for (std::size_t l = 0; l < L; ++l) {
    const Tensor& h = r.intermediates[l];
    for (std::size_t ch = 0; ch < n; ++ch) {
      a.cls.at(l, ch) = h.at(0, ch);
      double s = 0.0;
      for (std::size_t t = 0; t < h.rows(); ++t) s += h.at(t, ch);
      a.mean.at(l, ch) = s / static_cast<double>(h.rows());
    }
  }
  a.per_token = std::move(r.intermediates);
  return a;
}

double NeuronGradients::contracted(std::size_t i) const {
  double s = 0.0;
  for (std::size_t r = 0; r < originals[i].size(); ++r) s += originals[i][r] * gradients[i][r];
  return s;
}

NeuronGradients grad_wrt_neurons(const VitModel& model, const Tensor& image, std::size_t label,
                                 std::span<const NeuronId> neurons, double alpha, TokenScope scope, OutputMode mode,
                                 bool strict_path) {
  return grad_wrt_neurons(model, image, label, neurons, alpha, scope, mode, strict_path,
                          neuron_activations(model, image));
}

NeuronGradients grad_wrt_neurons(const VitModel& model, const Tensor& image, std::size_t label,
                                 std::span<const NeuronId> neurons, double alpha, TokenScope scope, OutputMode mode,
                                 bool strict_path, const NeuronActivations& clean) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidParameter("alpha must lie in [0, 1]");
  if (label >= model.config.classes) throw IndexError("label " + std::to_string(label) + " out of range");
  std::set<NeuronId> seen;
  std::set<std::size_t> layers;
  for (const auto& id : neurons) {
    validate_neuron(id, model.config);
    if (!seen.insert(id).second) throw UsageError("neuron " + to_string(id) + " listed twice");
    if (strict_path && !layers.insert(id.layer).second) {
      throw UsageError("layer " + std::to_string(id.layer) + " appears twice in a path");
    }
  }

  Tape tape;
  GraphOptions options;
  NeuronGradients out;
  std::vector<Var> leaves;
  const auto rows = scope_rows(scope, model.config.seq_len());
  for (const auto& id : neurons) {
    std::vector<double> orig = clean.values(id, scope);
    std::vector<double> scaled(orig.size());
    for (std::size_t r = 0; r < orig.size(); ++r) scaled[r] = alpha * orig[r];
    leaves.push_back(tape.variable(Tensor({orig.size()}, std::move(scaled))));
    ColumnHook h;
    h.kind = ColumnHook::Kind::overwrite;
    h.layer = id.layer;
    h.channel = id.channel;
    h.rows = rows;
    h.operand = leaves.back();
    options.hooks.push_back(std::move(h));
    out.originals.push_back(std::move(orig));
  }
  const VitGraph g = build_vit_graph(tape, model, image, options);
  const Var f = output_scalar(tape, g, label, mode);
  tape.backward(f);
  out.output = tape.value(f).item();
  for (const Var& leaf : leaves) out.gradients.push_back(tape.grad(leaf).values());
  return out;
}

}  // namespace npath
