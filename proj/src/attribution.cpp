#include "npath/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "npath/error.hpp"
#include "npath/tangent.hpp"

namespace npath {
namespace {

// First maximum wins, so ties go to the lowest channel.
std::size_t argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

std::vector<std::size_t> ranked(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  return idx;
}

}  // namespace

void IntegrationConfig::validate() const {
  if (m < 1) throw InvalidParameter("integration step count m must be >= 1");
}

const char* method_name(Criterion c) {
  switch (c) {
    case Criterion::jas:
      return "neuron_path";
    case Criterion::activation:
      return "activation";
    case Criterion::influence_pattern:
      return "influence_pattern";
  }
  return "?";
}

Criterion parse_criterion(const std::string& s) {
  if (s == "jas" || s == "neuron_path" || s == "neuron-path") return Criterion::jas;
  if (s == "activation") return Criterion::activation;
  if (s == "influence_pattern" || s == "influence-pattern" || s == "ip") return Criterion::influence_pattern;
  throw UsageError("unknown method '" + s + "' (expected jas, activation or influence_pattern)");
}

void validate_path(std::span<const NeuronId> neurons, const VitConfig& config) {
  if (neurons.size() > config.layers) throw UsageError("path is longer than the model");
  for (std::size_t i = 0; i < neurons.size(); ++i) {
    validate_neuron(neurons[i], config);
    if (neurons[i].layer != i + 1) {
      throw UsageError("path entry " + std::to_string(i) + " is " + to_string(neurons[i]) + ", expected layer " +
                       std::to_string(i + 1));
    }
  }
}

double riemann_right(const std::function<double(double)>& f, std::size_t m) {
  if (m < 1) throw InvalidParameter("step count m must be >= 1");
  double total = 0.0;
  for (std::size_t k = 1; k <= m; ++k) total += f(static_cast<double>(k) / static_cast<double>(m));
  return total / static_cast<double>(m);
}

double jas(const VitModel& model, const Sample& sample, std::span<const NeuronId> neurons,
           const IntegrationConfig& integ) {
  return jas(model, sample, neurons, integ, neuron_activations(model, sample.x));
}

double jas(const VitModel& model, const Sample& sample, std::span<const NeuronId> neurons,
           const IntegrationConfig& integ, const NeuronActivations& clean) {
  integ.validate();
  if (neurons.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t k = 1; k <= integ.m; ++k) {
    const double alpha = static_cast<double>(k) / static_cast<double>(integ.m);
    const NeuronGradients g =
        grad_wrt_neurons(model, sample.x, sample.y, neurons, alpha, integ.scope, integ.output_mode, true, clean);
    double step = 0.0;
    for (std::size_t i = 0; i < neurons.size(); ++i) step += g.contracted(i);
    if (!std::isfinite(step)) throw NumericError("non-finite gradient at step k=" + std::to_string(k));
    total += step;
  }
  return total / static_cast<double>(integ.m);
}

PathSearch search_path(const VitModel& model, const Sample& sample, const IntegrationConfig& integ) {
  integ.validate();
  const NeuronActivations clean = neuron_activations(model, sample.x);
  TangentEngine engine(model, integ.scope, integ.output_mode);
  PathSearch out;
  out.path.criterion = Criterion::jas;
  for (std::size_t l = 1; l <= model.config.layers; ++l) {
    auto scores = engine.scan_layer(sample.x, sample.y, clean, out.path.neurons, l, integ.m);
    const std::size_t best = argmax(scores);
    out.path.neurons.push_back({l, best});
    out.path.score = scores[best];
    out.scores.push_back(std::move(scores));
  }
  out.path.criterion_value = out.path.score;
  return out;
}

NeuronPath locate_path(const VitModel& model, const Sample& sample, const IntegrationConfig& integ) {
  return search_path(model, sample, integ).path;
}

TopkResult topk_from_search(const PathSearch& search, std::size_t t) {
  const std::size_t n = search.scores.empty() ? 0 : search.scores.front().size();
  if (t < 1 || t > n) throw UsageError("topk t=" + std::to_string(t) + " outside [1, " + std::to_string(n) + "]");
  TopkResult out;
  out.chain = search.path;
  for (std::size_t l = 0; l < search.scores.size(); ++l) {
    const auto order = ranked(search.scores[l]);
    std::vector<NeuronId> ids;
    std::vector<double> vals;
    for (std::size_t i = 0; i < t; ++i) {
      ids.push_back({l + 1, order[i]});
      vals.push_back(search.scores[l][order[i]]);
    }
    out.per_layer.push_back(std::move(ids));
    out.scores.push_back(std::move(vals));
  }
  return out;
}

TopkResult locate_topk(const VitModel& model, const Sample& sample, const IntegrationConfig& integ, std::size_t t) {
  if (t < 1 || t > model.config.ffn) {
    throw UsageError("topk t=" + std::to_string(t) + " outside [1, " + std::to_string(model.config.ffn) + "]");
  }
  return topk_from_search(search_path(model, sample, integ), t);
}

KnowledgeReport knowledge_attribution(const VitModel& model, const Sample& sample, const IntegrationConfig& integ,
                                      std::size_t top_count) {
  integ.validate();
  const VitConfig& c = model.config;
  if (top_count > c.layers * c.ffn) throw UsageError("top count exceeds the number of neurons");
  const NeuronActivations clean = neuron_activations(model, sample.x);
  TangentEngine engine(model, integ.scope, integ.output_mode);
  KnowledgeReport report;
  report.scores = Tensor({c.layers, c.ffn});
  auto data = report.scores.mutable_data();
  for (std::size_t l = 1; l <= c.layers; ++l) {
    const auto scores = engine.scan_layer(sample.x, sample.y, clean, {}, l, integ.m);
    std::copy(scores.begin(), scores.end(), data.begin() + static_cast<std::ptrdiff_t>((l - 1) * c.ffn));
  }
  const auto order = ranked(std::vector<double>(data.begin(), data.end()));
  report.histogram.assign(c.layers, 0);
  for (std::size_t i = 0; i < top_count; ++i) {
    const NeuronId id{order[i] / c.ffn + 1, order[i] % c.ffn};
    report.top.push_back(id);
    ++report.histogram[id.layer - 1];
  }
  return report;
}

NeuronPath activation_path(const VitModel& model, const Sample& sample, const IntegrationConfig& integ) {
  return activation_path(model, sample, integ, neuron_activations(model, sample.x));
}

NeuronPath activation_path(const VitModel& model, const Sample& sample, const IntegrationConfig& integ,
                           const NeuronActivations& clean) {
  integ.validate();
  const VitConfig& c = model.config;
  const Tensor& summary = clean.summary(integ.scope);
  NeuronPath path;
  path.criterion = Criterion::activation;
  for (std::size_t l = 1; l <= c.layers; ++l) {
    const auto row = summary.data().subspan((l - 1) * c.ffn, c.ffn);
    const std::size_t best = argmax(std::vector<double>(row.begin(), row.end()));
    path.neurons.push_back({l, best});
    path.criterion_value += row[best];
  }
  TangentEngine engine(model, integ.scope, integ.output_mode);
  path.score = engine.joint_attribution(sample.x, sample.y, clean, path.neurons, integ.m);
  return path;
}

PathSearch search_influence_pattern(const VitModel& model, const Sample& sample, const IntegrationConfig& integ) {
  integ.validate();
  const VitConfig& c = model.config;
  const NeuronActivations clean = neuron_activations(model, sample.x);
  const Tensor& summary = clean.summary(integ.scope);
  TangentEngine engine(model, integ.scope, integ.output_mode);

  PathSearch out;
  out.path.criterion = Criterion::influence_pattern;
  std::vector<double> first(c.ffn);
  for (std::size_t ch = 0; ch < c.ffn; ++ch) first[ch] = std::abs(summary.at(0, ch));
  out.path.neurons.push_back({1, argmax(first)});
  out.scores.push_back(std::move(first));

  // running product of the chosen factors, one entry per Riemann step
  std::vector<double> product(integ.m, 1.0);
  double objective = 1.0;  // empty product
  for (std::size_t l = 2; l <= c.layers; ++l) {
    const auto factors = engine.influence_factors(sample.x, out.path.neurons.back(), integ.m);
    std::vector<double> scores(c.ffn, 0.0);
    for (std::size_t ch = 0; ch < c.ffn; ++ch) {
      double total = 0.0;
      for (std::size_t k = 0; k < integ.m; ++k) total += product[k] * factors[k][ch];
      scores[ch] = total / static_cast<double>(integ.m);
    }
    const std::size_t best = argmax(scores);
    for (std::size_t k = 0; k < integ.m; ++k) product[k] *= factors[k][best];
    objective = scores[best];
    out.path.neurons.push_back({l, best});
    out.scores.push_back(std::move(scores));
  }
  out.path.criterion_value = objective;
  out.path.score = engine.joint_attribution(sample.x, sample.y, clean, out.path.neurons, integ.m);
  return out;
}

NeuronPath influence_pattern_path(const VitModel& model, const Sample& sample, const IntegrationConfig& integ) {
  return search_influence_pattern(model, sample, integ).path;
}

NeuronPath find_path(const VitModel& model, const Sample& sample, const IntegrationConfig& integ, Criterion method) {
  switch (method) {
    case Criterion::jas:
      return locate_path(model, sample, integ);
    case Criterion::activation:
      return activation_path(model, sample, integ);
    case Criterion::influence_pattern:
      return influence_pattern_path(model, sample, integ);
  }
  throw UsageError("unknown method");
}

std::string path_record(std::size_t sample_id, const NeuronPath& path, const IntegrationConfig& integ) {
  nlohmann::ordered_json j;
  j["sample_id"] = sample_id;
  j["method"] = method_name(path.criterion);
  auto arr = nlohmann::ordered_json::array();
  for (const auto& id : path.neurons) arr.push_back({{"layer", id.layer}, {"channel", id.channel}});
  j["path"] = std::move(arr);
  j["score"] = path.score;
  j["criterion_value"] = path.criterion_value;
  j["config"] = {{"m", integ.m}, {"scope", to_string(integ.scope)}, {"output_mode", to_string(integ.output_mode)}};
  return j.dump();
}

}  // namespace npath
