#include "npath/oracle.hpp"

#include <cmath>

#include "npath/error.hpp"
#include "npath/tape.hpp"
#include "npath/vit_graph.hpp"

namespace npath {

PathSearch naive_search_path(const VitModel& model, const Sample& sample, const IntegrationConfig& integ) {
  PathSearch out;
  out.path.criterion = Criterion::jas;
  for (std::size_t l = 1; l <= model.config.layers; ++l) {
    std::vector<double> scores;
    for (std::size_t c = 0; c < model.config.ffn; ++c) {
      auto candidate = out.path.neurons;
      candidate.push_back({l, c});
      scores.push_back(jas(model, sample, candidate, integ));
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.size(); ++c)
      if (scores[c] > scores[best]) best = c;
    out.path.neurons.push_back({l, best});
    out.path.score = scores[best];
    out.scores.push_back(scores);
  }
  out.path.criterion_value = out.path.score;
  return out;
}

std::vector<double> naive_influence_factor(const VitModel& model, const Tensor& image, const NeuronId& from,
                                           double alpha, TokenScope scope) {
  const VitConfig& c = model.config;
  if (from.layer >= c.layers) throw UsageError("no layer after " + to_string(from));
  Tensor scaled = image;
  for (auto& v : scaled.mutable_data()) v *= alpha;

  Tape tape;
  const Var delta = tape.variable(Tensor::scalar(0.0));
  GraphOptions options;
  ColumnHook hook;
  hook.kind = ColumnHook::Kind::shift;
  hook.layer = from.layer;
  hook.channel = from.channel;
  hook.rows = scope_rows(scope, c.seq_len());
  hook.operand = delta;
  options.hooks.push_back(hook);
  const VitGraph g = build_vit_graph(tape, model, scaled, options);
  const Var next = g.hidden[from.layer];  // layer from.layer + 1

  std::vector<double> out;
  for (std::size_t w = 0; w < c.ffn; ++w) {
    Var column = tape.index_select(next, 1, {w});
    Var summary = scope == TokenScope::cls_only
                      ? tape.sum(tape.index_select(column, 0, {0}))
                      : tape.scale(tape.sum(column), 1.0 / static_cast<double>(c.seq_len()));
    tape.backward(summary);
    out.push_back(tape.grad(delta).item());
  }
  return out;
}

PathSearch naive_search_influence_pattern(const VitModel& model, const Sample& sample,
                                         const IntegrationConfig& integ) {
  const VitConfig& c = model.config;
  const ForwardResult clean = forward(model, sample.x);
  PathSearch out;
  out.path.criterion = Criterion::influence_pattern;

  // layer 1: largest |summary| of the clean activation
  std::vector<double> first;
  for (std::size_t ch = 0; ch < c.ffn; ++ch) {
    const Tensor& h = clean.intermediates[0];
    double s = 0.0;
    if (integ.scope == TokenScope::cls_only) {
      s = h.at(0, ch);
    } else {
      for (std::size_t r = 0; r < h.rows(); ++r) s += h.at(r, ch);
      s /= static_cast<double>(h.rows());
    }
    first.push_back(std::abs(s));
  }
  std::size_t best = 0;
  for (std::size_t ch = 1; ch < first.size(); ++ch)
    if (first[ch] > first[best]) best = ch;
  out.path.neurons.push_back({1, best});
  out.scores.push_back(first);

  std::vector<double> product(integ.m, 1.0);
  out.path.criterion_value = 1.0;
  for (std::size_t l = 2; l <= c.layers; ++l) {
    std::vector<std::vector<double>> factors;
    for (std::size_t k = 1; k <= integ.m; ++k) {
      factors.push_back(naive_influence_factor(model, sample.x, out.path.neurons.back(),
                                               static_cast<double>(k) / static_cast<double>(integ.m), integ.scope));
    }
    std::vector<double> scores;
    for (std::size_t ch = 0; ch < c.ffn; ++ch) {
      double total = 0.0;
      for (std::size_t k = 0; k < integ.m; ++k) total += product[k] * factors[k][ch];
      scores.push_back(total / static_cast<double>(integ.m));
    }
    best = 0;
    for (std::size_t ch = 1; ch < scores.size(); ++ch)
      if (scores[ch] > scores[best]) best = ch;
    for (std::size_t k = 0; k < integ.m; ++k) product[k] *= factors[k][best];
    out.path.criterion_value = scores[best];
    out.path.neurons.push_back({l, best});
    out.scores.push_back(scores);
  }
  out.path.score = jas(model, sample, out.path.neurons, integ);
  return out;
}

Tensor naive_knowledge_scores(const VitModel& model, const Sample& sample, const IntegrationConfig& integ) {
  const VitConfig& c = model.config;
  Tensor out({c.layers, c.ffn});
  auto d = out.mutable_data();
  for (std::size_t l = 1; l <= c.layers; ++l) {
    for (std::size_t ch = 0; ch < c.ffn; ++ch) {
      const NeuronId id{l, ch};
      d[(l - 1) * c.ffn + ch] = jas(model, sample, std::span<const NeuronId>(&id, 1), integ);
    }
  }
  return out;
}

ExhaustiveResult exhaustive_paths(const VitModel& model, const Sample& sample, const IntegrationConfig& integ) {
  const VitConfig& c = model.config;
  const double count = std::pow(static_cast<double>(c.ffn), static_cast<double>(c.layers));
  if (count > 1e5) throw UsageError("exhaustive enumeration is limited to 1e5 paths");
  ExhaustiveResult out;
  std::vector<std::size_t> digits(c.layers, 0);
  for (;;) {
    std::vector<NeuronId> path;
    for (std::size_t l = 0; l < c.layers; ++l) path.push_back({l + 1, digits[l]});
    out.scores.push_back(jas(model, sample, path, integ));
    if (out.scores.back() > out.scores[out.best]) out.best = out.scores.size() - 1;
    out.paths.push_back(std::move(path));
    std::size_t pos = c.layers;
    while (pos > 0 && ++digits[pos - 1] == c.ffn) digits[--pos] = 0;
    if (pos == 0) break;
  }
  return out;
}

}  // namespace npath
