#include "npath/verify.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "npath/analysis.hpp"
#include "npath/checkpoint.hpp"
#include "npath/error.hpp"
#include "npath/oracle.hpp"
#include "npath/rng.hpp"
#include "npath/tape.hpp"
#include "npath/trainer.hpp"
#include "npath/vit_graph.hpp"

namespace npath {
namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

double max_abs_diff(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return INFINITY;
    for (std::size_t j = 0; j < a[i].size(); ++j) worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
  }
  return worst;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

template <typename Fn>
CheckResult guarded(const std::string& name, Fn fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    return {name, false, std::string("raised: ") + e.what()};
  }
}

}  // namespace

GradCheckResult model_gradient_check(const VitModel& model, const Sample& sample, std::size_t coords,
                                     std::uint64_t seed, double h, OutputMode mode) {
  Tape tape;
  GraphOptions options;
  options.weights_require_grad = true;
  const VitGraph g = build_vit_graph(tape, model, sample.x, options);
  tape.backward(output_scalar(tape, g, sample.y, mode));

  std::vector<double> point, analytic;
  const auto named = model.named_tensors();
  for (std::size_t p = 0; p < named.size(); ++p) {
    const Tensor grad = tape.grad(g.weights[p]);
    for (std::size_t i = 0; i < grad.numel(); ++i) {
      point.push_back((*named[p].second)[i]);
      analytic.push_back(grad[i]);
    }
  }
  Rng rng(seed);
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < coords; ++i) picked.push_back(rng.below(point.size()));

  VitModel probe = model;
  auto f = [&](std::span<const double> pt) {
    std::size_t off = 0;
    for (auto& [name, t] : probe.named_tensors()) {
      for (double& v : t->mutable_data()) v = pt[off++];
    }
    const ForwardResult r = forward(probe, sample.x);
    return mode == OutputMode::logit ? r.logits[sample.y] : r.probabilities[sample.y];
  };
  return finite_difference_check(f, point, analytic, h, picked);
}

std::vector<CompletenessRow> completeness_check(const VitModel& model, const std::vector<Sample>& samples,
                                                std::size_t count, std::uint64_t seed, std::size_t m_low,
                                                std::size_t m_high, TokenScope scope) {
  if (samples.empty()) throw UsageError("completeness check needs samples");
  const VitConfig& c = model.config;
  Rng rng(seed);
  std::vector<CompletenessRow> rows;
  for (std::size_t i = 0; i < count; ++i) {
    CompletenessRow row;
    row.sample = rng.below(samples.size());
    for (std::size_t l = 1; l <= c.layers; ++l) row.path.push_back({l, rng.below(c.ffn)});
    const Sample& s = samples[row.sample];
    InterventionSpec off(scope);
    for (const auto& id : row.path) off.add(id, InterventionMode::zero());
    row.delta_f = forward(model, s.x).probabilities[s.y] - forward(model, s.x, off).probabilities[s.y];
    const NeuronActivations clean = neuron_activations(model, s.x);
    row.jas_low = jas(model, s, row.path, {m_low, scope, OutputMode::probability}, clean);
    row.jas_high = jas(model, s, row.path, {m_high, scope, OutputMode::probability}, clean);
    row.residual_low = std::abs(row.jas_low - row.delta_f);
    row.residual_high = std::abs(row.jas_high - row.delta_f);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<double> riemann_sequence(const VitModel& model, const Sample& sample, std::span<const NeuronId> path,
                                     const std::vector<std::size_t>& grid, TokenScope scope) {
  const NeuronActivations clean = neuron_activations(model, sample.x);
  std::vector<double> out;
  for (std::size_t m : grid) out.push_back(jas(model, sample, path, {m, scope, OutputMode::probability}, clean));
  return out;
}

VitConfig micro_config() {
  VitConfig c;
  c.layers = 2;
  c.hidden = 8;
  c.ffn = 6;
  c.heads = 2;
  return c;
}

VitModel micro_model(std::uint64_t seed) {
  return train_toy(micro_config(), generate_toy_dataset(kDefaultTrainSeed, 300), seed, 1, {}, {});
}

OracleReport oracle_equivalence(const VitModel& model, const Sample& sample, const IntegrationConfig& integ) {
  OracleReport r;
  const PathSearch fast = search_path(model, sample, integ);
  const PathSearch slow = naive_search_path(model, sample, integ);
  r.path_diff = std::max(max_abs_diff(fast.scores, slow.scores), std::abs(fast.path.score - slow.path.score));

  const PathSearch fast_ip = search_influence_pattern(model, sample, integ);
  const PathSearch slow_ip = naive_search_influence_pattern(model, sample, integ);
  r.influence_diff = std::max({max_abs_diff(fast_ip.scores, slow_ip.scores),
                               std::abs(fast_ip.path.score - slow_ip.path.score),
                               std::abs(fast_ip.path.criterion_value - slow_ip.path.criterion_value)});

  const KnowledgeReport k = knowledge_attribution(model, sample, integ);
  const Tensor naive_k = naive_knowledge_scores(model, sample, integ);
  for (std::size_t i = 0; i < naive_k.numel(); ++i) {
    r.knowledge_diff = std::max(r.knowledge_diff, std::abs(k.scores[i] - naive_k[i]));
  }
  r.same_choices = fast.path.neurons == slow.path.neurons && fast_ip.path.neurons == slow_ip.path.neurons;

  const ExhaustiveResult all = exhaustive_paths(model, sample, integ);
  r.enumerated = all.paths.size();
  r.greedy_score = fast.path.score;
  r.global_score = all.scores[all.best];
  r.global_path = all.paths[all.best];
  return r;
}

std::vector<CheckResult> run_verify_suite(const VitModel& model, const std::vector<Sample>& samples,
                                          std::uint64_t seed) {
  if (samples.size() < 2) throw UsageError("verify needs at least 2 samples");
  const VitConfig& c = model.config;
  const IntegrationConfig integ;
  std::vector<CheckResult> out;

  out.push_back(guarded("gradient fidelity", [&] {
    const auto r = model_gradient_check(model, samples[0], 100, seed);
    return CheckResult{"gradient fidelity", r.max_relative_error <= 1e-6,
                       "max rel err " + fmt(r.max_relative_error) + " at coord " + std::to_string(r.worst_coord) +
                           " (analytic " + fmt(r.worst_analytic) + ")"};
  }));

  out.push_back(guarded("jas completeness", [&] {
    const auto rows = completeness_check(model, samples, 20, seed, 8, 512, TokenScope::all_tokens);
    double worst = 0.0;
    bool shrinks = true;
    for (const auto& row : rows) {
      worst = std::max(worst, row.residual_high);
      shrinks = shrinks && row.residual_high < row.residual_low;
    }
    return CheckResult{"jas completeness", worst <= 1e-3 && shrinks,
                       "worst m=512 residual " + fmt(worst) + (shrinks ? ", m=512 beats m=8 on all 20" : ", m=8 won somewhere")};
  }));

  out.push_back(guarded("riemann convergence", [&] {
    std::vector<NeuronId> path;
    for (std::size_t l = 1; l <= c.layers; ++l) path.push_back({l, l % c.ffn});
    const auto j = riemann_sequence(model, samples[1], path, {8, 32, 128, 512}, TokenScope::all_tokens);
    const double d1 = std::abs(j[1] - j[0]), d2 = std::abs(j[2] - j[1]), d3 = std::abs(j[3] - j[2]);
    return CheckResult{"riemann convergence", d1 > d2 && d2 > d3,
                       "step changes " + fmt(d1) + ", " + fmt(d2) + ", " + fmt(d3)};
  }));

  out.push_back(guarded("oracle equivalence (micro)", [&] {
    const VitModel micro = micro_model(seed);
    const Sample s = generate_toy_sample(kDefaultTestSeed, 0);
    const auto r = oracle_equivalence(micro, s, integ);
    const bool ok = r.path_diff <= 1e-9 && r.influence_diff <= 1e-9 && r.knowledge_diff <= 1e-9 && r.same_choices &&
                    r.enumerated == 36;
    return CheckResult{"oracle equivalence (micro)", ok,
                       "diffs " + fmt(r.path_diff) + "/" + fmt(r.influence_diff) + "/" + fmt(r.knowledge_diff) +
                           ", greedy/global " + fmt(r.greedy_score / r.global_score)};
  }));

  PathSearch search;
  out.push_back(guarded("greedy step optimality", [&] {
    search = search_path(model, samples[0], integ);
    // independent rescan of the last layer given the chosen prefix
    std::vector<NeuronId> prefix(search.path.neurons.begin(), search.path.neurons.end() - 1);
    double worst = 0.0;
    double best = -INFINITY;
    for (std::size_t ch = 0; ch < c.ffn; ++ch) {
      auto cand = prefix;
      cand.push_back({c.layers, ch});
      const double v = jas(model, samples[0], cand, integ);
      worst = std::max(worst, std::abs(v - search.scores.back()[ch]));
      best = std::max(best, v);
    }
    const bool ok = worst <= 1e-9 && std::abs(best - search.path.score) <= 1e-9;
    return CheckResult{"greedy step optimality", ok, "rescan diff " + fmt(worst)};
  }));

  out.push_back(guarded("topk t=1 chain", [&] {
    const TopkResult t1 = topk_from_search(search, 1);
    bool same = true;
    for (std::size_t l = 0; l < c.layers; ++l) same = same && t1.per_layer[l][0] == search.path.neurons[l];
    return CheckResult{"topk t=1 chain", same, same ? "matches locate_path" : "differs"};
  }));

  out.push_back(guarded("checkpoint round trip", [&] {
    const VitModel back = decode_checkpoint(encode_checkpoint(model));
    bool same = true;
    const auto a = model.named_tensors(), b = back.named_tensors();
    for (std::size_t i = 0; i < a.size(); ++i) same = same && bit_equal(a[i].second->values(), b[i].second->values());
    return CheckResult{"checkpoint round trip", same, same ? "bit-identical" : "weights differ"};
  }));

  out.push_back(guarded("empty intervention identity", [&] {
    bool same = true;
    for (const auto& s : samples) {
      const ForwardResult a = forward(model, s.x);
      const ForwardResult b = forward(model, s.x, InterventionSpec{});
      same = same && bit_equal(a.probabilities, b.probabilities) && bit_equal(a.logits, b.logits);
    }
    return CheckResult{"empty intervention identity", same, same ? "bit-identical" : "outputs differ"};
  }));

  out.push_back(guarded("softmax normalization", [&] {
    Rng rng(seed ^ 0x50f7);
    double worst = 0.0;
    for (const auto& s : samples) {
      InterventionSpec spec;
      for (std::size_t l = 1; l <= c.layers; ++l) spec.add({l, rng.below(c.ffn)}, InterventionMode::scale(3.0 * rng.uniform()));
      const ForwardResult r = forward(model, s.x, spec);
      double sum = 0.0;
      for (double p : r.probabilities) sum += p;
      worst = std::max(worst, std::abs(sum - 1.0));
    }
    return CheckResult{"softmax normalization", worst <= 1e-12, "max |sum - 1| " + fmt(worst)};
  }));

  out.push_back(guarded("intervention equivalences", [&] {
    bool ok = true;
    for (const auto& s : samples) {
      const NeuronId id{1 + s.y % c.layers, (s.y * 7) % c.ffn};
      const auto run = [&](InterventionMode mode) {
        InterventionSpec spec;
        spec.add(id, mode);
        return forward(model, s.x, spec).probabilities;
      };
      ok = ok && bit_equal(run(InterventionMode::zero()), run(InterventionMode::scale(0.0)));
      ok = ok && bit_equal(run(InterventionMode::twice()), run(InterventionMode::scale(2.0)));
    }
    return CheckResult{"intervention equivalences", ok, ok ? "zero = scale(0), double = scale(2)" : "mismatch"};
  }));

  out.push_back(guarded("intervention locality", [&] {
    bool ok = true;
    const Sample& s = samples[0];
    const ForwardResult plain = forward(model, s.x);
    for (std::size_t l = 1; l <= c.layers; ++l) {
      InterventionSpec spec;
      spec.add({l, 0}, InterventionMode::zero());
      const ForwardResult r = forward(model, s.x, spec);
      for (std::size_t below = 0; below + 1 < l; ++below) {
        ok = ok && bit_equal(r.intermediates[below].values(), plain.intermediates[below].values());
      }
    }
    return CheckResult{"intervention locality", ok, ok ? "layers below untouched" : "lower layer changed"};
  }));

  out.push_back(guarded("utilization and similarity", [&] {
    std::vector<std::vector<NeuronPath>> by_class(c.classes);
    for (const auto& s : samples) by_class[s.y].push_back(activation_path(model, s, integ));
    const auto mats = build_utilization(by_class, c);
    double row_err = 0.0;
    for (const auto& u : mats) {
      for (std::size_t l = 0; l < c.layers; ++l) {
        double sum = 0.0;
        for (std::size_t ch = 0; ch < c.ffn; ++ch) sum += u.normalized.at(l, ch);
        if (u.paths > 0) row_err = std::max(row_err, std::abs(sum - 1.0));
      }
    }
    const SimilarityMatrix sim = class_similarity(mats);
    double asym = 0.0, diag = 0.0;
    for (std::size_t i = 0; i < c.classes; ++i) {
      if (!sim.zero_norm[i]) diag = std::max(diag, std::abs(sim.values.at(i, i) - 1.0));
      for (std::size_t j = 0; j < c.classes; ++j) asym = std::max(asym, std::abs(sim.values.at(i, j) - sim.values.at(j, i)));
    }
    return CheckResult{"utilization and similarity", row_err <= 1e-12 && asym == 0.0 && diag <= 1e-12,
                       "row err " + fmt(row_err) + ", asymmetry " + fmt(asym) + ", diag err " + fmt(diag)};
  }));

  out.push_back(guarded("determinism", [&] {
    const PathSearch again = search_path(model, samples[0], integ);
    bool same = again.path.neurons == search.path.neurons;
    for (std::size_t l = 0; l < c.layers; ++l) same = same && bit_equal(again.scores[l], search.scores[l]);
    std::vector<Sample> few(samples.begin(), samples.begin() + std::min<std::size_t>(4, samples.size()));
    const auto one = find_paths(model, few, Criterion::activation, integ, 1);
    const auto two = find_paths(model, few, Criterion::activation, integ, 2);
    for (std::size_t i = 0; i < few.size(); ++i) {
      same = same && one[i].neurons == two[i].neurons && one[i].score == two[i].score;
    }
    return CheckResult{"determinism", same, same ? "repeat and thread-count runs bit-identical" : "runs differ"};
  }));
  return out;
}

}  // namespace npath
