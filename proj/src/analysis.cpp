#include "npath/analysis.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <numeric>
#include <istream>
#include <ostream>

#include "json.hpp"
#include "npath/error.hpp"
#include "npath/parallel.hpp"
#include "npath/rng.hpp"

namespace npath {
namespace {

constexpr std::uint64_t kMaskStream = 0x6d61736b;

InterventionSpec operation_spec(const NeuronPath& path, Operation op, TokenScope scope) {
  InterventionSpec spec(scope);
  if (op == Operation::none) return spec;
  for (const auto& id : path.neurons) {
    spec.add(id, op == Operation::zero ? InterventionMode::zero() : InterventionMode::twice());
  }
  return spec;
}

std::vector<std::size_t> shuffled(std::vector<std::size_t> v, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
  return v;
}

}  // namespace

const char* to_string(Operation op) {
  switch (op) {
    case Operation::none:
      return "none";
    case Operation::zero:
      return "zero";
    case Operation::twice:
      return "double";
  }
  return "?";
}

Operation parse_operation(const std::string& s) {
  if (s == "none") return Operation::none;
  if (s == "zero" || s == "remove") return Operation::zero;
  if (s == "double" || s == "enhance") return Operation::twice;
  throw UsageError("unknown operation '" + s + "' (expected none, zero or double)");
}

double probability_deviation(double p, double p_tilde) {
  if (!(p > 0.0)) throw InvalidParameter("probability deviation needs P > 0");
  return (p_tilde - p) / p;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

std::vector<NeuronPath> find_paths(const VitModel& model, const std::vector<Sample>& samples, Criterion method,
                                   const IntegrationConfig& integ, std::size_t threads) {
  std::vector<NeuronPath> paths(samples.size());
  parallel_for(samples.size(), threads,
               [&](std::size_t i, std::size_t) { paths[i] = find_path(model, samples[i], integ, method); });
  return paths;
}

DeviationReport measure_deviation(const VitModel& model, const std::vector<Sample>& samples,
                                  const std::vector<NeuronPath>& paths, Operation op, TokenScope scope,
                                  std::size_t threads) {
  if (paths.size() != samples.size()) throw UsageError("one path per sample is required");
  struct Row {
    double p = 0.0, p_tilde = 0.0;
    bool correct_before = false, correct_after = false;
  };
  std::vector<Row> rows(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i, std::size_t) {
    const Sample& s = samples[i];
    const ForwardResult before = forward(model, s.x);
    const InterventionSpec spec = operation_spec(paths[i], op, scope);
    const ForwardResult after = spec.empty() ? before : forward(model, s.x, spec);
    rows[i] = {before.probabilities[s.y], after.probabilities[s.y], before.predicted() == s.y,
               after.predicted() == s.y};
  });

  DeviationReport r;
  r.method = paths.empty() ? Criterion::jas : paths.front().criterion;
  r.operation = op;
  r.scope = scope;
  std::size_t before = 0, after = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    before += rows[i].correct_before;
    after += rows[i].correct_after;
    if (!(rows[i].p > 0.0)) {
      r.excluded.push_back(i);
      continue;
    }
    r.sample_ids.push_back(i);
    r.p_before.push_back(rows[i].p);
    r.p_after.push_back(rows[i].p_tilde);
    r.deviations.push_back(probability_deviation(rows[i].p, rows[i].p_tilde));
    r.path_scores.push_back(paths[i].score);
  }
  r.mean = mean_of(r.deviations);
  r.median = median_of(r.deviations);
  if (!rows.empty()) {
    r.accuracy_before = static_cast<double>(before) / static_cast<double>(rows.size());
    r.accuracy_after = static_cast<double>(after) / static_cast<double>(rows.size());
  }
  r.delta_accuracy = r.accuracy_after - r.accuracy_before;
  return r;
}

DeviationReport intervene_and_measure(const VitModel& model, const std::vector<Sample>& samples, Criterion method,
                                      Operation op, const IntegrationConfig& integ, std::size_t threads) {
  const auto paths = find_paths(model, samples, method, integ, threads);
  DeviationReport r = measure_deviation(model, samples, paths, op, integ.scope, threads);
  r.method = method;
  return r;
}

std::vector<UtilizationMatrix> build_utilization(const std::vector<std::vector<NeuronPath>>& paths_by_class,
                                                 const VitConfig& config) {
  std::vector<UtilizationMatrix> out;
  for (std::size_t c = 0; c < paths_by_class.size(); ++c) {
    UtilizationMatrix u;
    u.class_id = c;
    u.counts.assign(config.layers, std::vector<std::size_t>(config.ffn, 0));
    for (const auto& p : paths_by_class[c]) {
      if (p.neurons.size() != config.layers) {
        throw UsageError("utilization needs full-length paths: got " + std::to_string(p.neurons.size()) +
                         " neurons, model has " + std::to_string(config.layers) + " layers");
      }
      validate_path(p.neurons, config);
      for (const auto& id : p.neurons) ++u.counts[id.layer - 1][id.channel];
      ++u.paths;
    }
    u.normalized = Tensor({config.layers, config.ffn});
    auto nd = u.normalized.mutable_data();
    for (std::size_t l = 0; l < config.layers; ++l) {
      std::size_t total = 0;
      for (std::size_t v : u.counts[l]) total += v;
      if (total == 0) continue;
      for (std::size_t ch = 0; ch < config.ffn; ++ch) {
        nd[l * config.ffn + ch] = static_cast<double>(u.counts[l][ch]) / static_cast<double>(total);
      }
    }
    out.push_back(std::move(u));
  }
  return out;
}

SimilarityMatrix class_similarity(const std::vector<UtilizationMatrix>& matrices) {
  const std::size_t c = matrices.size();
  if (c < 2) throw UsageError("class similarity needs at least 2 classes");
  std::vector<double> norms(c);
  for (std::size_t i = 0; i < c; ++i) {
    double s = 0.0;
    for (double v : matrices[i].normalized.data()) s += v * v;
    norms[i] = std::sqrt(s);
  }
  SimilarityMatrix out;
  out.values = Tensor({c, c});
  out.zero_norm.assign(c, false);
  auto sd = out.values.mutable_data();
  for (std::size_t i = 0; i < c; ++i) {
    out.zero_norm[i] = norms[i] == 0.0;
    out.warning = out.warning || out.zero_norm[i];
    for (std::size_t j = i; j < c; ++j) {
      double v = 0.0;
      if (norms[i] > 0.0 && norms[j] > 0.0) {
        const auto a = matrices[i].normalized.data();
        const auto b = matrices[j].normalized.data();
        if (a.size() != b.size()) throw DimensionError("utilization matrices differ in shape");
        double dot = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
        v = dot / (norms[i] * norms[j]);
      }
      sd[i * c + j] = v;
      sd[j * c + i] = v;
    }
  }
  return out;
}

std::vector<Neighbors> similarity_neighbors(const SimilarityMatrix& sim, double q) {
  if (!(q > 0.0 && q <= 1.0)) throw InvalidParameter("neighbor fraction q must lie in (0, 1]");
  const std::size_t c = sim.values.rows();
  const auto count = static_cast<std::size_t>(std::ceil(q * static_cast<double>(c - 1)));
  std::vector<Neighbors> out(c);
  for (std::size_t i = 0; i < c; ++i) {
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < c; ++j)
      if (j != i) others.push_back(j);
    auto by_high = others;
    std::stable_sort(by_high.begin(), by_high.end(),
                     [&](std::size_t a, std::size_t b) { return sim.values.at(i, a) > sim.values.at(i, b); });
    auto by_low = others;
    std::stable_sort(by_low.begin(), by_low.end(),
                     [&](std::size_t a, std::size_t b) { return sim.values.at(i, a) < sim.values.at(i, b); });
    out[i].top.assign(by_high.begin(), by_high.begin() + static_cast<std::ptrdiff_t>(count));
    out[i].bottom.assign(by_low.begin(), by_low.begin() + static_cast<std::ptrdiff_t>(count));
  }
  return out;
}

void PruneConfig::validate(const VitConfig& config) const {
  if (t_values.empty() || p_values.empty()) throw UsageError("pruning needs at least one t and one p");
  for (std::size_t t : t_values) {
    if (t < 1 || t > config.ffn) {
      throw UsageError("retained count t=" + std::to_string(t) + " outside [1, " + std::to_string(config.ffn) + "]");
    }
  }
  for (double p : p_values) {
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidParameter("mask fraction p=" + format_double(p) + " outside [0, 1]");
  }
  if (!(probe_fraction > 0.0 && probe_fraction < 1.0)) throw InvalidParameter("probe fraction must lie in (0, 1)");
}

std::vector<PathSearch> search_paths(const VitModel& model, const std::vector<Sample>& samples,
                                     const IntegrationConfig& integ, std::size_t threads) {
  std::vector<PathSearch> out(samples.size());
  parallel_for(samples.size(), threads,
               [&](std::size_t i, std::size_t) { out[i] = search_path(model, samples[i], integ); });
  return out;
}

std::vector<std::vector<std::size_t>> select_by_frequency(const std::vector<std::vector<NeuronId>>& sets,
                                                          const VitConfig& config, std::size_t t) {
  if (t < 1 || t > config.ffn) throw UsageError("selection size t outside [1, n]");
  std::vector<std::vector<std::size_t>> freq(config.layers, std::vector<std::size_t>(config.ffn, 0));
  for (const auto& set : sets) {
    for (const auto& id : set) {
      validate_neuron(id, config);
      ++freq[id.layer - 1][id.channel];
    }
  }
  std::vector<std::vector<std::size_t>> out;
  for (const auto& f : freq) {
    std::vector<std::size_t> idx(config.ffn);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return f[a] > f[b]; });
    idx.resize(t);
    std::sort(idx.begin(), idx.end());
    out.push_back(std::move(idx));
  }
  return out;
}

PruneResult prune_and_eval(const VitModel& model, const std::vector<Sample>& dataset, const PruneConfig& config,
                           const IntegrationConfig& integ, std::size_t threads,
                           const std::vector<PathSearch>* searches) {
  const VitConfig& vc = model.config;
  config.validate(vc);
  integ.validate();
  if (searches && searches->size() != dataset.size()) throw UsageError("cached searches do not match the dataset");

  PruneResult r;
  r.split_seed = config.split_seed;
  r.probe.resize(vc.classes);
  r.test.resize(vc.classes);
  std::vector<std::vector<std::size_t>> members(vc.classes);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].y >= vc.classes) throw IndexError("label " + std::to_string(dataset[i].y) + " out of range");
    members[dataset[i].y].push_back(i);
  }
  for (std::size_t c = 0; c < vc.classes; ++c) {
    if (members[c].empty()) continue;
    if (members[c].size() < 5) {
      throw UsageError("class " + std::to_string(c) + " has " + std::to_string(members[c].size()) +
                       " samples; pruning needs at least 5 per class");
    }
    const auto order = shuffled(members[c], derive_seed(config.split_seed, c));
    const auto wanted = static_cast<std::size_t>(std::llround(config.probe_fraction * static_cast<double>(order.size())));
    const std::size_t probe = std::clamp<std::size_t>(wanted, 1, order.size() - 1);
    r.probe[c].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(probe));
    r.test[c].assign(order.begin() + static_cast<std::ptrdiff_t>(probe), order.end());
  }

  // Path searches for the probe images that are not cached.
  std::vector<PathSearch> local;
  std::vector<std::size_t> slot(dataset.size(), dataset.size());
  if (!searches) {
    std::vector<std::size_t> need;
    for (const auto& p : r.probe) need.insert(need.end(), p.begin(), p.end());
    std::sort(need.begin(), need.end());
    local.resize(need.size());
    parallel_for(need.size(), threads,
                 [&](std::size_t i, std::size_t) { local[i] = search_path(model, dataset[need[i]], integ); });
    for (std::size_t i = 0; i < need.size(); ++i) slot[need[i]] = i;
  }
  auto search_of = [&](std::size_t idx) -> const PathSearch& { return searches ? (*searches)[idx] : local[slot[idx]]; };

  auto correct_count = [&](const std::vector<std::size_t>& idx, const InterventionSpec& spec) {
    std::vector<char> ok(idx.size(), 0);
    parallel_for(idx.size(), threads, [&](std::size_t i, std::size_t) {
      const Sample& s = dataset[idx[i]];
      ok[i] = forward(model, s.x, spec).predicted() == s.y;
    });
    return static_cast<std::size_t>(std::count(ok.begin(), ok.end(), 1));
  };

  std::size_t total_test = 0, base_correct = 0;
  r.class_baseline.assign(vc.classes, 0.0);
  for (std::size_t c = 0; c < vc.classes; ++c) {
    if (r.test[c].empty()) continue;
    const std::size_t k = correct_count(r.test[c], InterventionSpec{});
    r.class_baseline[c] = static_cast<double>(k) / static_cast<double>(r.test[c].size());
    base_correct += k;
    total_test += r.test[c].size();
  }
  r.baseline = total_test ? static_cast<double>(base_correct) / static_cast<double>(total_test) : 0.0;

  // One fixed ordering of all neurons per (class, p); for each t the first
  // round(p * |non-selected|) non-selected neurons in that order are zeroed.
  const std::size_t total_neurons = vc.layers * vc.ffn;
  std::vector<std::size_t> all(total_neurons);
  std::iota(all.begin(), all.end(), std::size_t{0});

  for (std::size_t t : config.t_values) {
    std::vector<std::vector<std::vector<std::size_t>>> selected(vc.classes);
    for (std::size_t c = 0; c < vc.classes; ++c) {
      if (r.probe[c].empty()) continue;
      std::vector<std::vector<NeuronId>> sets;
      for (std::size_t idx : r.probe[c]) {
        const TopkResult top = topk_from_search(search_of(idx), t);
        std::vector<NeuronId> flat;
        for (const auto& layer : top.per_layer) flat.insert(flat.end(), layer.begin(), layer.end());
        sets.push_back(std::move(flat));
      }
      selected[c] = select_by_frequency(sets, vc, t);
    }
    for (double p : config.p_values) {
      PruneCell cell;
      cell.t = t;
      cell.p = p;
      cell.class_accuracy.assign(vc.classes, 0.0);
      std::size_t correct = 0;
      for (std::size_t c = 0; c < vc.classes; ++c) {
        if (r.test[c].empty()) continue;
        std::vector<char> keep(total_neurons, 0);
        for (std::size_t l = 0; l < vc.layers; ++l)
          for (std::size_t ch : selected[c][l]) keep[l * vc.ffn + ch] = 1;
        const auto order =
            shuffled(all, derive_seed(derive_seed(config.split_seed ^ kMaskStream, c), std::bit_cast<std::uint64_t>(p)));
        std::vector<std::size_t> candidates;
        for (std::size_t v : order)
          if (!keep[v]) candidates.push_back(v);
        const auto masked = static_cast<std::size_t>(std::llround(p * static_cast<double>(candidates.size())));
        InterventionSpec spec(TokenScope::all_tokens);
        for (std::size_t i = 0; i < masked; ++i) {
          spec.add({candidates[i] / vc.ffn + 1, candidates[i] % vc.ffn}, InterventionMode::zero());
        }
        const std::size_t k = correct_count(r.test[c], spec);
        cell.class_accuracy[c] = static_cast<double>(k) / static_cast<double>(r.test[c].size());
        correct += k;
      }
      cell.accuracy = total_test ? static_cast<double>(correct) / static_cast<double>(total_test) : 0.0;
      r.cells.push_back(std::move(cell));
    }
  }
  return r;
}

BenchReport complexity_benchmark(const VitModel& model, const Sample& sample, const std::vector<std::size_t>& m_grid,
                                 std::size_t repeats, TokenScope scope) {
  const VitConfig& c = model.config;
  if (m_grid.empty()) throw InvalidParameter("benchmark needs at least one m");
  for (std::size_t m : m_grid) {
    if (m < 1) throw InvalidParameter("benchmark step count m must be >= 1");
  }
  if (repeats < 1) throw InvalidParameter("benchmark repeats must be >= 1");

  BenchReport r{c.layers, c.ffn, c.seq_len(), c.hidden, {}};
  for (std::size_t m : m_grid) {
    IntegrationConfig integ;
    integ.m = m;
    integ.scope = scope;
    double best = 0.0;
    for (std::size_t rep = 0; rep < repeats; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      const NeuronPath path = locate_path(model, sample, integ);
      const auto t1 = std::chrono::steady_clock::now();
      if (path.neurons.size() != c.layers) throw NumericError("benchmark search returned a short path");
      const double s = std::chrono::duration<double>(t1 - t0).count();
      if (rep == 0 || s < best) best = s;
    }
    BenchRow row{m, best, 0.0, 0.0};
    if (!r.rows.empty()) {
      row.ratio = best / r.rows.back().seconds;
      row.predicted = static_cast<double>(m) / static_cast<double>(r.rows.back().m);
    }
    r.rows.push_back(row);
  }
  return r;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_deviation_csv(std::ostream& os, const DeviationReport& r) {
  os << "sample_id,method,operation,scope,p_before,p_after,deviation,path_jas\n";
  for (std::size_t i = 0; i < r.sample_ids.size(); ++i) {
    os << r.sample_ids[i] << ',' << method_name(r.method) << ',' << to_string(r.operation) << ','
       << to_string(r.scope) << ',' << format_double(r.p_before[i]) << ',' << format_double(r.p_after[i]) << ','
       << format_double(r.deviations[i]) << ',' << format_double(r.path_scores[i]) << '\n';
  }
}

void write_utilization_ndjson(std::ostream& os, const std::vector<UtilizationMatrix>& ms) {
  for (const auto& u : ms) {
    nlohmann::ordered_json j;
    j["class"] = u.class_id;
    j["paths"] = u.paths;
    j["counts"] = u.counts;
    auto rows = nlohmann::ordered_json::array();
    const std::size_t n = u.normalized.cols();
    for (std::size_t l = 0; l < u.normalized.rows(); ++l) {
      const auto row = u.normalized.data().subspan(l * n, n);
      rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    j["normalized"] = std::move(rows);
    os << j.dump() << '\n';
  }
}

std::vector<UtilizationMatrix> read_utilization_ndjson(std::istream& is) {
  std::vector<UtilizationMatrix> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      UtilizationMatrix u;
      u.class_id = j.at("class").get<std::size_t>();
      u.paths = j.value("paths", std::size_t{0});
      u.counts = j.at("counts").get<std::vector<std::vector<std::size_t>>>();
      const auto rows = j.at("normalized").get<std::vector<std::vector<double>>>();
      const std::size_t n = rows.empty() ? 0 : rows.front().size();
      std::vector<double> flat;
      for (const auto& r : rows) {
        if (r.size() != n) throw FormatError("ragged normalized matrix");
        flat.insert(flat.end(), r.begin(), r.end());
      }
      u.normalized = Tensor({rows.size(), n}, std::move(flat));
      out.push_back(std::move(u));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("utilization line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_similarity_csv(std::ostream& os, const SimilarityMatrix& s) {
  const std::size_t c = s.values.rows();
  os << "class";
  for (std::size_t j = 0; j < c; ++j) os << ',' << j;
  os << '\n';
  for (std::size_t i = 0; i < c; ++i) {
    os << i;
    for (std::size_t j = 0; j < c; ++j) os << ',' << format_double(s.values.at(i, j));
    os << '\n';
  }
}

void write_prune_csv(std::ostream& os, const PruneResult& r) {
  os << "t,p,class,accuracy\n";
  for (std::size_t c = 0; c < r.class_baseline.size(); ++c) {
    if (r.test[c].empty()) continue;
    os << "baseline,0," << c << ',' << format_double(r.class_baseline[c]) << '\n';
  }
  os << "baseline,0,all," << format_double(r.baseline) << '\n';
  for (const auto& cell : r.cells) {
    for (std::size_t c = 0; c < cell.class_accuracy.size(); ++c) {
      if (r.test[c].empty()) continue;
      os << cell.t << ',' << format_double(cell.p) << ',' << c << ',' << format_double(cell.class_accuracy[c]) << '\n';
    }
    os << cell.t << ',' << format_double(cell.p) << ",all," << format_double(cell.accuracy) << '\n';
  }
}

void write_prune_svg(std::ostream& os, const PruneResult& r) {
  std::vector<std::size_t> ts;
  std::vector<double> ps;
  for (const auto& cell : r.cells) {
    if (std::find(ts.begin(), ts.end(), cell.t) == ts.end()) ts.push_back(cell.t);
    if (std::find(ps.begin(), ps.end(), cell.p) == ps.end()) ps.push_back(cell.p);
  }
  const double w = 480, h = 320, left = 50, right = 20, top = 20, bottom = 40;
  const double pw = w - left - right, ph = h - top - bottom;
  auto x_of = [&](std::size_t i) { return left + (ts.size() > 1 ? pw * static_cast<double>(i) / static_cast<double>(ts.size() - 1) : pw / 2); };
  auto y_of = [&](double acc) { return top + ph * (1.0 - acc); };
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double acc = k / 4.0;
    os << "<text x=\"" << left - 8 << "\" y=\"" << y_of(acc) + 4 << "\" font-size=\"10\" text-anchor=\"end\">"
       << format_double(acc) << "</text>\n";
  }
  for (std::size_t i = 0; i < ts.size(); ++i) {
    os << "<text x=\"" << x_of(i) << "\" y=\"" << top + ph + 16 << "\" font-size=\"10\" text-anchor=\"middle\">t="
       << ts[i] << "</text>\n";
  }
  os << "<line x1=\"" << left << "\" y1=\"" << y_of(r.baseline) << "\" x2=\"" << left + pw << "\" y2=\""
     << y_of(r.baseline) << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  for (std::size_t j = 0; j < ps.size(); ++j) {
    os << "<polyline fill=\"none\" stroke=\"" << colors[j % 6] << "\" points=\"";
    for (std::size_t i = 0; i < ts.size(); ++i) {
      for (const auto& cell : r.cells) {
        if (cell.t == ts[i] && cell.p == ps[j]) os << x_of(i) << ',' << y_of(cell.accuracy) << ' ';
      }
    }
    os << "\"/>\n";
    os << "<text x=\"" << left + pw - 4 << "\" y=\"" << top + 12 + 12 * static_cast<double>(j)
       << "\" font-size=\"10\" text-anchor=\"end\" fill=\"" << colors[j % 6] << "\">p=" << format_double(ps[j])
       << "</text>\n";
  }
  os << "</svg>\n";
}

void write_frequency_csv(std::ostream& os, const std::vector<UtilizationMatrix>& ms) {
  os << "class,layer,channel,count\n";
  for (const auto& u : ms) {
    for (std::size_t l = 0; l < u.counts.size(); ++l) {
      for (std::size_t ch = 0; ch < u.counts[l].size(); ++ch) {
        os << u.class_id << ',' << l + 1 << ',' << ch << ',' << u.counts[l][ch] << '\n';
      }
    }
  }
}

void write_bench_csv(std::ostream& os, const BenchReport& r) {
  os << "layers,ffn,seq_len,hidden,m,seconds,ratio,predicted_ratio\n";
  for (const auto& row : r.rows) {
    os << r.layers << ',' << r.ffn << ',' << r.seq_len << ',' << r.hidden << ',' << row.m
       << ',' << format_double(row.seconds) << ',' << format_double(row.ratio) << ','
       << format_double(row.predicted) << '\n';
  }
}

}  // namespace npath
