#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "npath/dataset.hpp"
#include "npath/vit.hpp"

namespace npath {

struct IntegrationConfig {
  std::size_t m = 20;
  TokenScope scope = TokenScope::all_tokens;
  OutputMode output_mode = OutputMode::probability;

  void validate() const;  // InvalidParameter if m == 0
};

// Path-selection criterion. `jas` is the neuron-path method.
enum class Criterion { jas, activation, influence_pattern };

// Report names: "neuron_path", "activation", "influence_pattern".
const char* method_name(Criterion c);
// Also accepts "jas" and dashed spellings.
Criterion parse_criterion(const std::string& s);

struct NeuronPath {
  std::vector<NeuronId> neurons;  // one per layer, layers 1..N
  double score = 0.0;             // JAS of the neurons, comparable across methods
  Criterion criterion = Criterion::jas;
  double criterion_value = 0.0;  // the method's own objective (equals score for jas)
};

// Layers must run 1, 2, ..., N with N <= L.
void validate_path(std::span<const NeuronId> neurons, const VitConfig& config);

// Right-endpoint Riemann sum (1/m) sum_{k=1..m} f(k/m).
double riemann_right(const std::function<double(double)>& f, std::size_t m);

// Joint attribution score via reverse mode: (1/m) sum_k sum_l w-bar_l . dF/dw_l
// with all listed neurons clamped to (k/m) w-bar. Neurons may be any set with
// at most one per layer.
double jas(const VitModel& model, const Sample& sample, std::span<const NeuronId> neurons,
           const IntegrationConfig& integ);
double jas(const VitModel& model, const Sample& sample, std::span<const NeuronId> neurons,
           const IntegrationConfig& integ, const NeuronActivations& clean);

// Greedy search with every candidate score retained. scores[l-1][c] is the
// objective of prefix + (l, c).
struct PathSearch {
  NeuronPath path;
  std::vector<std::vector<double>> scores;
};

PathSearch search_path(const VitModel& model, const Sample& sample, const IntegrationConfig& integ);
NeuronPath locate_path(const VitModel& model, const Sample& sample, const IntegrationConfig& integ);

struct TopkResult {
  std::vector<std::vector<NeuronId>> per_layer;  // best first
  std::vector<std::vector<double>> scores;       // aligned with per_layer
  NeuronPath chain;                              // the top-1 prefix chain
};

// The top-1 neuron extends the prefix; the t best are reported per layer.
TopkResult locate_topk(const VitModel& model, const Sample& sample, const IntegrationConfig& integ, std::size_t t);
TopkResult topk_from_search(const PathSearch& search, std::size_t t);

struct KnowledgeReport {
  Tensor scores;                     // L x n single-neuron attributions
  std::vector<NeuronId> top;         // 5 best, descending
  std::vector<std::size_t> histogram;  // per layer, members of `top`
};

KnowledgeReport knowledge_attribution(const VitModel& model, const Sample& sample, const IntegrationConfig& integ,
                                      std::size_t top_count = 5);

// Per layer, the channel with the largest clean activation summary.
NeuronPath activation_path(const VitModel& model, const Sample& sample, const IntegrationConfig& integ);
NeuronPath activation_path(const VitModel& model, const Sample& sample, const IntegrationConfig& integ,
                           const NeuronActivations& clean);

// Greedy maximization of the integrated product of neuron-to-neuron
// derivatives along the input line from the zero image. Layer 1 takes the
// largest |activation summary|.
PathSearch search_influence_pattern(const VitModel& model, const Sample& sample, const IntegrationConfig& integ);
NeuronPath influence_pattern_path(const VitModel& model, const Sample& sample, const IntegrationConfig& integ);

NeuronPath find_path(const VitModel& model, const Sample& sample, const IntegrationConfig& integ, Criterion method);

// One NDJSON line {sample_id, method, path, score, criterion_value, config}.
std::string path_record(std::size_t sample_id, const NeuronPath& path, const IntegrationConfig& integ);

}  // namespace npath
