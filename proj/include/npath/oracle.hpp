#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "npath/attribution.hpp"

namespace npath {

// Deliberately plain reference versions of the search algorithms. They use
// only the reverse-mode tape, evaluate every score from scratch and share no
// code with the forward-mode engine, so agreement is evidence for both.

PathSearch naive_search_path(const VitModel& model, const Sample& sample, const IntegrationConfig& integ);

PathSearch naive_search_influence_pattern(const VitModel& model, const Sample& sample, const IntegrationConfig& integ);

// L x n single-neuron attributions.
Tensor naive_knowledge_scores(const VitModel& model, const Sample& sample, const IntegrationConfig& integ);

// d summary(w in from.layer + 1) / d summary(from) at input alpha * x.
std::vector<double> naive_influence_factor(const VitModel& model, const Tensor& image, const NeuronId& from,
                                           double alpha, TokenScope scope);

struct ExhaustiveResult {
  std::vector<std::vector<NeuronId>> paths;  // every full-length path, lexicographic
  std::vector<double> scores;                // JAS of each
  std::size_t best = 0;                      // first maximum
};

// JAS of all n^L paths. Only sensible on micro models.
ExhaustiveResult exhaustive_paths(const VitModel& model, const Sample& sample, const IntegrationConfig& integ);

}  // namespace npath
