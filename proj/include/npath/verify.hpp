#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "npath/attribution.hpp"
#include "npath/gradcheck.hpp"

namespace npath {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Central-difference check of dp(y|x)/dtheta over `coords` weight coordinates
// drawn uniformly from all model parameters.
GradCheckResult model_gradient_check(const VitModel& model, const Sample& sample, std::size_t coords,
                                     std::uint64_t seed, double h = 1e-5,
                                     OutputMode mode = OutputMode::probability);

struct CompletenessRow {
  std::size_t sample = 0;
  std::vector<NeuronId> path;
  double delta_f = 0.0;  // F(alpha = 1) - F(alpha = 0)
  double jas_low = 0.0, jas_high = 0.0;
  double residual_low = 0.0, residual_high = 0.0;
};

// Random full-length paths on random samples, scored with the reverse-mode
// jas at m_low and m_high.
std::vector<CompletenessRow> completeness_check(const VitModel& model, const std::vector<Sample>& samples,
                                                std::size_t count, std::uint64_t seed, std::size_t m_low,
                                                std::size_t m_high, TokenScope scope);

// JAS of one path at each m in `grid`.
std::vector<double> riemann_sequence(const VitModel& model, const Sample& sample, std::span<const NeuronId> path,
                                     const std::vector<std::size_t>& grid, TokenScope scope);

// Two layers, six FFN channels: small enough to enumerate every path.
VitConfig micro_config();
VitModel micro_model(std::uint64_t seed);

struct OracleReport {
  double path_diff = 0.0;       // max |fast - naive| over every greedy score
  double influence_diff = 0.0;  // same for the influence pattern search
  double knowledge_diff = 0.0;  // same for the L x n attribution table
  bool same_choices = false;    // identical chosen neurons for both searches
  std::size_t enumerated = 0;
  double greedy_score = 0.0, global_score = 0.0;
  std::vector<NeuronId> global_path;
};

OracleReport oracle_equivalence(const VitModel& model, const Sample& sample, const IntegrationConfig& integ);

// The invariant suite behind `neuronpath verify`.
std::vector<CheckResult> run_verify_suite(const VitModel& model, const std::vector<Sample>& samples,
                                          std::uint64_t seed);

}  // namespace npath
