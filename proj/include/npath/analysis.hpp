#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "npath/attribution.hpp"
#include "npath/dataset.hpp"
#include "npath/vit.hpp"

namespace npath {

// --- intervention metrics ---------------------------------------------------

enum class Operation { none, zero, twice };

const char* to_string(Operation op);  // "none", "zero", "double"
Operation parse_operation(const std::string& s);

// (P~ - P) / P. Throws InvalidParameter when P <= 0.
double probability_deviation(double p, double p_tilde);

struct DeviationReport {
  Criterion method = Criterion::jas;
  Operation operation = Operation::none;
  TokenScope scope = TokenScope::all_tokens;

  // Included samples only, in dataset order.
  std::vector<std::size_t> sample_ids;
  std::vector<double> p_before, p_after, deviations;
  std::vector<double> path_scores;  // JAS of each sample's path
  // Samples whose ground-truth probability was exactly zero.
  std::vector<std::size_t> excluded;

  double mean = 0.0;
  double median = 0.0;
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  double delta_accuracy = 0.0;
};

// Applies `op` to every neuron of paths[i] on samples[i] and measures the
// ground-truth probability and accuracy change.
DeviationReport measure_deviation(const VitModel& model, const std::vector<Sample>& samples,
                                  const std::vector<NeuronPath>& paths, Operation op, TokenScope scope,
                                  std::size_t threads = 1);

// Locates each sample's path with `method`, then measures as above.
DeviationReport intervene_and_measure(const VitModel& model, const std::vector<Sample>& samples, Criterion method,
                                      Operation op, const IntegrationConfig& integ, std::size_t threads = 1);

// Paths of every sample under one method, computed in parallel.
std::vector<NeuronPath> find_paths(const VitModel& model, const std::vector<Sample>& samples, Criterion method,
                                   const IntegrationConfig& integ, std::size_t threads = 1);

double mean_of(const std::vector<double>& v);
double median_of(std::vector<double> v);

// --- utilization and similarity ---------------------------------------------

struct UtilizationMatrix {
  std::size_t class_id = 0;
  std::size_t paths = 0;
  std::vector<std::vector<std::size_t>> counts;  // L x n
  Tensor normalized;                             // L x n, rows sum to 1 or are zero
};

// paths_by_class[c] holds the full-length paths of class c.
std::vector<UtilizationMatrix> build_utilization(const std::vector<std::vector<NeuronPath>>& paths_by_class,
                                                 const VitConfig& config);

struct SimilarityMatrix {
  Tensor values;                // C x C cosine similarities
  std::vector<bool> zero_norm;  // classes whose matrix is all zero
  bool warning = false;         // any zero_norm
};

SimilarityMatrix class_similarity(const std::vector<UtilizationMatrix>& matrices);

struct Neighbors {
  std::vector<std::size_t> top;     // most similar first
  std::vector<std::size_t> bottom;  // least similar first
};

// Per class, the ceil(q * (C - 1)) most and least similar other classes.
std::vector<Neighbors> similarity_neighbors(const SimilarityMatrix& sim, double q);

// --- pruning ----------------------------------------------------------------

struct PruneConfig {
  std::vector<std::size_t> t_values{1, 5, 10, 30, 50};
  std::vector<double> p_values{0.1, 0.3, 0.5, 1.0};
  std::uint64_t split_seed = 0;
  double probe_fraction = 0.8;

  void validate(const VitConfig& config) const;
};

struct PruneCell {
  std::size_t t = 0;
  double p = 0.0;
  std::vector<double> class_accuracy;
  double accuracy = 0.0;  // pooled over every test-split sample
};

struct PruneResult {
  std::uint64_t split_seed = 0;
  std::vector<std::vector<std::size_t>> probe, test;  // dataset indices per class
  std::vector<double> class_baseline;
  double baseline = 0.0;
  std::vector<PruneCell> cells;  // t-major, then p, in config order
};

// searches, when given, holds search_path for every dataset index and is
// reused instead of searching again.
PruneResult prune_and_eval(const VitModel& model, const std::vector<Sample>& dataset, const PruneConfig& config,
                           const IntegrationConfig& integ, std::size_t threads = 1,
                           const std::vector<PathSearch>* searches = nullptr);

std::vector<PathSearch> search_paths(const VitModel& model, const std::vector<Sample>& samples,
                                     const IntegrationConfig& integ, std::size_t threads = 1);

// Per layer, the t channels selected most often across `sets` (each set lists
// neurons of one image); ties go to the lower channel.
std::vector<std::vector<std::size_t>> select_by_frequency(const std::vector<std::vector<NeuronId>>& sets,
                                                          const VitConfig& config, std::size_t t);

// --- complexity benchmark ---------------------------------------------------

struct BenchRow {
  std::size_t m = 0;
  double seconds = 0.0;     // best of the repeats
  double ratio = 0.0;       // seconds / previous row's seconds (0 for the first)
  double predicted = 0.0;   // m / previous m
};

struct BenchReport {
  std::size_t layers = 0, ffn = 0, seq_len = 0, hidden = 0;
  std::vector<BenchRow> rows;
};

// Times a full locate_path for every m in `m_grid`.
BenchReport complexity_benchmark(const VitModel& model, const Sample& sample, const std::vector<std::size_t>& m_grid,
                                 std::size_t repeats = 3, TokenScope scope = TokenScope::all_tokens);

// --- writers ----------------------------------------------------------------

void write_deviation_csv(std::ostream& os, const DeviationReport& r);
void write_utilization_ndjson(std::ostream& os, const std::vector<UtilizationMatrix>& ms);
// Inverse of write_utilization_ndjson; FormatError on malformed lines.
std::vector<UtilizationMatrix> read_utilization_ndjson(std::istream& is);
void write_similarity_csv(std::ostream& os, const SimilarityMatrix& s);
void write_prune_csv(std::ostream& os, const PruneResult& r);
void write_prune_svg(std::ostream& os, const PruneResult& r);
// Long-form per-(class, layer, channel) selection counts for a violin plot.
void write_frequency_csv(std::ostream& os, const std::vector<UtilizationMatrix>& ms);
void write_bench_csv(std::ostream& os, const BenchReport& r);

// Shortest round-trip decimal text for a double.
std::string format_double(double v);

}  // namespace npath
