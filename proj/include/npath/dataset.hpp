#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "npath/tensor.hpp"

namespace npath {

struct Sample {
  Tensor x;  // {1, 16, 16}
  std::size_t y = 0;
};

inline constexpr std::size_t kToyClasses = 10;
inline constexpr std::size_t kToyImageSize = 16;

// Names of the procedural classes, indexed by label.
const std::vector<std::string>& toy_class_names();

// Deterministic procedural images: sample i has label i mod 10 and is drawn
// from its own seed stream, so a dataset of n samples is a prefix of one of
// n + k samples under the same seed.
std::vector<Sample> generate_toy_dataset(std::uint64_t seed, std::size_t count);
Sample generate_toy_sample(std::uint64_t seed, std::size_t index);

// Seeds used for the canonical splits when no data file is given.
inline constexpr std::uint64_t kDefaultTrainSeed = 1;
inline constexpr std::uint64_t kDefaultTestSeed = 2;

// NDJSON, one {"y": int, "x": [floats]} object per line.
void write_dataset_ndjson(std::ostream& os, const std::vector<Sample>& samples);
std::vector<Sample> read_dataset_ndjson(std::istream& is, std::size_t channels = 1,
                                        std::size_t image_size = kToyImageSize);
void save_dataset(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> load_dataset(const std::string& path);

std::vector<std::size_t> class_histogram(const std::vector<Sample>& samples, std::size_t classes);

}  // namespace npath
