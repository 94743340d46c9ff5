#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "npath/dataset.hpp"
#include "npath/vit.hpp"

namespace npath {

struct TrainOptions {
  std::size_t batch_size = 32;
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Cosine decay from learning_rate to zero over all steps.
  bool cosine_decay = true;
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Cross-entropy training with Adam. Initialization, shuffling and therefore
// the final weights are a pure function of (config, dataset, seed, epochs).
// Throws TrainingError carrying the epoch if the loss turns non-finite.
VitModel train_toy(const VitConfig& config, const std::vector<Sample>& dataset, std::uint64_t seed,
                   std::size_t epochs, const TrainOptions& options = {}, const EpochCallback& on_epoch = {});

// The initialization train_toy starts from for `seed`.
VitModel initial_model(const VitConfig& config, std::uint64_t seed);

double accuracy(const VitModel& model, const std::vector<Sample>& samples);

}  // namespace npath
