#include "npath/trainer.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "npath/error.hpp"
#include "npath/rng.hpp"
#include "npath/tape.hpp"
#include "npath/vit_graph.hpp"

namespace npath {
namespace {

constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kShuffleStream = 0x5eed;

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;
};

}  // namespace

VitModel initial_model(const VitConfig& config, std::uint64_t seed) {
  return init_model(config, derive_seed(seed, kInitStream));
}

VitModel train_toy(const VitConfig& config, const std::vector<Sample>& dataset, std::uint64_t seed,
                   std::size_t epochs, const TrainOptions& options, const EpochCallback& on_epoch) {
  if (dataset.empty()) throw UsageError("train_toy: dataset is empty");
  if (options.batch_size == 0) throw InvalidParameter("train_toy: batch_size must be >= 1");
  VitModel model = initial_model(config, seed);
  auto params = model.named_tensors();

  AdamState adam;
  for (const auto& [name, t] : params) {
    adam.m.emplace_back(t->numel(), 0.0);
    adam.v.emplace_back(t->numel(), 0.0);
  }
  std::vector<std::vector<double>> grads(params.size());

  const std::size_t batches_per_epoch = (dataset.size() + options.batch_size - 1) / options.batch_size;
  const std::size_t total_steps = batches_per_epoch * epochs;
  Rng shuffle_rng(derive_seed(seed, kShuffleStream));
  std::vector<std::size_t> order(dataset.size());

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t stop = std::min(order.size(), start + options.batch_size);
      for (std::size_t p = 0; p < params.size(); ++p) grads[p].assign(params[p].second->numel(), 0.0);
      for (std::size_t b = start; b < stop; ++b) {
        const Sample& s = dataset[order[b]];
        Tape tape;
        GraphOptions go;
        go.weights_require_grad = true;
        const VitGraph g = build_vit_graph(tape, model, s.x, go);
        const Var loss = tape.cross_entropy(g.logits, s.y);
        tape.backward(loss);
        const double lv = tape.value(loss).item();
        if (!std::isfinite(lv)) {
          throw TrainingError("loss became non-finite in epoch " + std::to_string(epoch + 1), static_cast<int>(epoch + 1));
        }
        loss_sum += lv;
        const auto& probs = tape.value(g.probs).values();
        std::size_t arg = 0;
        for (std::size_t k = 1; k < probs.size(); ++k)
          if (probs[k] > probs[arg]) arg = k;
        if (arg == s.y) ++correct;
        for (std::size_t p = 0; p < params.size(); ++p) {
          const Tensor gp = tape.grad(g.weights[p]);
          for (std::size_t i = 0; i < gp.numel(); ++i) grads[p][i] += gp[i];
        }
      }

      ++adam.step;
      const double scale = 1.0 / static_cast<double>(stop - start);
      double lr = options.learning_rate;
      if (options.cosine_decay && total_steps > 0) {
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(adam.step - 1) /
                                    static_cast<double>(total_steps)));
      }
      const double bc1 = 1.0 - std::pow(options.beta1, static_cast<double>(adam.step));
      const double bc2 = 1.0 - std::pow(options.beta2, static_cast<double>(adam.step));
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto w = params[p].second->mutable_data();
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double gi = grads[p][i] * scale;
          adam.m[p][i] = options.beta1 * adam.m[p][i] + (1.0 - options.beta1) * gi;
          adam.v[p][i] = options.beta2 * adam.v[p][i] + (1.0 - options.beta2) * gi * gi;
          const double mhat = adam.m[p][i] / bc1;
          const double vhat = adam.v[p][i] / bc2;
          w[i] -= lr * mhat / (std::sqrt(vhat) + options.adam_eps);
        }
      }
    }
    if (on_epoch) {
      on_epoch({epoch + 1, loss_sum / static_cast<double>(dataset.size()),
                static_cast<double>(correct) / static_cast<double>(dataset.size())});
    }
  }
  return model;
}

double accuracy(const VitModel& model, const std::vector<Sample>& samples) {
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    if (forward(model, s.x).predicted() == s.y) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

}  // namespace npath
