#pragma once

#include <cstddef>
#include <vector>

#include "npath/tape.hpp"
#include "npath/vit.hpp"

namespace npath {

// A hook on one FFN intermediate column, applied in list order.
struct ColumnHook {
  enum class Kind { scale, overwrite, shift };
  Kind kind = Kind::scale;
  std::size_t layer = 1;  // 1-based
  std::size_t channel = 0;
  std::vector<std::size_t> rows;
  double factor = 1.0;  // scale
  Var operand;          // overwrite values (1-D, per row) or shift delta (scalar)
};

struct GraphOptions {
  // Record weights as gradient-carrying leaves (training, weight grad checks).
  bool weights_require_grad = false;
  std::vector<ColumnHook> hooks;
};

struct VitGraph {
  Var logits;  // 1 x classes
  Var probs;   // 1 x classes
  std::vector<Var> hidden;  // per layer T x n after hooks
  std::vector<Var> weights; // parallel to VitModel::named_tensors()
};

VitGraph build_vit_graph(Tape& tape, const VitModel& model, const Tensor& image, const GraphOptions& options);

// F_x as a 1 x 1 node: probability or logit of `label`.
Var output_scalar(Tape& tape, const VitGraph& graph, std::size_t label, OutputMode mode);

// Translates a user intervention spec into hooks.
std::vector<ColumnHook> intervention_hooks(Tape& tape, const InterventionSpec& spec, const VitConfig& config);

}  // namespace npath
