#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "npath/tensor.hpp"
#include "npath/vit.hpp"

namespace npath {

// Forward-mode evaluator for the attribution hot loops.
//
// Clamping a neuron set to alpha * w-bar and differentiating along alpha gives
// dF/dalpha = sum_l w-bar_l . dF/dw_l, which is exactly the integrand of the
// joint attribution score. Carrying that single tangent forward lets a whole
// layer of candidates share the prefix computation. Everything here is
// checked against the reverse-mode tape in the tests.
//
// An engine owns scratch buffers: use one per thread.
class TangentEngine {
 public:
  TangentEngine(const VitModel& model, TokenScope scope, OutputMode mode);

  struct LinePoint {
    double value = 0.0;       // F_x at alpha
    double derivative = 0.0;  // dF/dalpha
  };

  // F and dF/dalpha with every neuron in `neurons` clamped to alpha * w-bar.
  LinePoint line_point(const Tensor& image, std::size_t label, const NeuronActivations& clean,
                       std::span<const NeuronId> neurons, double alpha);

  // Right-endpoint Riemann estimate of the joint attribution of `neurons`.
  double joint_attribution(const Tensor& image, std::size_t label, const NeuronActivations& clean,
                           std::span<const NeuronId> neurons, std::size_t steps);

  // Joint attribution of prefix + {(layer, c)} for every channel c. Prefix
  // neurons must sit in layers below `layer`.
  std::vector<double> scan_layer(const Tensor& image, std::size_t label, const NeuronActivations& clean,
                                 std::span<const NeuronId> prefix, std::size_t layer, std::size_t steps);

  // factors[k-1][w]: derivative of the scope summary of channel w in layer
  // from.layer + 1 with respect to the summary of `from`, at input (k/m) * x.
  std::vector<std::vector<double>> influence_factors(const Tensor& image, const NeuronId& from, std::size_t steps);

 private:
  struct Mat {
    std::size_t rows = 0, cols = 0;
    std::vector<double> v;
    void shape(std::size_t r, std::size_t c) {
      rows = r;
      cols = c;
      v.resize(r * c);
    }
    double* row(std::size_t r) { return v.data() + r * cols; }
    const double* row(std::size_t r) const { return v.data() + r * cols; }
  };
  struct Dual {
    Mat x, t;
  };

  void embed(const Tensor& image, double input_scale, Dual& s);
  // s += attention(LN1(s)); with cls_only the result keeps row 0 alone.
  void attention_block(std::size_t layer, Dual& s, bool cls_only);
  void ffn_hidden(std::size_t layer, const Dual& s, Dual& h);
  void ffn_output(std::size_t layer, const Dual& h, Dual& s);
  void clamp(Dual& h, const NeuronId& id, const NeuronActivations& clean, double alpha);
  LinePoint head(const Dual& s, std::size_t label);

  const VitModel& model_;
  TokenScope scope_;
  OutputMode mode_;
  std::vector<std::size_t> rows_;

  // scratch
  Dual ln_, qkv_, heads_, proj_, pre_, hid_, pre_hidden_, cur_, base_, y_;
  Mat scores_, scores_t_, keys_, keys_t_;
};

}  // namespace npath
