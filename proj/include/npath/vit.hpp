#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "npath/tensor.hpp"

namespace npath {

struct VitConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t layers = 4;
  std::size_t hidden = 32;
  std::size_t ffn = 64;
  std::size_t heads = 4;
  std::size_t classes = 10;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t seq_len() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t head_dim() const { return hidden / heads; }

  // Throws InvalidParameter when the geometry is inconsistent.
  void validate() const;

  friend bool operator==(const VitConfig&, const VitConfig&) = default;
};

// A neuron is one channel of the post-GELU output of the first FFN linear.
struct NeuronId {
  std::size_t layer = 1;    // 1-based, in [1, L]
  std::size_t channel = 0;  // 0-based, in [0, n)

  friend auto operator<=>(const NeuronId&, const NeuronId&) = default;
};

std::string to_string(const NeuronId& id);
void validate_neuron(const NeuronId& id, const VitConfig& config);

// Which token positions a neuron covers. all_tokens treats the channel across
// the whole sequence; cls_only touches the class-token position alone.
enum class TokenScope { all_tokens, cls_only };
// What F_x measures: softmax probability of the label, or its raw logit.
enum class OutputMode { probability, logit };

const char* to_string(TokenScope scope);
const char* to_string(OutputMode mode);
TokenScope parse_scope(const std::string& s);
OutputMode parse_output_mode(const std::string& s);

// Token rows covered by `scope` for a sequence of length seq_len.
std::vector<std::size_t> scope_rows(TokenScope scope, std::size_t seq_len);

struct InterventionMode {
  enum class Kind { scale, zero, twice, set };
  Kind kind = Kind::scale;
  double value = 1.0;

  static InterventionMode scale(double alpha) { return {Kind::scale, alpha}; }
  static InterventionMode zero() { return {Kind::zero, 0.0}; }
  static InterventionMode twice() { return {Kind::twice, 2.0}; }
  static InterventionMode set(double v) { return {Kind::set, v}; }
};

struct Intervention {
  NeuronId neuron;
  InterventionMode mode;
};

// Per-neuron overrides applied at the hook. scale/zero/twice multiply the
// value arriving at the hook in this forward; set replaces it.
class InterventionSpec {
 public:
  InterventionSpec() = default;
  explicit InterventionSpec(TokenScope scope) : scope_(scope) {}

  // Throws UsageError if the neuron already has an entry.
  InterventionSpec& add(NeuronId neuron, InterventionMode mode);

  TokenScope scope() const { return scope_; }
  void set_scope(TokenScope scope) { scope_ = scope; }
  bool empty() const { return entries_.empty(); }
  const std::vector<Intervention>& entries() const { return entries_; }

 private:
  TokenScope scope_ = TokenScope::all_tokens;
  std::vector<Intervention> entries_;
};

struct EncoderLayer {
  Tensor ln1_gamma, ln1_beta;
  Tensor qkv_weight, qkv_bias;    // d x 3d, 3d
  Tensor proj_weight, proj_bias;  // d x d, d
  Tensor ln2_gamma, ln2_beta;
  Tensor fc1_weight, fc1_bias;  // d x n, n
  Tensor fc2_weight, fc2_bias;  // n x d, d

  friend bool operator==(const EncoderLayer&, const EncoderLayer&) = default;
};

// Pre-norm ViT encoder with a linear head on the class token.
struct VitModel {
  VitConfig config;
  double layer_norm_eps = 1e-6;

  Tensor patch_weight, patch_bias;  // patch_dim x d, d
  Tensor cls_token;                 // d
  Tensor pos_embed;                 // T x d
  std::vector<EncoderLayer> layers;
  Tensor norm_gamma, norm_beta;
  Tensor head_weight, head_bias;  // d x classes, classes

  // Every weight in a fixed canonical order (checkpoint and optimizer order).
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  std::vector<std::pair<std::string, Tensor*>> named_tensors();

  friend bool operator==(const VitModel&, const VitModel&) = default;
};

// Shapes every weight must have under `config`, in canonical order.
std::vector<std::pair<std::string, Shape>> expected_shapes(const VitConfig& config);

// Zero weights with unit layer-norm gains.
VitModel make_zero_model(const VitConfig& config);
// Seeded random initialization: linear weights ~ N(0, 1/fan_in), embeddings
// ~ N(0, 0.02^2), biases zero, layer-norm gains one.
VitModel init_model(const VitConfig& config, std::uint64_t seed);

// Image tensors are {channels, image_size, image_size}.
void validate_image(const Tensor& image, const VitConfig& config);
// Raw patches, num_patches x patch_dim, row-major over the patch grid.
Tensor extract_patches(const Tensor& image, const VitConfig& config);
// Class token followed by embedded patches, plus positional embeddings (T x d).
Tensor patchify(const VitModel& model, const Tensor& image);

struct ForwardResult {
  std::vector<double> logits;
  std::vector<double> probabilities;
  // Per layer, the T x n FFN intermediate as it left the hook.
  std::vector<Tensor> intermediates;

  std::size_t predicted() const;
};

// Runs the model with `interventions` applied. Every intervened layer must be
// <= upto (default L), which is the N of F_x(w^1..w^N).
ForwardResult forward(const VitModel& model, const Tensor& image, const InterventionSpec& interventions = {},
                      std::optional<std::size_t> upto = std::nullopt);

struct NeuronActivations {
  std::vector<Tensor> per_token;  // L tensors of T x n
  Tensor cls;                     // L x n, class-token value
  Tensor mean;                    // L x n, token average

  const Tensor& summary(TokenScope scope) const { return scope == TokenScope::cls_only ? cls : mean; }
  // Values of one neuron at the rows covered by `scope`.
  std::vector<double> values(const NeuronId& id, TokenScope scope) const;
};

NeuronActivations neuron_activations(const VitModel& model, const Tensor& image);

struct NeuronGradients {
  double output = 0.0;                           // F_x at the scaled point
  std::vector<std::vector<double>> originals;    // w-bar per neuron, one entry per scoped row
  std::vector<std::vector<double>> gradients;    // dF/dw per neuron, same layout

  // Token-contracted w-bar . dF/dw for neuron i.
  double contracted(std::size_t i) const;
};

// Clamps every listed neuron to alpha * w-bar (w-bar from the clean forward)
// and differentiates F_x with respect to the clamped values. `strict_path`
// rejects two neurons in one layer.
NeuronGradients grad_wrt_neurons(const VitModel& model, const Tensor& image, std::size_t label,
                                 std::span<const NeuronId> neurons, double alpha, TokenScope scope,
                                 OutputMode mode = OutputMode::probability, bool strict_path = true);
// Same, with precomputed clean activations.
NeuronGradients grad_wrt_neurons(const VitModel& model, const Tensor& image, std::size_t label,
                                 std::span<const NeuronId> neurons, double alpha, TokenScope scope, OutputMode mode,
                                 bool strict_path, const NeuronActivations& clean);

}  // namespace npath
