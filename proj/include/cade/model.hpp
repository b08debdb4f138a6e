#pragma once

// MiniSpoofNet: conv blocks (conv -> activation -> max-pool), then an
// optional hidden dense layer and a 2-logit head.
//
// Layer ids used by taps and Grad-CAM:
//   k < blocks.size()   output of conv block k (after pooling), or for
//                       Grad-CAM its activation before pooling
//   blocks.size()       penultimate embedding (hidden dense output, or the
//                       flattened conv output when hidden == 0)

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cade/autodiff.hpp"
#include "cade/features.hpp"

namespace cade {

enum class Activation { relu, leaky_relu };

struct ConvBlockConfig {
  std::size_t out_channels = 8;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t padding = 1;
  std::size_t pool = 2;  // 1 disables pooling

  bool operator==(const ConvBlockConfig&) const = default;
};

struct ModelConfig {
  std::size_t in_h = 20;  // cepstral coefficients
  std::size_t in_w = 32;  // frames
  std::vector<ConvBlockConfig> blocks{{8}, {16}, {32}};
  Activation activation = Activation::leaky_relu;
  double slope = 0.01;
  std::size_t hidden = 64;  // 0: flatten straight into the head
  std::vector<std::size_t> taps{0, 1, 2, 3};
  std::size_t gradcam_layer = 2;
  bool gradcam_relu = true;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  struct Dims {
    std::size_t c, h, w;
    std::size_t size() const { return c * h * w; }
  };
  /// Shape of block k's activation (before pooling).
  Dims activation_dims(std::size_t k) const;
  /// Shape of block k's output (after pooling).
  Dims block_dims(std::size_t k) const;
  std::size_t flat_dim() const;
  std::size_t penultimate_layer() const { return blocks.size(); }
};

struct Model {
  ModelConfig config;
  ag::ParameterStore params;
  std::uint64_t seed = 0;
};

/// Frozen copy of a model, shareable across threads.
class ModelSnapshot {
 public:
  ModelSnapshot() = default;
  explicit ModelSnapshot(const Model& m) : model_(std::make_shared<const Model>(m)) {}
  const Model& model() const { return *model_; }
  explicit operator bool() const { return model_ != nullptr; }

 private:
  std::shared_ptr<const Model> model_;
};

ModelSnapshot snapshot(const Model& m);

/// Order-sensitive hash of all parameter names, shapes and bits.
std::uint64_t parameter_checksum(const ag::ParameterStore& params);

/// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
Model init_model(const ModelConfig& cfg, std::uint64_t seed);

/// Stacks feature maps into [N, 1, coeffs, frames].
Tensor make_batch(const std::vector<const FeatureMap*>& maps);

// ---------------------------------------------------------------------------
// Graph-level forward, used by training.

using Bindings = std::map<std::string, ag::Var>;

/// Parameters as trainable leaves, or as constants when `trainable` is false.
Bindings bind(ag::Graph& g, const ag::ParameterStore& params, bool trainable);

struct GraphForward {
  ag::Var logits;
  std::vector<ag::Var> taps;          // [N, D] per tap, in config order
  std::optional<ag::Var> activation;  // gradcam layer, before pooling
};

struct ForwardOptions {
  bool record_taps = true;
  std::optional<std::size_t> gradcam_layer;  // defaults to config.gradcam_layer
};

GraphForward forward_graph(const ModelConfig& cfg, const Bindings& params, ag::Var input,
                           const ForwardOptions& opts = {});

/// Continues the network from block `layer`'s pre-pool activation to the logits.
ag::Var forward_tail_graph(const ModelConfig& cfg, const Bindings& params, ag::Var activation,
                           std::size_t layer);

// ---------------------------------------------------------------------------
// Tensor-level API.

struct TapSet {
  std::vector<std::size_t> layers;
  std::vector<Tensor> embeddings;  // [N, D] each
};

struct ForwardResult {
  Tensor logits;  // [N, 2]
  TapSet taps;
  Tensor conv_activations;  // [N, C, h, w] at the gradcam layer
};

ForwardResult forward_with_taps(const Model& m, const Tensor& batch);
/// Logits only; no taps recorded.
Tensor forward(const Model& m, const Tensor& batch);
Tensor forward_tail(const Model& m, const Tensor& activations, std::size_t layer);

/// Grad-CAM channel weights: spatial mean of d logit[n, classes[n]] / d activations.
/// Activations are block `layer`'s pre-pool maps; result is [N, C].
Tensor gradcam_weights(const ModelConfig& cfg, const ag::ParameterStore& params,
                       const Tensor& activations, std::size_t layer,
                       const std::vector<std::size_t>& classes);

struct AttentionMap {
  std::vector<double> values;  // length h*w, row-major
  std::size_t cls = 0;
};

struct GradCamBatch {
  Tensor weights;   // [N, C]
  Tensor pre_relu;  // [N, h*w]
  Tensor maps;      // [N, h*w], ReLU applied when config.gradcam_relu
};

GradCamBatch gradcam_batch(const Model& m, const Tensor& batch, const std::vector<std::size_t>& classes,
                           std::size_t layer);
/// `input` is one sample, [1, 1, H, W] or [1, H, W].
AttentionMap gradcam(const Model& m, const Tensor& input, std::size_t cls, std::size_t layer);

// ---------------------------------------------------------------------------
// Checkpoints:
//   "CADECKPT" | u32 version (1) | str config JSON | u64 seed | u32 count |
//   count x (str name | u32 rank | rank x u64 dim | values as f64)
// Strings are u32 length + bytes; everything little-endian.

std::string encode_checkpoint(const Model& m);
Model decode_checkpoint(const std::string& bytes, const std::string& context);
void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace cade
