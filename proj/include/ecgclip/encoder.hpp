#pragma once

// 1D ResNet-18 ECG encoder with text/ECG projection heads, templated on the
// scalar type: float for training and inference, double for gradient checks.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ecgclip/contrastive.hpp"

namespace ecgclip {

struct EncoderConfig {
  std::size_t in_leads = 12;
  std::array<std::size_t, 4> stage_blocks{2, 2, 2, 2};
  std::array<std::size_t, 4> stage_channels{64, 128, 256, 512};
  std::size_t stem_kernel = 15;
  std::size_t block_kernel = 7;
  std::size_t input_length = 5000;

  /// Throws UsageError on even kernels, zero channels or zero length.
  void validate() const;
  std::size_t feature_dim() const { return stage_channels.back(); }
  /// Channels multiplied by the factor and rounded, minimum 1.
  EncoderConfig scaled(double width_factor) const;
  /// Temporal length entering global average pooling.
  std::size_t pooled_length() const;

  bool operator==(const EncoderConfig&) const = default;
};

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t text_dim = 256;
  std::size_t projection_dim = 256;
  double initial_tau = kInitialTau;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class ParamKind : std::uint8_t {
  conv_weight = 0,
  norm_scale = 1,
  norm_offset = 2,
  proj_weight = 3,
  proj_bias = 4,
  log_tau = 5,
  running_mean = 6,
  running_var = 7,
};

std::string_view kind_name(ParamKind k);
/// Whether decoupled weight decay applies to parameters of this kind.
bool is_decayed(ParamKind k);

template <class T>
struct Tensor {
  std::string name;
  ParamKind kind = ParamKind::conv_weight;
  std::vector<std::size_t> shape;
  std::vector<T> data;

  std::size_t size() const { return data.size(); }
  bool operator==(const Tensor&) const = default;
};

struct ConvLayer {
  std::size_t weight = 0;  // index into params
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_length(std::size_t in_length) const {
    return (in_length + 2 * pad - kernel) / stride + 1;
  }
};

struct NormLayer {
  std::size_t scale = 0;   // params
  std::size_t offset = 0;  // params
  std::size_t mean = 0;    // buffers
  std::size_t var = 0;     // buffers
  std::size_t channels = 0;
};

struct ResidualBlock {
  ConvLayer conv1;
  NormLayer norm1;
  ConvLayer conv2;
  NormLayer norm2;
  std::optional<ConvLayer> down;
  std::optional<NormLayer> down_norm;
};

/// Layer graph with indices into the parameter and buffer lists. A pure
/// function of the config.
struct Topology {
  ConvLayer stem;
  NormLayer stem_norm;
  std::vector<ResidualBlock> blocks;
  std::size_t ecg_weight = 0, ecg_bias = 0;
  std::size_t text_weight = 0, text_bias = 0;
  std::size_t log_tau = 0;
  std::size_t encoder_param_end = 0;  // params [0, end) belong to the encoder
};

enum class Mode { train, infer };

/// On/off state of every ReLU unit and the winner of every max-pool window
/// from one forward pass. Replaying it pins later passes to the same
/// piecewise-smooth branch, so finite differences do not straddle kinks.
struct GatePattern {
  enum class Use { record, replay };
  Use use = Use::record;
  std::vector<std::vector<std::uint8_t>> relu;
  std::vector<std::vector<std::uint32_t>> pool;
  std::size_t relu_cursor = 0;
  std::size_t pool_cursor = 0;
};

struct ForwardOptions {
  Mode mode = Mode::infer;
  /// Only meaningful in train mode: fold batch statistics into running stats.
  bool update_running_stats = false;
  GatePattern* gates = nullptr;
};

/// Non-owning view of a linear head y = W^T x + b, W stored in_dim x out_dim.
template <class T>
struct ProjectionHead {
  std::span<const T> weight;
  std::span<const T> bias;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
};

/// Applies a head to `rows` row-major input vectors. Throws UsageError if the
/// input length is not a multiple of in_dim matching `rows`.
template <class T>
std::vector<T> project(const ProjectionHead<T>& head, std::span<const T> x, std::size_t rows = 1);

template <class T>
using Gradients = std::vector<std::vector<T>>;

template <class T>
class Model {
 public:
  Model() = default;
  /// Rebuilds a model from stored tensors; throws DataError on shape mismatch.
  Model(ModelConfig config, std::vector<Tensor<T>> params, std::vector<Tensor<T>> buffers);

  /// Fan-in scaled uniform convolution and projection weights, unit norm
  /// scale, zero offsets and biases, deterministic in seed.
  static Model initialize(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const Topology& topology() const { return topo_; }
  std::vector<Tensor<T>>& params() { return params_; }
  const std::vector<Tensor<T>>& params() const { return params_; }
  std::vector<Tensor<T>>& buffers() { return buffers_; }
  const std::vector<Tensor<T>>& buffers() const { return buffers_; }

  ProjectionHead<T> text_head() const;
  ProjectionHead<T> ecg_head() const;
  T log_tau() const { return params_[topo_.log_tau].data[0]; }
  void set_log_tau(T v) { params_[topo_.log_tau].data[0] = v; }

  std::size_t encoder_parameter_count() const;
  std::size_t parameter_count() const;

  template <class U>
  Model<U> convert() const;

  Gradients<T> zero_gradients() const;

  bool operator==(const Model& o) const {
    return config_ == o.config_ && params_ == o.params_ && buffers_ == o.buffers_;
  }

 private:
  ModelConfig config_;
  Topology topo_;
  std::vector<Tensor<T>> params_;
  std::vector<Tensor<T>> buffers_;
};

/// Builds the layer graph and the (name, kind, shape) list of parameters and buffers.
Topology build_topology(const ModelConfig& config, std::vector<Tensor<float>>* param_shapes = nullptr,
                        std::vector<Tensor<float>>* buffer_shapes = nullptr);

/// In-place per-lead standardization: (x - mean) / (std + 1e-6) with the
/// population standard deviation. A constant lead becomes all zeros.
template <class T>
void standardize_leads(std::span<T> record, std::size_t leads, std::size_t length);

/// Encoder features, batch_size x feature_dim. `batch` is batch_size x leads x
/// input_length, lead-major per record. Train mode uses batch statistics.
template <class T>
std::vector<T> encode(Model<T>& model, std::span<const T> batch, std::size_t batch_size,
                      ForwardOptions opts);

struct StepLoss {
  double loss = 0.0;
  double tau = 0.0;
  Matrix similarity;
};

/// Contrastive loss of a batch of (record, text vector) pairs. When `grads`
/// is non-null it receives exact gradients of the loss for every trainable
/// parameter (accumulated, so zero it first). Text vectors are inputs only.
template <class T>
StepLoss contrastive_step(Model<T>& model, std::span<const T> batch, std::size_t batch_size,
                          std::span<const T> text_vectors, ForwardOptions opts, Gradients<T>* grads);

}  // namespace ecgclip
