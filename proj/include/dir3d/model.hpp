#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dir3d/config.hpp"
#include "dir3d/gradcheck.hpp"
#include "dir3d/landmarks.hpp"
#include "dir3d/layers.hpp"

namespace dir3d {

/// One line of a layer-by-layer shape table. `shape` is [T, H, W, C] for
/// volumes and [steps, features] or [features] after the LSTM.
struct TraceRow {
  std::string stage;
  std::string layer;
  Shape shape;
};

struct ShapeTrace {
  std::vector<TraceRow> rows;
  std::size_t parameter_count = 0;
  Shape stem_output, block_a_output, reduction_a_output, block_b_output, reduction_b_output, block_c_output;
  std::size_t lstm_steps = 0;
  std::size_t lstm_input = 0;
};

/// Shape arithmetic for a config without allocating anything. Throws
/// ConfigError naming the stage that cannot be built.
ShapeTrace trace_shapes(const ModelConfig& config);

std::string format_trace(const std::vector<TraceRow>& rows);

template <typename T>
struct ModelParams {
  ModelConfig config;
  std::vector<UnitParams<T>> stem;
  std::vector<LandmarkResidualBlockParams<T>> block_a, block_b, block_c;
  ReductionParams<T> reduction_a, reduction_b;
  LSTMParams<T> lstm;
  DenseParams<T> fc;
  /// Every learnable tensor under a stable hierarchical name. Handles alias
  /// the structured fields above.
  std::map<std::string, Tensor<T>> tensors;

  std::size_t parameter_count() const;
  /// Independent copy with identical values.
  ModelParams clone() const;
  void copy_values_from(const ModelParams& other);
  void zero_grad();
};

/// Allocates and initializes every parameter; deterministic per seed.
///   conv / fc weights: truncated normal, std sqrt(2 / fan_in), cut at 2 std
///   LSTM matrices: uniform in +-sqrt(1 / hidden); forget bias 1, other biases 0
template <typename T>
ModelParams<T> build(const ModelConfig& config, std::uint64_t seed);

enum class MaskSource {
  Landmarks,  // rasterized landmark weights
  Ones,       // all-ones mask, multiplied in explicitly
  None,       // plain identity shortcut
};

struct ForwardOptions {
  Mode mode = Mode::Eval;
  Rng* rng = nullptr;              // required for dropout in train mode
  MaskCache* mask_cache = nullptr;
  /// Defaults to Landmarks when config.use_landmarks, else None.
  std::optional<MaskSource> mask_source;
  std::vector<TraceRow>* trace = nullptr;  // receives executed shapes when set
};

using SequenceLandmarks = std::vector<LandmarkFrame>;

/// clips: [batch x frames x H x W x C]; landmarks: one frame list per sample.
/// Returns [batch x num_classes] logits.
template <typename T>
Tensor<T> forward(const ModelParams<T>& params, const Tensor<T>& clips, const std::vector<SequenceLandmarks>& landmarks,
                  const ForwardOptions& options = {});

template <typename T>
struct Prediction {
  std::vector<std::size_t> classes;
  Tensor<T> probabilities;
};

/// Row-wise argmax; ties resolve to the lowest class id.
template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& scores);

template <typename T>
Prediction<T> predict(const ModelParams<T>& params, const Tensor<T>& clips,
                      const std::vector<SequenceLandmarks>& landmarks, MaskCache* cache = nullptr);

/// Finite-difference check of every parameter tensor of a freshly built
/// 64-bit model (biases drawn in +-0.1), on a batch of two random clips with
/// random landmarks. Activation patterns are frozen during probing.
std::vector<GradCheckResult> check_model_gradients(const ModelConfig& config, std::uint64_t seed,
                                                   const GradCheckOptions& options = {});

}  // namespace dir3d
