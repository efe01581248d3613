#pragma once

#include <array>
#include <cstddef>
#include <utility>
#include <vector>

#include "dir3d/tensor.hpp"

namespace dir3d {

enum class Padding { Valid, Same };

/// Padding mode per (temporal, height, width) axis.
struct Padding3 {
  Padding t = Padding::Valid;
  Padding h = Padding::Valid;
  Padding w = Padding::Valid;

  Padding3() = default;
  Padding3(Padding all) : t(all), h(all), w(all) {}  // NOLINT(google-explicit-constructor)
  Padding3(Padding pt, Padding ph, Padding pw) : t(pt), h(ph), w(pw) {}
  bool operator==(const Padding3&) const = default;
};

using Extent3 = std::array<std::size_t, 3>;

enum class PoolMode { Max, Average };

/// Output extent along one axis. Throws DimensionError if the window does not fit.
std::size_t window_output_extent(std::size_t input, std::size_t window, std::size_t stride, Padding padding);
/// Leading/trailing pad for 'same'; the odd cell goes to the trailing side.
std::pair<std::size_t, std::size_t> same_padding(std::size_t input, std::size_t window, std::size_t stride);

// Elementwise binary ops. `b` broadcasts against `a` by right-aligned singleton
// extents; the result always has a's shape.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

/// Cross-correlation over [B x T x H x W x Cin] (or unbatched [T x H x W x Cin])
/// with a [kT x kH x kW x Cin x Cout] kernel.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, Extent3 stride, Padding3 padding);

/// Max or average over [kT x kH x kW] windows, per channel. Average divides by
/// the number of in-bounds cells; max routes gradients to the first maximum.
template <typename T>
Tensor<T> pool3d(const Tensor<T>& input, Extent3 window, Extent3 stride, Padding3 padding, PoolMode mode);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> tanh(const Tensor<T>& x);

/// Row-wise softmax of [batch x K] logits. Not recorded on the tape.
template <typename T> Tensor<T> softmax(const Tensor<T>& logits);

/// Mean categorical cross-entropy of [batch x K] logits against one-hot rows.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const Tensor<T>& labels);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// Picks index `index` along `axis` and drops that axis.
template <typename T> Tensor<T> select(const Tensor<T>& x, std::size_t axis, std::size_t index);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

/// Pins the piecewise-linear ops of this thread to one piece. While recording,
/// every relu call stores its sign pattern and every max pool its winners; after
/// replay(), each call in the same order reuses the stored choice instead of
/// comparing values. Throws ContractError if a replayed call does not line up.
class ActivationPatternFreeze {
 public:
  ActivationPatternFreeze();
  ~ActivationPatternFreeze();
  ActivationPatternFreeze(const ActivationPatternFreeze&) = delete;
  ActivationPatternFreeze& operator=(const ActivationPatternFreeze&) = delete;

  /// Switches to replay and rewinds to the first recorded call.
  void replay();
  bool replaying() const { return replaying_; }
  std::size_t recorded_calls() const { return relu_.size() + pool_.size(); }

  // Used by the ops.
  static ActivationPatternFreeze* active();
  const std::vector<unsigned char>* relu_pattern(std::size_t size);
  void record_relu(std::vector<unsigned char> pattern);
  const std::vector<std::size_t>* pool_routes(std::size_t size);
  void record_pool(std::vector<std::size_t> routes);

 private:
  ActivationPatternFreeze* previous_;
  bool replaying_ = false;
  std::vector<std::vector<unsigned char>> relu_;
  std::vector<std::vector<std::size_t>> pool_;
  std::size_t relu_cursor_ = 0;
  std::size_t pool_cursor_ = 0;
};

}  // namespace dir3d
