#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dir3d/config.hpp"
#include "dir3d/ops.hpp"
#include "dir3d/rng.hpp"
#include "dir3d/tensor.hpp"

namespace dir3d {

enum class Mode { Train, Eval };

enum class Activation { Relu, Identity };

/// A configured layer and its learnable tensors (empty handles for pooling).
template <typename T>
struct UnitParams {
  LayerSpec spec;
  Tensor<T> kernel;  // [kT x kH x kW x Cin x Cout]
  Tensor<T> bias;    // [Cout]
};

template <typename T>
using BranchParams = std::vector<UnitParams<T>>;

/// Inception branches F plus the linear 1x1x1 projection that restores the
/// input channel count, so that mask * x + F(x) is shape-valid.
template <typename T>
struct LandmarkResidualBlockParams {
  std::vector<BranchParams<T>> branches;
  UnitParams<T> projection;
  T residual_scale = T(1);
  Activation activation = Activation::Relu;  // f applied to the sum
};

template <typename T>
struct ReductionParams {
  std::string variant;                 // "A" or "B", used in messages
  std::size_t expected_input_grid = 0;  // 0 = unchecked
  std::vector<BranchParams<T>> branches;
};

/// Gate matrices act on the concatenation [h_{t-1}, x_t].
template <typename T>
struct LSTMParams {
  std::size_t hidden = 0;
  Tensor<T> W_f, W_i, W_o, W_C;  // [hidden x (hidden + input)]
  Tensor<T> b_f, b_i, b_o, b_C;  // [hidden]
};

template <typename T>
struct DenseParams {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct LstmStep {
  Tensor<T> h, c;              // new hidden and cell state
  Tensor<T> f, i, o, g;        // gate activations of this step
};

/// Convolution (+bias, +ReLU unless linear) or pooling, per the unit's spec.
template <typename T>
Tensor<T> apply_unit(const Tensor<T>& x, const UnitParams<T>& unit);

template <typename T>
Tensor<T> apply_branch(const Tensor<T>& x, const BranchParams<T>& branch);

/// f(mask * x + scale * projection(concat(branches(x)))). Without a mask the
/// shortcut is the plain identity x.
template <typename T>
Tensor<T> landmark_residual_block(const Tensor<T>& x, const std::optional<Tensor<T>>& mask,
                                  const LandmarkResidualBlockParams<T>& params);

/// Concatenates strided branches on the channel axis.
template <typename T>
Tensor<T> reduction_block(const Tensor<T>& x, const ReductionParams<T>& params);

template <typename T>
LstmStep<T> lstm_cell_step(const Tensor<T>& x, const Tensor<T>& h_prev, const Tensor<T>& c_prev,
                           const LSTMParams<T>& params);

/// Folds the cell over [batch x T x d] from the given (default zero) state; returns h_T.
template <typename T>
Tensor<T> lstm_sequence(const Tensor<T>& x, const LSTMParams<T>& params,
                        const std::optional<Tensor<T>>& h0 = std::nullopt,
                        const std::optional<Tensor<T>>& c0 = std::nullopt);

/// Inverted dropout: survivors scaled by 1 / (1 - rate); identity in eval mode.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng);

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const DenseParams<T>& params);

}  // namespace dir3d
