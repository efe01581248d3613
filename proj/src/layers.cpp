#include "dir3d/layers.hpp"

namespace dir3d {

template <typename T>
Tensor<T> apply_unit(const Tensor<T>& x, const UnitParams<T>& unit) {
  const auto& s = unit.spec;
  switch (s.kind) {
    case LayerKind::MaxPool: return pool3d(x, s.window, s.stride, s.padding, PoolMode::Max);
    case LayerKind::AvgPool: return pool3d(x, s.window, s.stride, s.padding, PoolMode::Average);
    case LayerKind::Conv: break;
  }
  auto y = add(conv3d(x, unit.kernel, s.stride, s.padding), unit.bias);
  return s.linear ? y : relu(y);
}

template <typename T>
Tensor<T> apply_branch(const Tensor<T>& x, const BranchParams<T>& branch) {
  Tensor<T> y = x;
  for (const auto& unit : branch) y = apply_unit(y, unit);
  return y;
}

template <typename T>
Tensor<T> landmark_residual_block(const Tensor<T>& x, const std::optional<Tensor<T>>& mask,
                                  const LandmarkResidualBlockParams<T>& params) {
  const std::size_t channel_axis = x.rank() - 1;
  if (mask) {
    const auto& ms = mask->shape();
    bool ok = ms.size() == x.rank() && ms.back() == 1;
    for (std::size_t i = 0; ok && i + 1 < ms.size(); ++i) ok = ms[i] == x.shape()[i];
    if (!ok) {
      throw DimensionError("mask " + shape_to_string(ms) + " does not cover input " + shape_to_string(x.shape()));
    }
  }
  std::vector<Tensor<T>> outs;
  outs.reserve(params.branches.size());
  for (const auto& branch : params.branches) outs.push_back(apply_branch(x, branch));
  auto mixed = outs.size() == 1 ? outs.front() : concat(outs, channel_axis);
  auto residual = apply_unit(mixed, params.projection);
  if (residual.shape() != x.shape()) {
    throw DimensionError("residual branch output " + shape_to_string(residual.shape()) + " differs from input " +
                         shape_to_string(x.shape()));
  }
  if (params.residual_scale != T(1)) residual = scale(residual, params.residual_scale);
  auto shortcut = mask ? mul(x, *mask) : x;
  auto sum = add(shortcut, residual);
  return params.activation == Activation::Relu ? relu(sum) : sum;
}

template <typename T>
Tensor<T> reduction_block(const Tensor<T>& x, const ReductionParams<T>& params) {
  const std::size_t off = x.rank() == 5 ? 1 : 0;
  if (params.expected_input_grid &&
      (x.shape()[off + 1] != params.expected_input_grid || x.shape()[off + 2] != params.expected_input_grid)) {
    throw DimensionError("reduction-" + params.variant + " expects a " + std::to_string(params.expected_input_grid) +
                         "x" + std::to_string(params.expected_input_grid) + " grid, got " +
                         shape_to_string(x.shape()));
  }
  std::vector<Tensor<T>> outs;
  for (const auto& branch : params.branches) outs.push_back(apply_branch(x, branch));
  for (const auto& o : outs) {
    for (std::size_t i = 0; i + 1 < o.rank(); ++i) {
      if (o.shape()[i] != outs.front().shape()[i]) {
        throw DimensionError("reduction-" + params.variant + " branches disagree: " +
                             shape_to_string(outs.front().shape()) + " vs " + shape_to_string(o.shape()));
      }
    }
  }
  return outs.size() == 1 ? outs.front() : concat(outs, x.rank() - 1);
}

template <typename T>
LstmStep<T> lstm_cell_step(const Tensor<T>& x, const Tensor<T>& h_prev, const Tensor<T>& c_prev,
                           const LSTMParams<T>& params) {
  const std::size_t hidden = params.hidden;
  if (x.rank() != 2 || h_prev.rank() != 2 || c_prev.shape() != h_prev.shape() || h_prev.dim(1) != hidden ||
      h_prev.dim(0) != x.dim(0) || params.W_f.dim(1) != hidden + x.dim(1)) {
    throw DimensionError("lstm step shapes x " + shape_to_string(x.shape()) + ", h " +
                         shape_to_string(h_prev.shape()) + ", c " + shape_to_string(c_prev.shape()) +
                         " do not match gate matrices " + shape_to_string(params.W_f.shape()));
  }
  const auto hx = concat<T>({h_prev, x}, 1);
  auto affine = [&](const Tensor<T>& W, const Tensor<T>& b) { return add(matmul(hx, transpose(W)), b); };
  LstmStep<T> s;
  s.f = sigmoid(affine(params.W_f, params.b_f));
  s.i = sigmoid(affine(params.W_i, params.b_i));
  s.o = sigmoid(affine(params.W_o, params.b_o));
  s.g = tanh(affine(params.W_C, params.b_C));
  s.c = add(mul(s.f, c_prev), mul(s.i, s.g));
  s.h = mul(s.o, tanh(s.c));
  return s;
}

template <typename T>
Tensor<T> lstm_sequence(const Tensor<T>& x, const LSTMParams<T>& params, const std::optional<Tensor<T>>& h0,
                        const std::optional<Tensor<T>>& c0) {
  if (x.rank() != 3) throw DimensionError("lstm_sequence needs [batch x T x d], got " + shape_to_string(x.shape()));
  const std::size_t batch = x.dim(0), steps = x.dim(1);
  if (steps == 0) throw ContractError("lstm_sequence needs at least one time step");
  Tensor<T> h = h0 ? *h0 : Tensor<T>({batch, params.hidden});
  Tensor<T> c = c0 ? *c0 : Tensor<T>({batch, params.hidden});
  for (std::size_t t = 0; t < steps; ++t) {
    auto step = lstm_cell_step(select(x, 1, t), h, c, params);
    h = step.h;
    c = step.c;
  }
  return h;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("dropout rate must be in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::Eval || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> keep(x.size());
  for (auto& k : keep) k = rng.bernoulli(rate) ? T(0) : keep_scale;
  return mul(x, Tensor<T>(x.shape(), std::move(keep)));
}

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const DenseParams<T>& params) {
  if (x.rank() != 2 || params.weight.rank() != 2 || x.dim(1) != params.weight.dim(0) ||
      params.bias.size() != params.weight.dim(1)) {
    throw DimensionError("fully_connected input " + shape_to_string(x.shape()) + " vs weight " +
                         shape_to_string(params.weight.shape()) + " and bias " + shape_to_string(params.bias.shape()));
  }
  return add(matmul(x, params.weight), params.bias);
}

#define DIR3D_INSTANTIATE_LAYERS(T)                                                                            \
  template Tensor<T> apply_unit(const Tensor<T>&, const UnitParams<T>&);                                      \
  template Tensor<T> apply_branch(const Tensor<T>&, const BranchParams<T>&);                                  \
  template Tensor<T> landmark_residual_block(const Tensor<T>&, const std::optional<Tensor<T>>&,               \
                                             const LandmarkResidualBlockParams<T>&);                          \
  template Tensor<T> reduction_block(const Tensor<T>&, const ReductionParams<T>&);                            \
  template LstmStep<T> lstm_cell_step(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                   \
                                      const LSTMParams<T>&);                                                  \
  template Tensor<T> lstm_sequence(const Tensor<T>&, const LSTMParams<T>&, const std::optional<Tensor<T>>&,   \
                                   const std::optional<Tensor<T>>&);                                          \
  template Tensor<T> dropout(const Tensor<T>&, double, Mode, Rng&);                                           \
  template Tensor<T> fully_connected(const Tensor<T>&, const DenseParams<T>&);

DIR3D_INSTANTIATE_LAYERS(float)
DIR3D_INSTANTIATE_LAYERS(double)

#undef DIR3D_INSTANTIATE_LAYERS

}  // namespace dir3d
