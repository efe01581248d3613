#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dir3d/rng.hpp"
#include "dir3d/tensor.hpp"

namespace dir3d {

/// ||a - b|| / max(||a||, ||b||), or 0 when both are exactly zero.
double relative_error(std::span<const double> a, std::span<const double> b);

struct GradCheckResult {
  std::string name;
  std::size_t coordinates = 0;  // number of finite-difference probes
  double relative_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Probe at most this many coordinates per tensor (0 = all), chosen by `seed`.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
  /// Evaluate every probe with relu signs and max-pool winners frozen at the
  /// unperturbed point (see ActivationPatternFreeze), so no probe crosses a kink.
  bool freeze_activations = false;
};

/// Compares backward() against central finite differences of `loss_fn` for each
/// named input. `loss_fn` must rebuild the graph from the inputs' current values
/// and be deterministic.
template <typename T>
std::vector<GradCheckResult> check_gradients(const std::function<Tensor<T>()>& loss_fn,
                                             const std::vector<std::pair<std::string, Tensor<T>>>& inputs,
                                             const GradCheckOptions& options = {});

}  // namespace dir3d
