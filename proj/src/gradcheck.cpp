#include "dir3d/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include "dir3d/ops.hpp"

namespace dir3d {

double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("relative_error on spans of different length");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom == 0.0) return 0.0;
  return std::sqrt(diff) / denom;
}

template <typename T>
std::vector<GradCheckResult> check_gradients(const std::function<Tensor<T>()>& loss_fn,
                                             const std::vector<std::pair<std::string, Tensor<T>>>& inputs,
                                             const GradCheckOptions& options) {
  std::vector<bool> previous;
  for (const auto& [name, t] : inputs) {
    previous.push_back(t.requires_grad());
    auto handle = t;
    handle.set_requires_grad(true);
    handle.zero_grad();
  }

  std::optional<ActivationPatternFreeze> freeze;
  if (options.freeze_activations) freeze.emplace();
  loss_fn().backward();

  Rng rng(options.seed);
  std::vector<GradCheckResult> results;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    auto tensor = inputs[p].second;
    const auto analytic_all = tensor.grad();

    std::vector<std::size_t> coords(tensor.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coordinates && coords.size() > options.max_coordinates) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(options.max_coordinates);
      std::sort(coords.begin(), coords.end());
    }

    std::vector<double> analytic, numeric;
    NoGradGuard no_grad;
    const double h = options.step;
    auto values = tensor.mutable_data();
    for (auto i : coords) {
      const T saved = values[i];
      auto at = [&](double offset) {
        values[i] = static_cast<T>(static_cast<double>(saved) + offset);
        if (freeze) freeze->replay();
        const double v = static_cast<double>(loss_fn().item());
        values[i] = saved;
        return v;
      };
      numeric.push_back((at(h) - at(-h)) / (2.0 * h));
      analytic.push_back(static_cast<double>(analytic_all.data()[i]));
    }

    GradCheckResult r;
    r.name = inputs[p].first;
    r.coordinates = coords.size();
    r.relative_error = relative_error(analytic, numeric);
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      r.max_abs_error = std::max(r.max_abs_error, std::abs(analytic[i] - numeric[i]));
    }
    results.push_back(r);
  }

  for (std::size_t p = 0; p < inputs.size(); ++p) {
    auto handle = inputs[p].second;
    handle.zero_grad();
    handle.set_requires_grad(previous[p]);
  }
  return results;
}

template std::vector<GradCheckResult> check_gradients(const std::function<Tensor<float>()>&,
                                                      const std::vector<std::pair<std::string, Tensor<float>>>&,
                                                      const GradCheckOptions&);
template std::vector<GradCheckResult> check_gradients(const std::function<Tensor<double>()>&,
                                                      const std::vector<std::pair<std::string, Tensor<double>>>&,
                                                      const GradCheckOptions&);

}  // namespace dir3d
