#pragma once

// Small parameter sets shared by the layer tests and the acceptance run.

#include <string>
#include <utility>
#include <vector>

#include "dir3d/config.hpp"
#include "dir3d/layers.hpp"
#include "oracles.hpp"

namespace fixture {

using namespace dir3d;
using oracle::random_parameter;

inline UnitParams<double> make_unit(const std::string& text, std::size_t cin, std::uint64_t seed, double amp = 0.5) {
  UnitParams<double> u;
  u.spec = LayerSpec::parse(text);
  if (u.spec.kind == LayerKind::Conv) {
    const auto& k = u.spec.window;
    u.kernel = random_parameter({k[0], k[1], k[2], cin, u.spec.channels}, seed, -amp, amp);
    u.bias = random_parameter({u.spec.channels}, seed + 1, -amp, amp);
  }
  return u;
}

inline std::size_t out_channels(const BranchParams<double>& b, std::size_t cin) {
  for (const auto& u : b)
    if (u.spec.kind == LayerKind::Conv) cin = u.spec.channels;
  return cin;
}

inline BranchParams<double> make_branch(const BranchSpec& spec, std::size_t cin, std::uint64_t seed) {
  BranchParams<double> b;
  for (const auto& layer : spec) {
    b.push_back(make_unit(layer.to_string(), cin, seed));
    seed += 7;
    if (layer.kind == LayerKind::Conv) cin = layer.channels;
  }
  return b;
}

// Two branches (1x1x1 and 1x1x1 -> 3x3x3) and a linear projection back to c channels.
inline LandmarkResidualBlockParams<double> tiny_block(std::size_t c, std::uint64_t seed, Activation act = Activation::Relu) {
  LandmarkResidualBlockParams<double> p;
  p.branches.push_back({make_unit("conv k=1x1x1 c=2", c, seed)});
  p.branches.push_back({make_unit("conv k=1x1x1 c=2", c, seed + 10), make_unit("conv k=3x3x3 c=3", 2, seed + 20)});
  p.projection = make_unit("conv k=1x1x1 c=" + std::to_string(c) + " linear", 5, seed + 30);
  p.activation = act;
  return p;
}

inline void zero_all(LandmarkResidualBlockParams<double>& p) {
  auto zero = [](Tensor<double>& t) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0); };
  for (auto& b : p.branches)
    for (auto& u : b) {
      zero(u.kernel);
      zero(u.bias);
    }
  zero(p.projection.kernel);
  zero(p.projection.bias);
}

inline std::vector<std::pair<std::string, Tensor<double>>> block_tensors(const LandmarkResidualBlockParams<double>& p) {
  std::vector<std::pair<std::string, Tensor<double>>> out;
  for (std::size_t i = 0; i < p.branches.size(); ++i)
    for (std::size_t j = 0; j < p.branches[i].size(); ++j) {
      out.emplace_back("b" + std::to_string(i) + std::to_string(j) + ".k", p.branches[i][j].kernel);
      out.emplace_back("b" + std::to_string(i) + std::to_string(j) + ".b", p.branches[i][j].bias);
    }
  out.emplace_back("proj.k", p.projection.kernel);
  out.emplace_back("proj.b", p.projection.bias);
  return out;
}

inline LSTMParams<double> random_lstm(std::size_t hidden, std::size_t input, std::uint64_t seed, double amp = 0.5) {
  LSTMParams<double> p;
  p.hidden = hidden;
  const Shape w{hidden, hidden + input}, b{hidden};
  p.W_f = random_parameter(w, seed, -amp, amp);
  p.W_i = random_parameter(w, seed + 1, -amp, amp);
  p.W_o = random_parameter(w, seed + 2, -amp, amp);
  p.W_C = random_parameter(w, seed + 3, -amp, amp);
  p.b_f = random_parameter(b, seed + 4, -amp, amp);
  p.b_i = random_parameter(b, seed + 5, -amp, amp);
  p.b_o = random_parameter(b, seed + 6, -amp, amp);
  p.b_C = random_parameter(b, seed + 7, -amp, amp);
  return p;
}

inline LSTMParams<double> zero_lstm(std::size_t hidden, std::size_t input) {
  LSTMParams<double> p;
  p.hidden = hidden;
  const Shape w{hidden, hidden + input}, b{hidden};
  p.W_f = p.W_i = p.W_o = p.W_C = Tensor<double>(w, 0.0);
  p.b_f = p.b_i = p.b_o = p.b_C = Tensor<double>(b, 0.0);
  return p;
}

}  // namespace fixture
