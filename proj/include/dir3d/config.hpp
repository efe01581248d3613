#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dir3d/landmarks.hpp"
#include "dir3d/ops.hpp"

namespace dir3d {

enum class LayerKind { Conv, MaxPool, AvgPool };

/// One layer of a stem or branch. Text form (tokens in any order after the kind):
///   conv k=3x3x3 s=1x2x2 p=SVV c=32 [linear]
///   maxpool k=3x3x3 s=1x2x2 p=S
/// `p` takes one letter for all axes or three letters for (T, H, W); S = same, V = valid.
struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  Extent3 window{1, 1, 1};
  Extent3 stride{1, 1, 1};
  Padding3 padding{Padding::Same};
  std::size_t channels = 0;  // conv only
  bool linear = false;       // conv without the trailing ReLU

  bool operator==(const LayerSpec&) const = default;
  std::string to_string() const;
  static LayerSpec parse(const std::string& text);
};

using BranchSpec = std::vector<LayerSpec>;

std::string branch_to_string(const BranchSpec& branch);
BranchSpec parse_branch(const std::string& text);

/// How the pooled 3D feature volume is handed to the LSTM.
enum class LstmInput {
  PerFrame,         // one step per time index, spatial cells x channels flattened
  FlattenedVolume,  // a single step holding the whole flattened volume
};

/// Architecture and regularization hyperparameters. Flat text form is
/// `dotted.key = value` lines; see configs/*.cfg.
struct ModelConfig {
  std::size_t frames = 10;
  std::size_t height = 299;
  std::size_t width = 299;
  std::size_t channels = 3;

  std::vector<LayerSpec> stem;
  std::size_t stem_output_grid = 0;  // expected H = W after the stem, 0 = unchecked

  std::vector<BranchSpec> block_a;
  std::size_t block_a_repeats = 1;
  std::vector<BranchSpec> reduction_a;
  std::size_t reduction_a_output_grid = 0;
  std::vector<BranchSpec> block_b;
  std::size_t block_b_repeats = 1;
  std::vector<BranchSpec> reduction_b;
  std::size_t reduction_b_output_grid = 0;
  std::vector<BranchSpec> block_c;
  std::size_t block_c_repeats = 1;

  std::size_t pool_window = 0;  // spatial average-pool window, 0 = whole grid
  double dropout = 0.2;
  double residual_scale = 1.0;

  std::size_t lstm_hidden = 200;
  LstmInput lstm_input = LstmInput::PerFrame;
  std::size_t num_classes = 7;

  bool use_landmarks = true;
  MaskOptions mask;

  /// Full network at the published input size.
  static ModelConfig reference();
  /// Desk-scale network on 10x64x64x1 clips used by the end-to-end tests.
  static ModelConfig toy();
  /// Smallest network exercising every block; used by full gradient checks.
  static ModelConfig tiny();
  static ModelConfig preset(const std::string& name);

  static ModelConfig parse(const std::string& text);
  static ModelConfig load(const std::filesystem::path& path);
  std::string to_text() const;
  /// FNV-1a of to_text(); identifies checkpoint compatibility.
  std::uint64_t hash() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Raw `key = value` pairs; '#' starts a comment.
std::map<std::string, std::string> parse_key_values(const std::string& text);

}  // namespace dir3d
