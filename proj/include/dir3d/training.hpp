#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dir3d/data.hpp"
#include "dir3d/model.hpp"
#include "dir3d/rng.hpp"

namespace dir3d {

struct SgdOptions {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;  // applied to tensors of rank >= 2 only
  /// Step decay: rate * factor^(epoch / every). Off when every == 0.
  std::size_t decay_every_epochs = 0;
  double decay_factor = 0.1;

  bool operator==(const SgdOptions&) const = default;
};

template <typename T>
struct OptimizerState {
  SgdOptions options;
  std::map<std::string, Tensor<T>> velocity;  // same keys and shapes as the parameters
  std::uint64_t step = 0;
  double lr_scale = 1.0;  // set by the step-decay schedule
};

template <typename T>
using NamedTensors = std::map<std::string, Tensor<T>>;

/// Zero velocities mirroring `params`.
template <typename T>
OptimizerState<T> make_optimizer(const NamedTensors<T>& params, const SgdOptions& options = {});

/// Accumulated gradients of every parameter (zeros where none arrived).
template <typename T>
NamedTensors<T> collect_grads(const NamedTensors<T>& params);

/// v <- momentum * v + g + wd * p ;  p <- p - lr * v.  Throws ContractError
/// listing the keys missing from `grads` or the state.
template <typename T>
void sgd_step(NamedTensors<T>& params, const NamedTensors<T>& grads, OptimizerState<T>& state);

struct EpochMetrics {
  double loss = 0.0;      // mean of per-batch mean losses
  double accuracy = 0.0;  // train-mode predictions
  std::size_t samples = 0;
  std::size_t batches = 0;
};

template <typename T>
struct TrainerState {
  OptimizerState<T> optimizer;
  Rng rng = Rng(0);
  std::size_t epoch = 0;  // completed epochs
  std::uint64_t seed = 0;
};

template <typename T>
TrainerState<T> make_trainer(const ModelParams<T>& params, std::uint64_t seed, const SgdOptions& options = {});

/// One shuffled pass over `data`. Throws DataError on an empty dataset.
template <typename T>
EpochMetrics train_epoch(ModelParams<T>& params, const Dataset& data, std::size_t batch_size, TrainerState<T>& state,
                         MaskCache* cache = nullptr, const ForwardOptions& base = {});

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<std::size_t> truths, predictions;
};

/// Eval-mode pass. `allowed` restricts the argmax to a subset of classes.
template <typename T>
EvalResult evaluate(const ModelParams<T>& params, const Dataset& data, std::size_t batch_size = 8,
                    MaskCache* cache = nullptr, const std::vector<std::size_t>& allowed = {},
                    const ForwardOptions& base = {});

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  std::string split;      // train | validation
  double loss = 0.0;
  double accuracy = 0.0;
};

struct FitOptions {
  std::size_t batch_size = 8;
  std::size_t epochs = 30;
  /// Stop once eval-mode train accuracy reaches this value; 0 disables.
  double target_train_accuracy = 0.0;
  std::optional<std::filesystem::path> metrics_csv;  // rows appended per epoch
  std::optional<MaskSource> mask_source;
  std::function<void(const EpochLog&)> on_epoch;
};

template <typename T>
struct FitResult {
  std::vector<EpochLog> history;
  std::size_t epochs_run = 0;
  /// Parameters of the best validation epoch, when a validation set was given.
  std::optional<ModelParams<T>> best;
  double best_validation_accuracy = -1.0;
  double final_train_accuracy = 0.0;  // eval mode, when measured
};

/// Continues from state.epoch up to options.epochs.
template <typename T>
FitResult<T> fit(ModelParams<T>& params, const Dataset& train, const Dataset* validation, const FitOptions& options,
                 TrainerState<T>& state, MaskCache* cache = nullptr);

void append_metrics_csv(const std::filesystem::path& path, const EpochLog& row);

inline constexpr char kCheckpointMagic[9] = {'D', 'I', 'R', '3', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout: magic | u32 version | u64 config hash | config text | u64 seed |
/// u64 epoch | u64 step | hyperparameters (f64 x 5, u64) | init scheme text |
/// rng state | u64 record count | records (name + tensor). Velocity records
/// are named "velocity/<parameter>".
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& params, const TrainerState<T>& state);

template <typename T>
struct Checkpoint {
  ModelParams<T> params;
  TrainerState<T> state;
};

/// Throws IoError when the file cannot be opened, FormatError on a bad magic,
/// version or truncation, CompatibilityError when `expected` has a different hash.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

inline constexpr char kInitScheme[] =
    "conv,fc weights: truncated normal std sqrt(2/fan_in) cut at 2 std; lstm matrices: uniform +-sqrt(1/hidden); "
    "lstm forget bias 1; other biases 0";

}  // namespace dir3d
