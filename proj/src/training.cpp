#include "dir3d/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "dir3d/errors.hpp"
#include "dir3d/serialize.hpp"

namespace dir3d {

namespace fs = std::filesystem;

template <typename T>
OptimizerState<T> make_optimizer(const NamedTensors<T>& params, const SgdOptions& options) {
  OptimizerState<T> s;
  s.options = options;
  for (const auto& [name, p] : params) s.velocity.emplace(name, Tensor<T>(p.shape(), T(0)));
  return s;
}

template <typename T>
NamedTensors<T> collect_grads(const NamedTensors<T>& params) {
  NamedTensors<T> out;
  for (const auto& [name, p] : params) out.emplace(name, p.grad());
  return out;
}

namespace {

template <typename A, typename B>
std::string missing_keys(const std::map<std::string, A>& want, const std::map<std::string, B>& have) {
  std::string out;
  for (const auto& [name, v] : want) {
    if (!have.count(name)) out += (out.empty() ? "" : ", ") + name;
  }
  return out;
}

}  // namespace

template <typename T>
void sgd_step(NamedTensors<T>& params, const NamedTensors<T>& grads, OptimizerState<T>& state) {
  std::string problems;
  auto note = [&](const std::string& what, const std::string& keys) {
    if (!keys.empty()) problems += (problems.empty() ? "" : "; ") + what + ": " + keys;
  };
  note("missing gradients", missing_keys(params, grads));
  note("gradients without parameters", missing_keys(grads, params));
  note("missing velocities", missing_keys(params, state.velocity));
  if (!problems.empty()) throw ContractError("sgd_step key mismatch: " + problems);

  const T lr = static_cast<T>(state.options.learning_rate * state.lr_scale);
  const T momentum = static_cast<T>(state.options.momentum);
  for (auto& [name, p] : params) {
    const auto& g = grads.at(name);
    auto& v = state.velocity.at(name);
    if (g.shape() != p.shape() || v.shape() != p.shape()) {
      throw DimensionError("sgd_step: '" + name + "' parameter " + shape_to_string(p.shape()) + ", gradient " +
                           shape_to_string(g.shape()) + ", velocity " + shape_to_string(v.shape()));
    }
    const T decay = p.rank() >= 2 ? static_cast<T>(state.options.weight_decay) : T(0);
    auto pv = p.mutable_data();
    auto vv = v.mutable_data();
    const auto gv = g.data();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      vv[i] = momentum * vv[i] + gv[i] + decay * pv[i];
      pv[i] -= lr * vv[i];
    }
  }
  ++state.step;
}

template <typename T>
TrainerState<T> make_trainer(const ModelParams<T>& params, std::uint64_t seed, const SgdOptions& options) {
  TrainerState<T> s{make_optimizer(params.tensors, options), Rng(derive_seed(seed, 1)), 0, seed};
  return s;
}

namespace {

std::vector<SequenceLandmarks> gather_landmarks(const Dataset& data, const std::vector<std::size_t>& idx) {
  std::vector<SequenceLandmarks> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data.samples[i].landmarks);
  return out;
}

std::vector<std::size_t> gather_labels(const Dataset& data, const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data.samples[i].label);
  return out;
}

}  // namespace

template <typename T>
EpochMetrics train_epoch(ModelParams<T>& params, const Dataset& data, std::size_t batch_size, TrainerState<T>& state,
                         MaskCache* cache, const ForwardOptions& base) {
  if (data.empty()) throw DataError("cannot train on an empty dataset");
  if (batch_size == 0) throw ContractError("batch size must be positive");
  const auto& opt = state.optimizer.options;
  state.optimizer.lr_scale =
      opt.decay_every_epochs ? std::pow(opt.decay_factor, static_cast<double>(state.epoch / opt.decay_every_epochs))
                             : 1.0;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  state.rng.shuffle(order.begin(), order.end());

  const std::size_t k = params.config.num_classes;
  EpochMetrics m;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                       order.begin() + static_cast<long>(std::min(order.size(), start + batch_size)));
    const auto labels = gather_labels(data, idx);
    ForwardOptions fo = base;
    fo.mode = Mode::Train;
    fo.rng = &state.rng;
    fo.mask_cache = cache;
    params.zero_grad();
    const auto logits = forward(params, stack_clips<T>(data, idx), gather_landmarks(data, idx), fo);
    auto loss = softmax_cross_entropy(logits, one_hot<T>(labels, k));
    loss.backward();
    const auto grads = collect_grads(params.tensors);
    sgd_step(params.tensors, grads, state.optimizer);

    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < idx.size(); ++i) correct += pred[i] == labels[i];
    m.loss += static_cast<double>(loss.item());
    ++m.batches;
  }
  params.zero_grad();
  m.loss /= static_cast<double>(m.batches);
  m.samples = data.size();
  m.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  ++state.epoch;
  return m;
}

template <typename T>
EvalResult evaluate(const ModelParams<T>& params, const Dataset& data, std::size_t batch_size, MaskCache* cache,
                    const std::vector<std::size_t>& allowed, const ForwardOptions& base) {
  if (data.empty()) throw DataError("cannot evaluate an empty dataset");
  if (batch_size == 0) throw ContractError("batch size must be positive");
  NoGradGuard no_grad;
  const std::size_t k = params.config.num_classes;
  std::vector<bool> permitted(k, allowed.empty());
  for (auto c : allowed) {
    if (c >= k) throw ContractError("allowed class " + std::to_string(c) + " out of range");
    permitted[c] = true;
  }
  EvalResult r;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const auto labels = gather_labels(data, idx);
    ForwardOptions fo = base;
    fo.mode = Mode::Eval;
    fo.mask_cache = cache;
    const auto logits = forward(params, stack_clips<T>(data, idx), gather_landmarks(data, idx), fo);
    loss_sum += static_cast<double>(softmax_cross_entropy(logits, one_hot<T>(labels, k)).item()) *
                static_cast<double>(idx.size());
    const auto z = logits.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t best = k;
      for (std::size_t j = 0; j < k; ++j) {
        if (permitted[j] && (best == k || z[i * k + j] > z[i * k + best])) best = j;
      }
      r.truths.push_back(labels[i]);
      r.predictions.push_back(best);
      correct += best == labels[i];
    }
  }
  r.loss = loss_sum / static_cast<double>(data.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

void append_metrics_csv(const fs::path& path, const EpochLog& row) {
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream os(path, std::ios::app);
  if (!os) throw IoError("cannot open " + path.string() + " for appending");
  if (fresh) os << "epoch,split,loss,accuracy\n";
  os.precision(17);
  os << row.epoch << ',' << row.split << ',' << row.loss << ',' << row.accuracy << '\n';
}

template <typename T>
FitResult<T> fit(ModelParams<T>& params, const Dataset& train, const Dataset* validation, const FitOptions& options,
                 TrainerState<T>& state, MaskCache* cache) {
  FitResult<T> result;
  ForwardOptions base;
  base.mask_source = options.mask_source;
  auto emit = [&](EpochLog row) {
    result.history.push_back(row);
    if (options.metrics_csv) append_metrics_csv(*options.metrics_csv, row);
    if (options.on_epoch) options.on_epoch(row);
  };
  while (state.epoch < options.epochs) {
    const auto m = train_epoch(params, train, options.batch_size, state, cache, base);
    ++result.epochs_run;
    emit({state.epoch, "train", m.loss, m.accuracy});
    if (validation && !validation->empty()) {
      const auto v = evaluate(params, *validation, options.batch_size, cache, {}, base);
      emit({state.epoch, "validation", v.loss, v.accuracy});
      if (v.accuracy > result.best_validation_accuracy) {
        result.best_validation_accuracy = v.accuracy;
        result.best = params.clone();
      }
    }
    if (options.target_train_accuracy > 0.0 && m.accuracy >= options.target_train_accuracy) {
      const auto e = evaluate(params, train, options.batch_size, cache, {}, base);
      result.final_train_accuracy = e.accuracy;
      if (e.accuracy >= options.target_train_accuracy) break;
    }
  }
  return result;
}

template <typename T>
void save_checkpoint(const fs::path& path, const ModelParams<T>& params, const TrainerState<T>& state) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    io::write_u32(os, kCheckpointVersion);
    io::write_u64(os, params.config.hash());
    io::write_string(os, params.config.to_text());
    io::write_u64(os, state.seed);
    io::write_u64(os, state.epoch);
    io::write_u64(os, state.optimizer.step);
    const auto& o = state.optimizer.options;
    io::write_f64(os, o.learning_rate);
    io::write_f64(os, o.momentum);
    io::write_f64(os, o.weight_decay);
    io::write_f64(os, o.decay_factor);
    io::write_f64(os, state.optimizer.lr_scale);
    io::write_u64(os, o.decay_every_epochs);
    io::write_string(os, kInitScheme);
    io::write_string(os, state.rng.state());
    io::write_u64(os, params.tensors.size() + state.optimizer.velocity.size());
    for (const auto& [name, t] : params.tensors) {
      io::write_string(os, name);
      write_tensor(os, t);
    }
    for (const auto& [name, t] : state.optimizer.velocity) {
      io::write_string(os, "velocity/" + name);
      write_tensor(os, t);
    }
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const fs::path& path, const ModelConfig* expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  const std::string where = path.string() + ": ";
  try {
    char magic[sizeof kCheckpointMagic];
    io::read_exact(is, magic, sizeof magic);
    if (!std::equal(magic, magic + sizeof magic, kCheckpointMagic)) throw FormatError(where + "not a checkpoint (bad magic)");
    const auto version = io::read_u32(is);
    if (version != kCheckpointVersion) {
      throw FormatError(where + "unsupported checkpoint version " + std::to_string(version));
    }
    const auto hash = io::read_u64(is);
    const auto text = io::read_string(is);
    ModelConfig config;
    try {
      config = ModelConfig::parse(text);
    } catch (const ConfigError& e) {
      throw FormatError(where + "stored config is unreadable: " + e.what());
    }
    if (config.hash() != hash) throw FormatError(where + "stored config does not match its hash");
    if (expected && expected->hash() != hash) {
      throw CompatibilityError(where + "checkpoint config hash " + std::to_string(hash) +
                               " differs from the active config hash " + std::to_string(expected->hash()));
    }
    const auto seed = io::read_u64(is);
    Checkpoint<T> ck{build<T>(config, seed), TrainerState<T>{}};
    auto& st = ck.state;
    st.seed = seed;
    st.epoch = io::read_u64(is);
    st.optimizer.step = io::read_u64(is);
    auto& o = st.optimizer.options;
    o.learning_rate = io::read_f64(is);
    o.momentum = io::read_f64(is);
    o.weight_decay = io::read_f64(is);
    o.decay_factor = io::read_f64(is);
    st.optimizer.lr_scale = io::read_f64(is);
    o.decay_every_epochs = io::read_u64(is);
    io::read_string(is);  // init scheme, informational
    st.rng.restore(io::read_string(is));
    for (const auto& [name, p] : ck.params.tensors) st.optimizer.velocity.emplace(name, Tensor<T>(p.shape(), T(0)));

    const auto records = io::read_u64(is);
    const std::size_t expected_records = ck.params.tensors.size() * 2;
    if (records != expected_records) {
      throw FormatError(where + std::to_string(records) + " tensor records, expected " +
                        std::to_string(expected_records));
    }
    std::map<std::string, bool> seen;
    for (std::uint64_t r = 0; r < records; ++r) {
      const auto name = io::read_string(is);
      auto t = read_tensor<T>(is);
      const bool velocity = name.rfind("velocity/", 0) == 0;
      auto& table = velocity ? st.optimizer.velocity : ck.params.tensors;
      auto it = table.find(velocity ? name.substr(9) : name);
      if (it == table.end()) throw FormatError(where + "unknown tensor record '" + name + "'");
      if (it->second.shape() != t.shape()) {
        throw FormatError(where + "record '" + name + "' has shape " + shape_to_string(t.shape()) + ", expected " +
                          shape_to_string(it->second.shape()));
      }
      if (seen[name]) throw FormatError(where + "duplicate tensor record '" + name + "'");
      seen[name] = true;
      std::copy(t.data().begin(), t.data().end(), it->second.mutable_data().begin());
    }
    return ck;
  } catch (const FormatError&) {
    throw;
  } catch (const CompatibilityError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(where + e.what());
  }
}

#define DIR3D_INSTANTIATE_TRAINING(T)                                                                          \
  template OptimizerState<T> make_optimizer(const NamedTensors<T>&, const SgdOptions&);                       \
  template NamedTensors<T> collect_grads(const NamedTensors<T>&);                                             \
  template void sgd_step(NamedTensors<T>&, const NamedTensors<T>&, OptimizerState<T>&);                        \
  template TrainerState<T> make_trainer(const ModelParams<T>&, std::uint64_t, const SgdOptions&);             \
  template EpochMetrics train_epoch(ModelParams<T>&, const Dataset&, std::size_t, TrainerState<T>&, MaskCache*, \
                                    const ForwardOptions&);                                                   \
  template EvalResult evaluate(const ModelParams<T>&, const Dataset&, std::size_t, MaskCache*,                \
                               const std::vector<std::size_t>&, const ForwardOptions&);                       \
  template FitResult<T> fit(ModelParams<T>&, const Dataset&, const Dataset*, const FitOptions&, TrainerState<T>&, \
                            MaskCache*);                                                                      \
  template void save_checkpoint(const fs::path&, const ModelParams<T>&, const TrainerState<T>&);              \
  template Checkpoint<T> load_checkpoint(const fs::path&, const ModelConfig*);

DIR3D_INSTANTIATE_TRAINING(float)
DIR3D_INSTANTIATE_TRAINING(double)

#undef DIR3D_INSTANTIATE_TRAINING

}  // namespace dir3d
