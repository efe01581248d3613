#include "dir3d/model.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace dir3d {

namespace {

std::string extents(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out;
}

// Walks a layer over a [T, H, W, C] shape, reporting config errors against `stage`.
Shape layer_output(const std::string& stage, const LayerSpec& spec, const Shape& in, std::size_t& params) {
  Shape out(4);
  try {
    out[0] = window_output_extent(in[0], spec.window[0], spec.stride[0], spec.padding.t);
    out[1] = window_output_extent(in[1], spec.window[1], spec.stride[1], spec.padding.h);
    out[2] = window_output_extent(in[2], spec.window[2], spec.stride[2], spec.padding.w);
  } catch (const Error&) {
    throw ConfigError(stage + ": layer '" + spec.to_string() + "' does not fit input " + extents(in));
  }
  if (spec.kind == LayerKind::Conv) {
    out[3] = spec.channels;
    params += spec.window[0] * spec.window[1] * spec.window[2] * in[3] * spec.channels + spec.channels;
  } else {
    out[3] = in[3];
  }
  return out;
}

}  // namespace

ShapeTrace trace_shapes(const ModelConfig& c) {
  ShapeTrace tr;
  if (c.frames == 0 || c.height == 0 || c.width == 0 || c.channels == 0) {
    throw ConfigError("input: extents must be positive");
  }
  if (c.num_classes < 2) throw ConfigError("classes: need at least 2, got " + std::to_string(c.num_classes));
  if (c.lstm_hidden == 0) throw ConfigError("lstm: hidden size must be positive");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw ConfigError("dropout: rate must be in [0, 1)");
  if (c.mask.window == 0 || c.mask.window % 2 == 0) throw ConfigError("landmarks: window must be odd");

  Shape cur{c.frames, c.height, c.width, c.channels};
  tr.rows.push_back({"input", "clip", cur});

  for (std::size_t i = 0; i < c.stem.size(); ++i) {
    cur = layer_output("stem", c.stem[i], cur, tr.parameter_count);
    tr.rows.push_back({"stem", c.stem[i].to_string(), cur});
  }
  if (c.stem_output_grid && (cur[1] != c.stem_output_grid || cur[2] != c.stem_output_grid)) {
    throw ConfigError("stem: output grid " + std::to_string(cur[1]) + "x" + std::to_string(cur[2]) + ", expected " +
                      std::to_string(c.stem_output_grid) + "x" + std::to_string(c.stem_output_grid));
  }
  tr.stem_output = cur;

  auto residual_stage = [&](const std::string& name, const std::vector<BranchSpec>& branches, std::size_t repeats) {
    if (repeats > 0 && branches.empty()) throw ConfigError(name + ": no branches configured");
    for (std::size_t r = 0; r < repeats; ++r) {
      const std::string stage = name + "[" + std::to_string(r) + "]";
      std::size_t concat_channels = 0;
      for (std::size_t b = 0; b < branches.size(); ++b) {
        Shape s = cur;
        for (const auto& spec : branches[b]) s = layer_output(stage + ".branch" + std::to_string(b), spec, s, tr.parameter_count);
        if (s[0] != cur[0] || s[1] != cur[1] || s[2] != cur[2]) {
          throw ConfigError(stage + ".branch" + std::to_string(b) + ": output " + extents(s) +
                            " changes the residual extents " + extents(cur));
        }
        tr.rows.push_back({stage, "branch" + std::to_string(b) + ": " + branch_to_string(branches[b]), s});
        concat_channels += s[3];
      }
      tr.parameter_count += concat_channels * cur[3] + cur[3];
      tr.rows.push_back({stage, "linear 1x1x1 projection " + std::to_string(concat_channels) + " -> " +
                                    std::to_string(cur[3]) + ", masked shortcut sum, relu",
                         cur});
    }
  };

  auto reduction_stage = [&](const std::string& name, const std::vector<BranchSpec>& branches, std::size_t grid) {
    if (branches.empty()) throw ConfigError(name + ": no branches configured");
    Shape merged;
    for (std::size_t b = 0; b < branches.size(); ++b) {
      Shape s = cur;
      for (const auto& spec : branches[b]) s = layer_output(name + ".branch" + std::to_string(b), spec, s, tr.parameter_count);
      tr.rows.push_back({name, "branch" + std::to_string(b) + ": " + branch_to_string(branches[b]), s});
      if (merged.empty()) {
        merged = s;
      } else if (s[0] != merged[0] || s[1] != merged[1] || s[2] != merged[2]) {
        throw ConfigError(name + ".branch" + std::to_string(b) + ": output " + extents(s) + " disagrees with " +
                          extents(merged));
      } else {
        merged[3] += s[3];
      }
    }
    if (grid && (merged[1] != grid || merged[2] != grid)) {
      throw ConfigError(name + ": output grid " + std::to_string(merged[1]) + "x" + std::to_string(merged[2]) +
                        ", expected " + std::to_string(grid) + "x" + std::to_string(grid));
    }
    cur = merged;
    tr.rows.push_back({name, "concat", cur});
  };

  residual_stage("block_a", c.block_a, c.block_a_repeats);
  tr.block_a_output = cur;
  reduction_stage("reduction_a", c.reduction_a, c.reduction_a_output_grid);
  tr.reduction_a_output = cur;
  residual_stage("block_b", c.block_b, c.block_b_repeats);
  tr.block_b_output = cur;
  reduction_stage("reduction_b", c.reduction_b, c.reduction_b_output_grid);
  tr.reduction_b_output = cur;
  residual_stage("block_c", c.block_c, c.block_c_repeats);
  tr.block_c_output = cur;

  const std::size_t ph = c.pool_window ? c.pool_window : cur[1];
  const std::size_t pw = c.pool_window ? c.pool_window : cur[2];
  if (ph > cur[1] || pw > cur[2]) {
    throw ConfigError("pool: window " + std::to_string(ph) + " exceeds grid " + extents(cur));
  }
  cur = {cur[0], (cur[1] - ph) / ph + 1, (cur[2] - pw) / pw + 1, cur[3]};
  tr.rows.push_back({"pool", "average 1x" + std::to_string(ph) + "x" + std::to_string(pw), cur});
  tr.rows.push_back({"dropout", "rate " + std::to_string(c.dropout), cur});

  const std::size_t cells = cur[1] * cur[2] * cur[3];
  tr.lstm_steps = c.lstm_input == LstmInput::PerFrame ? cur[0] : 1;
  tr.lstm_input = c.lstm_input == LstmInput::PerFrame ? cells : cells * cur[0];
  tr.rows.push_back({"lstm", "input sequence", {tr.lstm_steps, tr.lstm_input}});
  tr.parameter_count += 4 * (c.lstm_hidden * (c.lstm_hidden + tr.lstm_input) + c.lstm_hidden);
  tr.rows.push_back({"lstm", "final hidden state", {c.lstm_hidden}});
  tr.parameter_count += c.lstm_hidden * c.num_classes + c.num_classes;
  tr.rows.push_back({"fc", "logits (softmax)", {c.num_classes}});
  return tr;
}

std::string format_trace(const std::vector<TraceRow>& rows) {
  std::size_t stage_w = 5, shape_w = 5;
  for (const auto& r : rows) {
    stage_w = std::max(stage_w, r.stage.size());
    shape_w = std::max(shape_w, extents(r.shape).size());
  }
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(stage_w)) << "stage" << "  " << std::setw(static_cast<int>(shape_w))
     << "shape" << "  layer\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(stage_w)) << r.stage << "  " << std::setw(static_cast<int>(shape_w))
       << extents(r.shape) << "  " << r.layer << '\n';
  }
  return os.str();
}

namespace {

// Allocates zero-valued parameters and registers them by name.
template <typename T>
ModelParams<T> allocate(const ModelConfig& config) {
  trace_shapes(config);  // validates
  ModelParams<T> p;
  p.config = config;

  auto make = [&](const std::string& name, Shape shape) {
    auto t = Tensor<T>::parameter(shape, std::vector<T>(numel(shape), T(0)));
    p.tensors.emplace(name, t);
    return t;
  };
  auto make_unit = [&](const std::string& name, const LayerSpec& spec, std::size_t& channels) {
    UnitParams<T> u;
    u.spec = spec;
    if (spec.kind == LayerKind::Conv) {
      u.kernel = make(name + ".kernel", {spec.window[0], spec.window[1], spec.window[2], channels, spec.channels});
      u.bias = make(name + ".bias", {spec.channels});
      channels = spec.channels;
    }
    return u;
  };
  auto make_branches = [&](const std::string& prefix, const std::vector<BranchSpec>& specs, std::size_t in_channels,
                           std::size_t& out_channels) {
    std::vector<BranchParams<T>> branches;
    out_channels = 0;
    for (std::size_t b = 0; b < specs.size(); ++b) {
      std::size_t ch = in_channels;
      BranchParams<T> branch;
      for (std::size_t l = 0; l < specs[b].size(); ++l) {
        branch.push_back(make_unit(prefix + ".branch" + std::to_string(b) + "." + std::to_string(l), specs[b][l], ch));
      }
      out_channels += ch;
      branches.push_back(std::move(branch));
    }
    return branches;
  };
  auto make_residual = [&](const std::string& name, const std::vector<BranchSpec>& specs, std::size_t repeats,
                           std::size_t channels) {
    std::vector<LandmarkResidualBlockParams<T>> blocks;
    for (std::size_t r = 0; r < repeats; ++r) {
      const std::string prefix = name + "." + std::to_string(r);
      LandmarkResidualBlockParams<T> block;
      std::size_t mixed = 0;
      block.branches = make_branches(prefix, specs, channels, mixed);
      LayerSpec proj;
      proj.kind = LayerKind::Conv;
      proj.channels = channels;
      proj.linear = true;
      block.projection = make_unit(prefix + ".projection", proj, mixed);
      block.residual_scale = static_cast<T>(config.residual_scale);
      blocks.push_back(std::move(block));
    }
    return blocks;
  };

  std::size_t channels = config.channels;
  for (std::size_t i = 0; i < config.stem.size(); ++i) {
    p.stem.push_back(make_unit("stem." + std::to_string(i), config.stem[i], channels));
  }
  p.block_a = make_residual("block_a", config.block_a, config.block_a_repeats, channels);
  p.reduction_a.variant = "A";
  p.reduction_a.expected_input_grid = config.stem_output_grid;
  p.reduction_a.branches = make_branches("reduction_a", config.reduction_a, channels, channels);
  p.block_b = make_residual("block_b", config.block_b, config.block_b_repeats, channels);
  p.reduction_b.variant = "B";
  p.reduction_b.expected_input_grid = config.reduction_a_output_grid;
  p.reduction_b.branches = make_branches("reduction_b", config.reduction_b, channels, channels);
  p.block_c = make_residual("block_c", config.block_c, config.block_c_repeats, channels);

  const auto tr = trace_shapes(config);
  const std::size_t h = config.lstm_hidden;
  p.lstm.hidden = h;
  p.lstm.W_f = make("lstm.W_f", {h, h + tr.lstm_input});
  p.lstm.W_i = make("lstm.W_i", {h, h + tr.lstm_input});
  p.lstm.W_o = make("lstm.W_o", {h, h + tr.lstm_input});
  p.lstm.W_C = make("lstm.W_C", {h, h + tr.lstm_input});
  p.lstm.b_f = make("lstm.b_f", {h});
  p.lstm.b_i = make("lstm.b_i", {h});
  p.lstm.b_o = make("lstm.b_o", {h});
  p.lstm.b_C = make("lstm.b_C", {h});
  p.fc.weight = make("fc.weight", {h, config.num_classes});
  p.fc.bias = make("fc.bias", {config.num_classes});
  return p;
}

}  // namespace

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
  auto copy = allocate<T>(config);
  copy.copy_values_from(*this);
  return copy;
}

template <typename T>
void ModelParams<T>::copy_values_from(const ModelParams& other) {
  for (auto& [name, t] : tensors) {
    auto it = other.tensors.find(name);
    if (it == other.tensors.end() || it->second.shape() != t.shape()) {
      throw ContractError("parameter '" + name + "' missing or mismatched in source");
    }
    std::copy(it->second.data().begin(), it->second.data().end(), t.mutable_data().begin());
  }
}

template <typename T>
void ModelParams<T>::zero_grad() {
  for (auto& [name, t] : tensors) t.zero_grad();
}

template <typename T>
ModelParams<T> build(const ModelConfig& config, std::uint64_t seed) {
  auto p = allocate<T>(config);
  Rng rng(seed);
  const double lstm_bound = std::sqrt(1.0 / static_cast<double>(config.lstm_hidden));
  // std::map iteration gives a stable, config-determined order.
  for (auto& [name, t] : p.tensors) {
    auto values = t.mutable_data();
    const auto& s = t.shape();
    if (name.rfind("lstm.W_", 0) == 0) {
      for (auto& v : values) v = static_cast<T>(rng.uniform(-lstm_bound, lstm_bound));
    } else if (name == "lstm.b_f") {
      for (auto& v : values) v = T(1);
    } else if (s.size() >= 2) {
      std::size_t fan_in = 1;
      for (std::size_t i = 0; i + 1 < s.size(); ++i) fan_in *= s[i];
      const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (auto& v : values) v = static_cast<T>(rng.truncated_normal(std));
    }
  }
  return p;
}

template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& scores) {
  if (scores.rank() != 2) throw DimensionError("argmax_rows needs a matrix, got " + shape_to_string(scores.shape()));
  const std::size_t rows = scores.dim(0), k = scores.dim(1);
  std::vector<std::size_t> out(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = scores.data().data() + r * k;
    for (std::size_t j = 1; j < k; ++j) {
      if (row[j] > row[out[r]]) out[r] = j;
    }
  }
  return out;
}

template <typename T>
Tensor<T> forward(const ModelParams<T>& params, const Tensor<T>& clips, const std::vector<SequenceLandmarks>& landmarks,
                  const ForwardOptions& options) {
  const auto& c = params.config;
  if (clips.rank() != 5 || clips.dim(1) != c.frames || clips.dim(2) != c.height || clips.dim(3) != c.width ||
      clips.dim(4) != c.channels) {
    throw DimensionError("clips " + shape_to_string(clips.shape()) + " do not match configured input [batch x " +
                         std::to_string(c.frames) + "x" + std::to_string(c.height) + "x" + std::to_string(c.width) +
                         "x" + std::to_string(c.channels) + "]");
  }
  const std::size_t batch = clips.dim(0);
  const MaskSource source = options.mask_source.value_or(c.use_landmarks ? MaskSource::Landmarks : MaskSource::None);
  if (source == MaskSource::Landmarks) {
    if (landmarks.size() != batch) {
      throw DataError("expected landmarks for " + std::to_string(batch) + " samples, got " +
                      std::to_string(landmarks.size()));
    }
    for (std::size_t i = 0; i < batch; ++i) {
      if (landmarks[i].size() != c.frames) {
        throw DataError("sample " + std::to_string(i) + " has " + std::to_string(landmarks[i].size()) +
                        " landmark frames for a " + std::to_string(c.frames) + "-frame clip");
      }
    }
  }
  if (options.mode == Mode::Train && c.dropout > 0.0 && !options.rng) {
    throw ContractError("train-mode forward with dropout needs a random generator");
  }

  auto record = [&](const std::string& stage, const std::string& layer, const Tensor<T>& x) {
    if (!options.trace) return;
    Shape s(x.shape().begin() + 1, x.shape().end());
    options.trace->push_back({stage, layer, s});
  };

  auto make_mask = [&](const Tensor<T>& x) -> std::optional<Tensor<T>> {
    const Shape& s = x.shape();
    const Shape mask_shape{s[0], s[1], s[2], s[3], 1};
    if (source == MaskSource::None) return std::nullopt;
    if (source == MaskSource::Ones) return Tensor<T>(mask_shape, T(1));
    const GridSize grid{s[2], s[3]};
    const std::size_t plane = s[1] * s[2] * s[3];
    std::vector<T> data(batch * plane);
    for (std::size_t i = 0; i < batch; ++i) {
      auto m = options.mask_cache ? options.mask_cache->get<T>(landmarks[i], s[1], grid, c.mask)
                                  : mask_for_feature_map<T>(landmarks[i], s[1], grid, c.mask);
      std::copy(m.data().begin(), m.data().end(), data.begin() + static_cast<long>(i * plane));
    }
    return Tensor<T>(mask_shape, std::move(data));
  };

  Tensor<T> x = clips;
  record("input", "clip", x);
  for (const auto& unit : params.stem) {
    x = apply_unit(x, unit);
    record("stem", unit.spec.to_string(), x);
  }

  const auto mask_a = params.block_a.empty() ? std::nullopt : make_mask(x);
  for (std::size_t r = 0; r < params.block_a.size(); ++r) {
    x = landmark_residual_block(x, mask_a, params.block_a[r]);
    record("block_a[" + std::to_string(r) + "]", "masked residual", x);
  }
  x = reduction_block(x, params.reduction_a);
  record("reduction_a", "concat", x);

  const auto mask_b = params.block_b.empty() ? std::nullopt : make_mask(x);
  for (std::size_t r = 0; r < params.block_b.size(); ++r) {
    x = landmark_residual_block(x, mask_b, params.block_b[r]);
    record("block_b[" + std::to_string(r) + "]", "masked residual", x);
  }
  x = reduction_block(x, params.reduction_b);
  record("reduction_b", "concat", x);

  // The last stage's grid is too coarse for landmark masks: plain shortcut.
  for (std::size_t r = 0; r < params.block_c.size(); ++r) {
    x = landmark_residual_block(x, std::optional<Tensor<T>>{}, params.block_c[r]);
    record("block_c[" + std::to_string(r) + "]", "residual", x);
  }

  const std::size_t ph = c.pool_window ? c.pool_window : x.dim(2);
  const std::size_t pw = c.pool_window ? c.pool_window : x.dim(3);
  x = pool3d(x, {1, ph, pw}, {1, ph, pw}, Padding3(Padding::Valid), PoolMode::Average);
  record("pool", "average", x);
  Rng unused(0);
  x = dropout(x, c.dropout, options.mode, options.rng ? *options.rng : unused);

  const std::size_t steps = x.dim(1);
  const std::size_t cells = x.dim(2) * x.dim(3) * x.dim(4);
  x = c.lstm_input == LstmInput::PerFrame ? reshape(x, {batch, steps, cells}) : reshape(x, {batch, 1, steps * cells});
  record("lstm", "input sequence", x);
  x = lstm_sequence(x, params.lstm);
  record("lstm", "final hidden state", x);
  x = fully_connected(x, params.fc);
  record("fc", "logits", x);
  return x;
}

template <typename T>
Prediction<T> predict(const ModelParams<T>& params, const Tensor<T>& clips,
                      const std::vector<SequenceLandmarks>& landmarks, MaskCache* cache) {
  NoGradGuard no_grad;
  ForwardOptions options;
  options.mask_cache = cache;
  const auto logits = forward(params, clips, landmarks, options);
  return {argmax_rows(logits), softmax(logits)};
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template ModelParams<float> build(const ModelConfig&, std::uint64_t);
template ModelParams<double> build(const ModelConfig&, std::uint64_t);
template std::vector<std::size_t> argmax_rows(const Tensor<float>&);
template std::vector<std::size_t> argmax_rows(const Tensor<double>&);
template Tensor<float> forward(const ModelParams<float>&, const Tensor<float>&, const std::vector<SequenceLandmarks>&,
                               const ForwardOptions&);
template Tensor<double> forward(const ModelParams<double>&, const Tensor<double>&,
                                const std::vector<SequenceLandmarks>&, const ForwardOptions&);
template Prediction<float> predict(const ModelParams<float>&, const Tensor<float>&,
                                   const std::vector<SequenceLandmarks>&, MaskCache*);
template Prediction<double> predict(const ModelParams<double>&, const Tensor<double>&,
                                    const std::vector<SequenceLandmarks>&, MaskCache*);

std::vector<GradCheckResult> check_model_gradients(const ModelConfig& config, std::uint64_t seed,
                                                   const GradCheckOptions& options) {
  auto params = build<double>(config, seed);
  Rng rng(derive_seed(seed, 7));
  for (auto& [name, t] : params.tensors) {
    if (name.ends_with(".bias")) {
      for (auto& v : t.mutable_data()) v = rng.uniform(-0.1, 0.1);
    }
  }
  const std::size_t batch = 2;
  std::vector<double> values(batch * config.frames * config.height * config.width * config.channels);
  for (auto& v : values) v = rng.uniform();
  const Tensor<double> clips({batch, config.frames, config.height, config.width, config.channels}, values);
  std::vector<SequenceLandmarks> landmarks(batch);
  for (auto& seq : landmarks) {
    for (std::size_t t = 0; t < config.frames; ++t) {
      std::vector<Point2> pts(kLandmarkCount);
      for (auto& p : pts) {
        p = {rng.uniform(0.0, static_cast<double>(config.width)), rng.uniform(0.0, static_cast<double>(config.height))};
      }
      seq.emplace_back(std::move(pts), config.height, config.width);
    }
  }
  Tensor<double> labels({batch, config.num_classes}, 0.0);
  for (std::size_t b = 0; b < batch; ++b) labels.mutable_data()[b * config.num_classes + b % config.num_classes] = 1.0;

  std::vector<std::pair<std::string, Tensor<double>>> inputs(params.tensors.begin(), params.tensors.end());
  auto loss = [&] { return softmax_cross_entropy(forward(params, clips, landmarks), labels); };
  GradCheckOptions o = options;
  o.freeze_activations = true;
  return check_gradients<double>(loss, inputs, o);
}

}  // namespace dir3d
