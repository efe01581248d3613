#include "dir3d/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace dir3d {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

Extent3 parse_extent(const std::string& text) {
  const auto parts = split(text, 'x');
  if (parts.size() != 3) throw ConfigError("expected TxHxW extent, got '" + text + "'");
  Extent3 e{};
  for (std::size_t i = 0; i < 3; ++i) {
    e[i] = parse_size("extent", parts[i]);
    if (e[i] == 0) throw ConfigError("extents must be positive in '" + text + "'");
  }
  return e;
}

std::string extent_to_string(const Extent3& e) {
  return std::to_string(e[0]) + "x" + std::to_string(e[1]) + "x" + std::to_string(e[2]);
}

char padding_letter(Padding p) { return p == Padding::Same ? 'S' : 'V'; }

Padding padding_from(char c) {
  if (c == 'S' || c == 's') return Padding::Same;
  if (c == 'V' || c == 'v') return Padding::Valid;
  throw ConfigError(std::string("padding letter must be S or V, got '") + c + "'");
}

const char* kReferenceText = R"(# Reference network: 10x299x299x3 clips, stem -> 38x38, Reduction-A -> 18x18, Reduction-B -> 8x8.
# Inception-ResNet-v1 style branches with every 2D kernel lifted to 3D. The
# time axis is always 'same'-padded so all ten frames survive to the LSTM.
input.frames = 10
input.height = 299
input.width = 299
input.channels = 3
stem.layers = conv k=3x3x3 s=1x2x2 p=SVV c=32; conv k=3x3x3 s=1x1x1 p=S c=32; conv k=3x3x3 s=1x1x1 p=S c=64; maxpool k=3x3x3 s=1x2x2 p=S; conv k=1x1x1 s=1x1x1 p=S c=80; conv k=3x3x3 s=1x1x1 p=S c=192; conv k=3x3x3 s=1x2x2 p=S c=256
stem.output_grid = 38
block_a.repeats = 1
block_a.branch0 = conv k=1x1x1 s=1x1x1 p=S c=32
block_a.branch1 = conv k=1x1x1 s=1x1x1 p=S c=32; conv k=3x3x3 s=1x1x1 p=S c=32
block_a.branch2 = conv k=1x1x1 s=1x1x1 p=S c=32; conv k=3x3x3 s=1x1x1 p=S c=32; conv k=3x3x3 s=1x1x1 p=S c=32
reduction_a.branch0 = conv k=3x3x3 s=1x2x2 p=SVV c=384
reduction_a.branch1 = conv k=1x1x1 s=1x1x1 p=S c=192; conv k=3x3x3 s=1x1x1 p=S c=192; conv k=3x3x3 s=1x2x2 p=SVV c=256
reduction_a.branch2 = maxpool k=3x3x3 s=1x2x2 p=SVV
reduction_a.output_grid = 18
block_b.repeats = 1
block_b.branch0 = conv k=1x1x1 s=1x1x1 p=S c=128
block_b.branch1 = conv k=1x1x1 s=1x1x1 p=S c=128; conv k=1x1x7 s=1x1x1 p=S c=128; conv k=1x7x1 s=1x1x1 p=S c=128
reduction_b.branch0 = conv k=1x1x1 s=1x1x1 p=S c=256; conv k=3x3x3 s=1x2x2 p=SVV c=384
reduction_b.branch1 = conv k=1x1x1 s=1x1x1 p=S c=256; conv k=3x3x3 s=1x2x2 p=SVV c=256
reduction_b.branch2 = conv k=1x1x1 s=1x1x1 p=S c=256; conv k=3x3x3 s=1x1x1 p=S c=256; conv k=3x3x3 s=1x2x2 p=SVV c=256
reduction_b.branch3 = maxpool k=3x3x3 s=1x2x2 p=SVV
reduction_b.output_grid = 8
block_c.repeats = 1
block_c.branch0 = conv k=1x1x1 s=1x1x1 p=S c=192
block_c.branch1 = conv k=1x1x1 s=1x1x1 p=S c=192; conv k=1x1x3 s=1x1x1 p=S c=192; conv k=1x3x1 s=1x1x1 p=S c=192
pool.window = 0
dropout.rate = 0.2
residual.scale = 1
lstm.hidden = 200
lstm.input = per_frame
classes = 7
landmarks.enabled = true
landmarks.window = 7
landmarks.slope = 0.1
landmarks.background = 0
landmarks.metric = manhattan
)";

const char* kToyText = R"(# Desk-scale network: 10x64x64x1 clips, stem -> 16x16, Reduction-A -> 7x7, Reduction-B -> 3x3.
input.frames = 10
input.height = 64
input.width = 64
input.channels = 1
stem.layers = conv k=3x3x3 s=1x2x2 p=SVV c=8; maxpool k=3x3x3 s=1x2x2 p=S; conv k=1x1x1 s=1x1x1 p=S c=16
stem.output_grid = 16
block_a.repeats = 1
block_a.branch0 = conv k=1x1x1 s=1x1x1 p=S c=4
block_a.branch1 = conv k=1x1x1 s=1x1x1 p=S c=4; conv k=3x3x3 s=1x1x1 p=S c=4
block_a.branch2 = conv k=1x1x1 s=1x1x1 p=S c=4; conv k=3x3x3 s=1x1x1 p=S c=4; conv k=3x3x3 s=1x1x1 p=S c=4
reduction_a.branch0 = conv k=3x3x3 s=1x2x2 p=SVV c=8
reduction_a.branch1 = conv k=1x1x1 s=1x1x1 p=S c=4; conv k=3x3x3 s=1x1x1 p=S c=4; conv k=3x3x3 s=1x2x2 p=SVV c=8
reduction_a.branch2 = maxpool k=3x3x3 s=1x2x2 p=SVV
reduction_a.output_grid = 7
block_b.repeats = 1
block_b.branch0 = conv k=1x1x1 s=1x1x1 p=S c=8
block_b.branch1 = conv k=1x1x1 s=1x1x1 p=S c=8; conv k=1x1x7 s=1x1x1 p=S c=8; conv k=1x7x1 s=1x1x1 p=S c=8
reduction_b.branch0 = conv k=1x1x1 s=1x1x1 p=S c=8; conv k=3x3x3 s=1x2x2 p=SVV c=16
reduction_b.branch1 = conv k=1x1x1 s=1x1x1 p=S c=8; conv k=3x3x3 s=1x2x2 p=SVV c=8
reduction_b.branch2 = maxpool k=3x3x3 s=1x2x2 p=SVV
reduction_b.output_grid = 3
block_c.repeats = 1
block_c.branch0 = conv k=1x1x1 s=1x1x1 p=S c=8
block_c.branch1 = conv k=1x1x1 s=1x1x1 p=S c=8; conv k=1x1x3 s=1x1x1 p=S c=8; conv k=1x3x1 s=1x1x1 p=S c=8
pool.window = 0
dropout.rate = 0.2
residual.scale = 1
lstm.hidden = 32
lstm.input = per_frame
classes = 3
landmarks.enabled = true
landmarks.window = 7
landmarks.slope = 0.1
landmarks.background = 0
landmarks.metric = manhattan
)";

const char* kTinyText = R"(# Gradient-check network: every block type at the smallest workable size.
input.frames = 3
input.height = 16
input.width = 16
input.channels = 1
stem.layers = conv k=3x3x3 s=1x2x2 p=SVV c=2
stem.output_grid = 7
block_a.repeats = 1
block_a.branch0 = conv k=1x1x1 s=1x1x1 p=S c=2
block_a.branch1 = conv k=1x1x1 s=1x1x1 p=S c=2; conv k=3x3x3 s=1x1x1 p=S c=2
reduction_a.branch0 = conv k=3x3x3 s=1x2x2 p=SVV c=2
reduction_a.branch1 = maxpool k=3x3x3 s=1x2x2 p=SVV
reduction_a.output_grid = 3
block_b.repeats = 1
block_b.branch0 = conv k=1x1x1 s=1x1x1 p=S c=2
block_b.branch1 = conv k=1x1x1 s=1x1x1 p=S c=2; conv k=1x1x3 s=1x1x1 p=S c=2; conv k=1x3x1 s=1x1x1 p=S c=2
reduction_b.branch0 = conv k=3x3x3 s=1x2x2 p=SVV c=2
reduction_b.branch1 = maxpool k=3x3x3 s=1x2x2 p=SVV
reduction_b.output_grid = 1
block_c.repeats = 1
block_c.branch0 = conv k=1x1x1 s=1x1x1 p=S c=2
block_c.branch1 = conv k=1x1x1 s=1x1x1 p=S c=2; conv k=1x1x3 s=1x1x1 p=S c=2
pool.window = 0
dropout.rate = 0
residual.scale = 1
lstm.hidden = 3
lstm.input = per_frame
classes = 3
landmarks.enabled = true
landmarks.window = 3
landmarks.slope = 0.1
landmarks.background = 0.25
landmarks.metric = manhattan
)";

void assign_branch(std::vector<BranchSpec>& branches, const std::string& key, const std::string& suffix,
                   const std::string& value) {
  if (suffix.rfind("branch", 0) != 0) throw ConfigError("unknown key '" + key + "'");
  const std::size_t index = parse_size(key, suffix.substr(6));
  if (branches.size() <= index) branches.resize(index + 1);
  branches[index] = parse_branch(value);
}

void emit_branches(std::ostringstream& os, const std::string& prefix, const std::vector<BranchSpec>& branches) {
  for (std::size_t i = 0; i < branches.size(); ++i) {
    os << prefix << ".branch" << i << " = " << branch_to_string(branches[i]) << '\n';
  }
}

}  // namespace

std::string LayerSpec::to_string() const {
  std::string out = kind == LayerKind::Conv ? "conv" : (kind == LayerKind::MaxPool ? "maxpool" : "avgpool");
  out += " k=" + extent_to_string(window) + " s=" + extent_to_string(stride) + " p=";
  if (padding.t == padding.h && padding.h == padding.w) {
    out += padding_letter(padding.t);
  } else {
    out += padding_letter(padding.t);
    out += padding_letter(padding.h);
    out += padding_letter(padding.w);
  }
  if (kind == LayerKind::Conv) out += " c=" + std::to_string(channels);
  if (linear) out += " linear";
  return out;
}

LayerSpec LayerSpec::parse(const std::string& text) {
  std::istringstream is(text);
  std::string word;
  if (!(is >> word)) throw ConfigError("empty layer spec");
  LayerSpec spec;
  if (word == "conv") {
    spec.kind = LayerKind::Conv;
  } else if (word == "maxpool") {
    spec.kind = LayerKind::MaxPool;
  } else if (word == "avgpool") {
    spec.kind = LayerKind::AvgPool;
  } else {
    throw ConfigError("unknown layer kind '" + word + "' in '" + text + "'");
  }
  while (is >> word) {
    if (word == "linear") {
      spec.linear = true;
      continue;
    }
    const auto eq = word.find('=');
    if (eq == std::string::npos) throw ConfigError("bad token '" + word + "' in layer '" + text + "'");
    const std::string k = word.substr(0, eq), v = word.substr(eq + 1);
    if (k == "k") {
      spec.window = parse_extent(v);
    } else if (k == "s") {
      spec.stride = parse_extent(v);
    } else if (k == "p") {
      if (v.size() == 1) {
        spec.padding = Padding3(padding_from(v[0]));
      } else if (v.size() == 3) {
        spec.padding = Padding3(padding_from(v[0]), padding_from(v[1]), padding_from(v[2]));
      } else {
        throw ConfigError("padding must be one or three letters in '" + text + "'");
      }
    } else if (k == "c") {
      spec.channels = parse_size("c", v);
    } else {
      throw ConfigError("unknown layer attribute '" + k + "' in '" + text + "'");
    }
  }
  if (spec.kind == LayerKind::Conv && spec.channels == 0) throw ConfigError("conv layer needs c=N in '" + text + "'");
  if (spec.kind != LayerKind::Conv && (spec.channels != 0 || spec.linear)) {
    throw ConfigError("pooling layer takes no channels or 'linear' in '" + text + "'");
  }
  return spec;
}

std::string branch_to_string(const BranchSpec& branch) {
  std::string out;
  for (std::size_t i = 0; i < branch.size(); ++i) {
    if (i) out += "; ";
    out += branch[i].to_string();
  }
  return out;
}

BranchSpec parse_branch(const std::string& text) {
  BranchSpec branch;
  for (const auto& part : split(text, ';')) {
    if (!part.empty()) branch.push_back(LayerSpec::parse(part));
  }
  if (branch.empty()) throw ConfigError("empty branch");
  return branch;
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    if (out.count(key)) throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

ModelConfig ModelConfig::reference() { return parse(kReferenceText); }
ModelConfig ModelConfig::toy() { return parse(kToyText); }
ModelConfig ModelConfig::tiny() { return parse(kTinyText); }

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "reference") return reference();
  if (name == "toy") return toy();
  if (name == "tiny") return tiny();
  throw ConfigError("unknown preset '" + name + "' (expected reference, toy or tiny)");
}

ModelConfig ModelConfig::parse(const std::string& text) {
  auto kv = parse_key_values(text);
  ModelConfig c;
  c.block_a.clear();
  if (auto it = kv.find("base"); it != kv.end()) {
    c = preset(it->second);
    kv.erase(it);
    // Branch lists are replaced wholesale when any branch key is given.
    for (auto [prefix, list] : {std::pair{"block_a.", &c.block_a}, std::pair{"block_b.", &c.block_b},
                                std::pair{"block_c.", &c.block_c}, std::pair{"reduction_a.", &c.reduction_a},
                                std::pair{"reduction_b.", &c.reduction_b}}) {
      const std::string branch_prefix = std::string(prefix) + "branch";
      if (std::any_of(kv.begin(), kv.end(), [&](auto& e) { return e.first.rfind(branch_prefix, 0) == 0; })) {
        list->clear();
      }
    }
  }

  for (const auto& [key, value] : kv) {
    const auto dot = key.find('.');
    const std::string head = key.substr(0, dot);
    const std::string tail = dot == std::string::npos ? "" : key.substr(dot + 1);
    if (key == "input.frames") {
      c.frames = parse_size(key, value);
    } else if (key == "input.height") {
      c.height = parse_size(key, value);
    } else if (key == "input.width") {
      c.width = parse_size(key, value);
    } else if (key == "input.channels") {
      c.channels = parse_size(key, value);
    } else if (key == "stem.layers") {
      c.stem = parse_branch(value);
    } else if (key == "stem.output_grid") {
      c.stem_output_grid = parse_size(key, value);
    } else if (key == "block_a.repeats") {
      c.block_a_repeats = parse_size(key, value);
    } else if (key == "block_b.repeats") {
      c.block_b_repeats = parse_size(key, value);
    } else if (key == "block_c.repeats") {
      c.block_c_repeats = parse_size(key, value);
    } else if (key == "reduction_a.output_grid") {
      c.reduction_a_output_grid = parse_size(key, value);
    } else if (key == "reduction_b.output_grid") {
      c.reduction_b_output_grid = parse_size(key, value);
    } else if (head == "block_a") {
      assign_branch(c.block_a, key, tail, value);
    } else if (head == "block_b") {
      assign_branch(c.block_b, key, tail, value);
    } else if (head == "block_c") {
      assign_branch(c.block_c, key, tail, value);
    } else if (head == "reduction_a") {
      assign_branch(c.reduction_a, key, tail, value);
    } else if (head == "reduction_b") {
      assign_branch(c.reduction_b, key, tail, value);
    } else if (key == "pool.window") {
      c.pool_window = parse_size(key, value);
    } else if (key == "dropout.rate") {
      c.dropout = parse_double(key, value);
    } else if (key == "residual.scale") {
      c.residual_scale = parse_double(key, value);
    } else if (key == "lstm.hidden") {
      c.lstm_hidden = parse_size(key, value);
    } else if (key == "lstm.input") {
      if (value == "per_frame") {
        c.lstm_input = LstmInput::PerFrame;
      } else if (value == "flattened_volume") {
        c.lstm_input = LstmInput::FlattenedVolume;
      } else {
        throw ConfigError(key + ": expected per_frame or flattened_volume, got '" + value + "'");
      }
    } else if (key == "classes") {
      c.num_classes = parse_size(key, value);
    } else if (key == "landmarks.enabled") {
      c.use_landmarks = parse_bool(key, value);
    } else if (key == "landmarks.window") {
      c.mask.window = parse_size(key, value);
    } else if (key == "landmarks.slope") {
      c.mask.slope = parse_double(key, value);
    } else if (key == "landmarks.background") {
      c.mask.background = parse_double(key, value);
    } else if (key == "landmarks.metric") {
      if (value == "manhattan") {
        c.mask.metric = DistanceMetric::Manhattan;
      } else if (value == "chebyshev") {
        c.mask.metric = DistanceMetric::Chebyshev;
      } else if (value == "euclidean") {
        c.mask.metric = DistanceMetric::Euclidean;
      } else {
        throw ConfigError(key + ": unknown metric '" + value + "'");
      }
    } else {
      throw ConfigError("unknown key '" + key + "'");
    }
  }

  for (auto [name, list] : {std::pair{"block_a", &c.block_a}, std::pair{"block_b", &c.block_b},
                            std::pair{"block_c", &c.block_c}, std::pair{"reduction_a", &c.reduction_a},
                            std::pair{"reduction_b", &c.reduction_b}}) {
    for (std::size_t i = 0; i < list->size(); ++i) {
      if ((*list)[i].empty()) throw ConfigError(std::string(name) + ".branch" + std::to_string(i) + " is missing");
    }
  }
  return c;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "input.frames = " << frames << '\n';
  os << "input.height = " << height << '\n';
  os << "input.width = " << width << '\n';
  os << "input.channels = " << channels << '\n';
  os << "stem.layers = " << branch_to_string(stem) << '\n';
  os << "stem.output_grid = " << stem_output_grid << '\n';
  os << "block_a.repeats = " << block_a_repeats << '\n';
  emit_branches(os, "block_a", block_a);
  emit_branches(os, "reduction_a", reduction_a);
  os << "reduction_a.output_grid = " << reduction_a_output_grid << '\n';
  os << "block_b.repeats = " << block_b_repeats << '\n';
  emit_branches(os, "block_b", block_b);
  emit_branches(os, "reduction_b", reduction_b);
  os << "reduction_b.output_grid = " << reduction_b_output_grid << '\n';
  os << "block_c.repeats = " << block_c_repeats << '\n';
  emit_branches(os, "block_c", block_c);
  os << "pool.window = " << pool_window << '\n';
  os << "dropout.rate = " << format_double(dropout) << '\n';
  os << "residual.scale = " << format_double(residual_scale) << '\n';
  os << "lstm.hidden = " << lstm_hidden << '\n';
  os << "lstm.input = " << (lstm_input == LstmInput::PerFrame ? "per_frame" : "flattened_volume") << '\n';
  os << "classes = " << num_classes << '\n';
  os << "landmarks.enabled = " << (use_landmarks ? "true" : "false") << '\n';
  os << "landmarks.window = " << mask.window << '\n';
  os << "landmarks.slope = " << format_double(mask.slope) << '\n';
  os << "landmarks.background = " << format_double(mask.background) << '\n';
  const char* metric = mask.metric == DistanceMetric::Manhattan   ? "manhattan"
                       : mask.metric == DistanceMetric::Chebyshev ? "chebyshev"
                                                                  : "euclidean";
  os << "landmarks.metric = " << metric << '\n';
  return os.str();
}

std::uint64_t ModelConfig::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_text()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace dir3d
