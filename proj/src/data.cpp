#include "dir3d/data.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "dir3d/errors.hpp"
#include "dir3d/rng.hpp"

namespace dir3d {

namespace fs = std::filesystem;
using nlohmann::json;

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.class_names = class_names;
  out.samples.reserve(indices.size());
  for (auto i : indices) out.samples.push_back(samples.at(i));
  return out;
}

std::string to_string(Windowing w) { return w == Windowing::Sliding ? "sliding" : "last_ten"; }

Windowing parse_windowing(const std::string& text) {
  if (text == "sliding") return Windowing::Sliding;
  if (text == "last_ten") return Windowing::LastTen;
  throw DataError("unknown windowing rule '" + text + "' (expected sliding or last_ten)");
}

std::vector<std::pair<std::size_t, std::size_t>> window_video(std::size_t frame_count, Windowing rule,
                                                              const std::string& video) {
  if (frame_count < kSequenceLength) {
    throw DataError(video + ": " + std::to_string(frame_count) + " frames, need at least " +
                    std::to_string(kSequenceLength));
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (rule == Windowing::LastTen) {
    out.emplace_back(frame_count - kSequenceLength, frame_count);
    return out;
  }
  for (std::size_t b = 0; b + kSequenceLength <= frame_count; b += kSequenceLength) out.emplace_back(b, b + kSequenceLength);
  return out;
}

// ---------------------------------------------------------------- manifest

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": invalid JSON: " + e.what());
  }
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };

  DatasetManifest m;
  try {
    for (const auto& [name, id] : j.at("labels").items()) m.labels[name] = id.get<std::size_t>();
    m.channels = j.value("channels", std::size_t{1});
    for (const auto& v : j.at("videos")) {
      VideoRecord r;
      r.frames_dir = resolve(v.at("frames_dir").get<std::string>());
      r.landmarks_csv = resolve(v.at("landmarks_csv").get<std::string>());
      const auto& label = v.at("label");
      if (label.is_number_integer()) {
        const auto id = label.get<std::size_t>();
        for (const auto& [name, lid] : m.labels) {
          if (lid == id) r.label = name;
        }
        if (r.label.empty()) throw DataError(path.string() + ": label id " + std::to_string(id) + " not in label map");
      } else {
        r.label = label.get<std::string>();
        if (!m.labels.count(r.label)) throw DataError(path.string() + ": label '" + r.label + "' not in label map");
      }
      r.subject = v.at("subject").get<std::string>();
      if (r.subject.empty()) throw DataError(path.string() + ": video " + r.frames_dir.string() + " has no subject");
      r.database = v.value("database", std::string("default"));
      r.windowing = parse_windowing(v.value("windowing", std::string("sliding")));
      m.videos.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed manifest: " + e.what());
  }
  m.class_names();  // validates ids
  if (m.channels != 1 && m.channels != 3) throw DataError(path.string() + ": channels must be 1 or 3");
  return m;
}

void DatasetManifest::save(const fs::path& path) const {
  json j;
  j["labels"] = json::object();
  for (const auto& [name, id] : labels) j["labels"][name] = id;
  j["channels"] = channels;
  j["videos"] = json::array();
  const fs::path base = path.parent_path();
  for (const auto& v : videos) {
    j["videos"].push_back({{"frames_dir", fs::relative(v.frames_dir, base).generic_string()},
                           {"landmarks_csv", fs::relative(v.landmarks_csv, base).generic_string()},
                           {"label", v.label},
                           {"subject", v.subject},
                           {"database", v.database},
                           {"windowing", to_string(v.windowing)}});
  }
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
}

std::vector<std::string> DatasetManifest::class_names() const {
  std::vector<std::string> names(labels.size());
  for (const auto& [name, id] : labels) {
    if (id >= names.size() || !names[id].empty()) {
      throw DataError("label ids must be exactly 0.." + std::to_string(labels.size() - 1));
    }
    names[id] = name;
  }
  return names;
}

// ---------------------------------------------------------------- images

namespace {

std::string next_token(std::istream& is, const fs::path& path) {
  std::string tok;
  char ch;
  while (is.get(ch)) {
    if (ch == '#') {
      std::string rest;
      std::getline(is, rest);
    } else if (!std::isspace(static_cast<unsigned char>(ch))) {
      tok.push_back(ch);
      break;
    }
  }
  while (is.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) tok.push_back(ch);
  if (tok.empty()) throw DataError(path.string() + ": truncated image header");
  return tok;
}

std::size_t header_number(std::istream& is, const fs::path& path) {
  const auto tok = next_token(is, path);
  try {
    std::size_t pos = 0;
    const auto v = std::stoul(tok, &pos);
    if (pos == tok.size()) return v;
  } catch (const std::exception&) {
  }
  throw DataError(path.string() + ": bad image header field '" + tok + "'");
}

}  // namespace

Image read_pnm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open image " + path.string());
  const auto magic = next_token(is, path);
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") {
    throw DataError(path.string() + ": unsupported image format '" + magic + "' (PGM/PPM only)");
  }
  Image img;
  img.width = header_number(is, path);
  img.height = header_number(is, path);
  const std::size_t maxval = header_number(is, path);
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 65535) {
    throw DataError(path.string() + ": bad image dimensions or maxval");
  }
  img.channels = (magic == "P3" || magic == "P6") ? 3 : 1;
  const std::size_t n = img.width * img.height * img.channels;
  img.pixels.resize(n);
  const float scale = static_cast<float>(maxval);
  if (magic == "P5" || magic == "P6") {
    const std::size_t bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(n * bytes);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(is.gcount()) != raw.size()) throw DataError(path.string() + ": truncated pixel data");
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t v = bytes == 2 ? (std::size_t{raw[2 * i]} << 8) | raw[2 * i + 1] : raw[i];
      img.pixels[i] = std::min(1.0f, static_cast<float>(v) / scale);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      img.pixels[i] = std::min(1.0f, static_cast<float>(header_number(is, path)) / scale);
    }
  }
  return img;
}

void write_pgm(const fs::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw ContractError("write_pgm needs 1 or 3 channels");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << (image.channels == 1 ? "P5" : "P6") << '\n' << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> raw(image.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0f));
  }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ContractError("resize target must be positive");
  if (height == image.height && width == image.width) return image;
  Image out{height, width, image.channels, std::vector<float>(height * width * image.channels)};
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  auto coord = [](double pos, std::size_t n, std::size_t& i0, std::size_t& i1, double& f) {
    pos = std::clamp(pos, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<std::size_t>(pos);
    i1 = std::min(i0 + 1, n - 1);
    f = pos - static_cast<double>(i0);
  };
  const std::size_t c = image.channels;
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double fy;
    coord((static_cast<double>(y) + 0.5) * sy - 0.5, image.height, y0, y1, fy);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double fx;
      coord((static_cast<double>(x) + 0.5) * sx - 0.5, image.width, x0, x1, fx);
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto px = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(image.pixels[(yy * image.width + xx) * c + ch]); };
        const double top = px(y0, x0) * (1 - fx) + px(y0, x1) * fx;
        const double bottom = px(y1, x0) * (1 - fx) + px(y1, x1) * fx;
        out.pixels[(y * width + x) * c + ch] = static_cast<float>(top * (1 - fy) + bottom * fy);
      }
    }
  }
  return out;
}

Image convert_channels(const Image& image, std::size_t channels) {
  if (channels == image.channels) return image;
  Image out{image.height, image.width, channels, std::vector<float>(image.height * image.width * channels)};
  const std::size_t n = image.height * image.width;
  if (image.channels == 1 && channels == 3) {
    for (std::size_t i = 0; i < n; ++i) out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = image.pixels[i];
  } else if (image.channels == 3 && channels == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      out.pixels[i] = 0.299f * image.pixels[3 * i] + 0.587f * image.pixels[3 * i + 1] + 0.114f * image.pixels[3 * i + 2];
    }
  } else {
    throw ContractError("unsupported channel conversion " + std::to_string(image.channels) + " -> " +
                        std::to_string(channels));
  }
  return out;
}

// ---------------------------------------------------------------- loading

Dataset load_dataset(const DatasetManifest& manifest, std::size_t height, std::size_t width) {
  Dataset ds;
  ds.class_names = manifest.class_names();
  for (const auto& video : manifest.videos) {
    const std::string name = video.frames_dir.string();
    std::vector<fs::path> files;
    std::error_code ec;
    for (const auto& entry : fs::directory_iterator(video.frames_dir, ec)) {
      const auto ext = entry.path().extension().string();
      if (entry.is_regular_file() && (ext == ".pgm" || ext == ".ppm" || ext == ".pnm")) files.push_back(entry.path());
    }
    if (ec) throw DataError("cannot read frame directory " + name + ": " + ec.message());
    std::sort(files.begin(), files.end());
    const auto windows = window_video(files.size(), video.windowing, name);

    std::vector<Image> frames;
    frames.reserve(files.size());
    for (const auto& f : files) frames.push_back(read_pnm(f));
    for (std::size_t i = 1; i < frames.size(); ++i) {
      if (frames[i].height != frames[0].height || frames[i].width != frames[0].width) {
        throw DataError(name + ": frame " + std::to_string(i) + " size differs from frame 0");
      }
    }
    const auto landmarks = read_landmark_csv(video.landmarks_csv, frames[0].height, frames[0].width);
    if (landmarks.size() != frames.size()) {
      throw DataError(video.landmarks_csv.string() + ": " + std::to_string(landmarks.size()) + " landmark rows for " +
                      std::to_string(frames.size()) + " frames of " + name + " (first unmatched frame index " +
                      std::to_string(std::min(landmarks.size(), frames.size())) + ")");
    }

    const std::size_t c = manifest.channels;
    const std::size_t plane = height * width * c;
    for (const auto& [b, e] : windows) {
      std::vector<float> data(kSequenceLength * plane);
      SequenceSample s;
      for (std::size_t t = b; t < e; ++t) {
        const auto img = convert_channels(resize_bilinear(frames[t], height, width), c);
        std::copy(img.pixels.begin(), img.pixels.end(), data.begin() + static_cast<long>((t - b) * plane));
        s.landmarks.push_back(landmarks[t]);
      }
      s.clip = Tensor<float>({kSequenceLength, height, width, c}, std::move(data));
      s.label = manifest.labels.at(video.label);
      s.subject = video.subject;
      s.database = video.database;
      s.video = name;
      s.first_frame = b;
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

Dataset load_dataset(const fs::path& manifest_path, std::size_t height, std::size_t width) {
  return load_dataset(DatasetManifest::load(manifest_path), height, width);
}

// ---------------------------------------------------------------- synthetic data

namespace {

struct SynthVideo {
  std::vector<Image> frames;
  std::vector<LandmarkFrame> landmarks;
  std::size_t label;
  std::string subject;
};

void splat(Image& img, double cx, double cy, double sigma, double amplitude) {
  const long r = static_cast<long>(std::ceil(3 * sigma));
  const long x0 = static_cast<long>(std::floor(cx)), y0 = static_cast<long>(std::floor(cy));
  for (long y = y0 - r; y <= y0 + r + 1; ++y) {
    if (y < 0 || y >= static_cast<long>(img.height)) continue;
    for (long x = x0 - r; x <= x0 + r + 1; ++x) {
      if (x < 0 || x >= static_cast<long>(img.width)) continue;
      const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      const float v = static_cast<float>(amplitude * std::exp(-d2 / (2 * sigma * sigma)));
      for (std::size_t ch = 0; ch < img.channels; ++ch) img.pixels[(static_cast<std::size_t>(y) * img.width + static_cast<std::size_t>(x)) * img.channels + ch] += v;
    }
  }
}

SynthVideo make_video(const SynthOptions& o, std::size_t label, std::size_t subject, std::uint64_t seed) {
  const double H = static_cast<double>(o.height), W = static_cast<double>(o.width);
  const double size = std::min(H, W);
  // Subject traits come from their own stream so they repeat across videos.
  Rng srng(derive_seed(o.seed ^ 0x5u, subject));
  const double face_cx = W / 2 + srng.uniform(-0.08, 0.08) * W;
  const double face_cy = H / 2 + srng.uniform(-0.08, 0.08) * H;
  const double face_r = size * srng.uniform(0.26, 0.32);
  const double brightness = srng.uniform(0.55, 0.85);

  Rng rng(seed);
  const double angle = 2 * std::numbers::pi * static_cast<double>(label) / static_cast<double>(o.classes) +
                       rng.uniform(-0.15, 0.15);
  const double travel = face_r * rng.uniform(0.55, 0.7);
  const double start = rng.uniform(-0.1, 0.1) * face_r;
  const double blob_sigma = size * 0.045;

  struct Distractor { double x, y, dx, dy; };
  std::vector<Distractor> distractors;
  if (o.distractors) {
    for (int i = 0; i < 3; ++i) {
      const double a = rng.uniform(0, 2 * std::numbers::pi);
      const double step = size * rng.uniform(0.02, 0.05);
      distractors.push_back({rng.uniform(0, W), rng.uniform(0, H), step * std::cos(a), step * std::sin(a)});
    }
  }

  SynthVideo v;
  v.label = label;
  const std::size_t frames = o.frames;
  for (std::size_t t = 0; t < frames; ++t) {
    const double progress = frames > 1 ? static_cast<double>(t) / static_cast<double>(frames - 1) : 0.0;
    const double bx = face_cx + (start + travel * progress) * std::cos(angle);
    const double by = face_cy + (start + travel * progress) * std::sin(angle);

    Image img{o.height, o.width, o.channels, std::vector<float>(o.height * o.width * o.channels, 0.0f)};
    // Faint face disc.
    for (std::size_t y = 0; y < o.height; ++y) {
      for (std::size_t x = 0; x < o.width; ++x) {
        const double dx = (static_cast<double>(x) - face_cx) / face_r, dy = (static_cast<double>(y) - face_cy) / (1.2 * face_r);
        if (dx * dx + dy * dy <= 1.0) {
          for (std::size_t ch = 0; ch < o.channels; ++ch) img.pixels[(y * o.width + x) * o.channels + ch] = static_cast<float>(0.25 * brightness);
        }
      }
    }
    splat(img, bx, by, blob_sigma, brightness);
    for (auto& d : distractors) {
      splat(img, d.x + d.dx * static_cast<double>(t), d.y + d.dy * static_cast<double>(t), blob_sigma, brightness);
    }
    const double noise = o.distractors ? std::max(o.noise, 0.08) : o.noise;
    for (auto& p : img.pixels) p = std::clamp(p + static_cast<float>(noise * rng.normal()), 0.0f, 1.0f);

    // 17 jaw points on the lower face contour, 49 on two rings around the blob.
    std::vector<Point2> pts;
    for (std::size_t i = 0; i < 17; ++i) {
      const double a = std::numbers::pi * (0.1 + 0.8 * static_cast<double>(i) / 16.0);
      pts.push_back({face_cx - face_r * std::cos(a), face_cy + 1.2 * face_r * std::sin(a)});
    }
    for (std::size_t i = 0; i < 49; ++i) {
      const double ring = i < 24 ? 1.0 : 2.0;
      const double a = 2 * std::numbers::pi * static_cast<double>(i % 24) / 24.0;
      const double rr = ring * blob_sigma * (i == 48 ? 0.0 : 1.0);
      pts.push_back({bx + rr * std::cos(a), by + rr * std::sin(a)});
    }
    v.frames.push_back(std::move(img));
    v.landmarks.emplace_back(std::move(pts), o.height, o.width);
  }
  return v;
}

template <typename Fn>
void for_each_synth_video(const SynthOptions& o, Fn&& fn) {
  if (o.classes < 2) throw ContractError("synthetic data needs at least 2 classes");
  if (o.subjects == 0 || o.videos_per_class == 0) throw ContractError("synthetic data needs subjects and videos");
  if (o.channels != 1 && o.channels != 3) throw ContractError("synthetic data supports 1 or 3 channels");
  std::size_t index = 0;
  for (std::size_t k = 0; k < o.classes; ++k) {
    for (std::size_t j = 0; j < o.videos_per_class; ++j, ++index) {
      const std::size_t subject = j % o.subjects;
      auto v = make_video(o, k, subject, derive_seed(o.seed, index));
      char name[32];
      std::snprintf(name, sizeof name, "s%02zu", subject);
      v.subject = name;
      fn(index, std::move(v));
    }
  }
}

std::vector<std::string> synth_class_names(std::size_t k) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < k; ++i) names.push_back("class" + std::to_string(i));
  return names;
}

}  // namespace

Dataset synth_dataset(const SynthOptions& o) {
  Dataset ds;
  ds.class_names = synth_class_names(o.classes);
  for_each_synth_video(o, [&](std::size_t index, SynthVideo v) {
    const std::string video = o.database + "/video" + std::to_string(index);
    const std::size_t plane = o.height * o.width * o.channels;
    for (const auto& [b, e] : window_video(v.frames.size(), Windowing::Sliding, video)) {
      std::vector<float> data(kSequenceLength * plane);
      SequenceSample s;
      for (std::size_t t = b; t < e; ++t) {
        std::copy(v.frames[t].pixels.begin(), v.frames[t].pixels.end(), data.begin() + static_cast<long>((t - b) * plane));
        s.landmarks.push_back(v.landmarks[t]);
      }
      s.clip = Tensor<float>({kSequenceLength, o.height, o.width, o.channels}, std::move(data));
      s.label = v.label;
      s.subject = v.subject;
      s.database = o.database;
      s.video = video;
      s.first_frame = b;
      ds.samples.push_back(std::move(s));
    }
  });
  return ds;
}

fs::path write_synth_dataset(const fs::path& dir, const SynthOptions& o) {
  fs::create_directories(dir);
  DatasetManifest m;
  m.channels = o.channels;
  const auto names = synth_class_names(o.classes);
  for (std::size_t i = 0; i < names.size(); ++i) m.labels[names[i]] = i;
  for_each_synth_video(o, [&](std::size_t index, SynthVideo v) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "video%04zu", index);
    const fs::path vdir = dir / stem;
    fs::create_directories(vdir / "frames");
    for (std::size_t t = 0; t < v.frames.size(); ++t) {
      char fname[32];
      std::snprintf(fname, sizeof fname, "frame_%04zu.pgm", t);
      write_pgm(vdir / "frames" / fname, v.frames[t]);
    }
    write_landmark_csv(vdir / "landmarks.csv", v.landmarks);
    m.videos.push_back({vdir / "frames", vdir / "landmarks.csv", names[v.label], v.subject, o.database,
                        Windowing::Sliding});
  });
  const fs::path manifest = dir / "manifest.json";
  m.save(manifest);
  return manifest;
}

template <typename T>
Tensor<T> stack_clips(const Dataset& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("cannot stack an empty batch");
  const Shape& s0 = data.samples.at(indices.front()).clip.shape();
  const std::size_t plane = numel(s0);
  std::vector<T> out(indices.size() * plane);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& clip = data.samples.at(indices[i]).clip;
    if (clip.shape() != s0) {
      throw DimensionError("sample " + std::to_string(indices[i]) + " clip " + shape_to_string(clip.shape()) +
                           " differs from " + shape_to_string(s0));
    }
    std::copy(clip.data().begin(), clip.data().end(), out.begin() + static_cast<long>(i * plane));
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), s0.begin(), s0.end());
  return Tensor<T>(shape, std::move(out));
}

template <typename T>
Tensor<T> one_hot(const std::vector<std::size_t>& labels, std::size_t classes) {
  std::vector<T> out(labels.size() * classes, T(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) {
      throw ContractError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(classes) +
                          " classes");
    }
    out[i * classes + labels[i]] = T(1);
  }
  return Tensor<T>({labels.size(), classes}, std::move(out));
}

template Tensor<float> stack_clips(const Dataset&, const std::vector<std::size_t>&);
template Tensor<double> stack_clips(const Dataset&, const std::vector<std::size_t>&);
template Tensor<float> one_hot(const std::vector<std::size_t>&, std::size_t);
template Tensor<double> one_hot(const std::vector<std::size_t>&, std::size_t);

}  // namespace dir3d
