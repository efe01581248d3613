#include "dir3d/landmarks.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dir3d {

LandmarkFrame::LandmarkFrame(std::vector<Point2> points, std::size_t height, std::size_t width)
    : points_(std::move(points)), height_(height), width_(width) {
  if (points_.size() != kLandmarkCount) {
    throw DataError("a landmark frame needs " + std::to_string(kLandmarkCount) + " points, got " +
                    std::to_string(points_.size()));
  }
  if (height_ == 0 || width_ == 0) throw DataError("landmark frame source size must be positive");
  const double max_x = std::nextafter(static_cast<double>(width_), 0.0);
  const double max_y = std::nextafter(static_cast<double>(height_), 0.0);
  for (auto& p : points_) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw DataError("non-finite landmark coordinate");
    p.x = std::clamp(p.x, 0.0, max_x);
    p.y = std::clamp(p.y, 0.0, max_y);
  }
}

std::vector<GridPoint> rescale_landmarks(const LandmarkFrame& frame, GridSize target) {
  if (target.height == 0 || target.width == 0) throw ContractError("target grid extents must be positive");
  const double sx = static_cast<double>(target.width) / static_cast<double>(frame.width());
  const double sy = static_cast<double>(target.height) / static_cast<double>(frame.height());
  auto cell = [](double v, std::size_t extent) {
    const double rounded = std::floor(v + 0.5);
    if (rounded <= 0.0) return std::size_t{0};
    return std::min(static_cast<std::size_t>(rounded), extent - 1);
  };
  std::vector<GridPoint> out;
  out.reserve(frame.points().size());
  for (const auto& p : frame.points()) out.push_back({cell(p.y * sy, target.height), cell(p.x * sx, target.width)});
  return out;
}

WeightMap rasterize_weight_map(const std::vector<GridPoint>& points, GridSize resolution, const MaskOptions& options) {
  if (options.window == 0 || options.window % 2 == 0) {
    throw ContractError("mask window must be odd and positive, got " + std::to_string(options.window));
  }
  if (resolution.height == 0 || resolution.width == 0) throw ContractError("mask resolution must be positive");
  WeightMap map{resolution, std::vector<double>(resolution.height * resolution.width, -1.0)};
  const long half = static_cast<long>(options.window / 2);
  const long rows = static_cast<long>(resolution.height);
  const long cols = static_cast<long>(resolution.width);
  for (const auto& p : points) {
    const long pr = static_cast<long>(p.row);
    const long pc = static_cast<long>(p.col);
    for (long dr = -half; dr <= half; ++dr) {
      for (long dc = -half; dc <= half; ++dc) {
        const long r = pr + dr, c = pc + dc;
        if (r < 0 || c < 0 || r >= rows || c >= cols) continue;
        const double adr = static_cast<double>(std::abs(dr));
        const double adc = static_cast<double>(std::abs(dc));
        double d = 0.0;
        switch (options.metric) {
          case DistanceMetric::Manhattan: d = adr + adc; break;
          case DistanceMetric::Chebyshev: d = std::max(adr, adc); break;
          case DistanceMetric::Euclidean: d = std::sqrt(adr * adr + adc * adc); break;
        }
        const double w = std::max(0.0, 1.0 - options.slope * d);
        double& cell = map.weights[static_cast<std::size_t>(r * cols + c)];
        cell = std::max(cell, w);
      }
    }
  }
  const double background = std::clamp(options.background, 0.0, 1.0);
  for (auto& w : map.weights) {
    if (w < 0.0) w = background;
  }
  return map;
}

std::size_t source_frame(std::size_t index, std::size_t feature_frames, std::size_t input_frames) {
  return index * input_frames / feature_frames;
}

template <typename T>
Tensor<T> mask_for_feature_map(const std::vector<LandmarkFrame>& frames, std::size_t feature_frames,
                               GridSize resolution, const MaskOptions& options) {
  if (frames.empty()) throw ContractError("no landmark frames for mask");
  if (feature_frames == 0 || feature_frames > frames.size()) {
    throw ContractError("cannot map " + std::to_string(frames.size()) + " landmark frames onto " +
                        std::to_string(feature_frames) + " feature-map frames");
  }
  const std::size_t plane = resolution.height * resolution.width;
  std::vector<T> data(feature_frames * plane);
  for (std::size_t t = 0; t < feature_frames; ++t) {
    const auto& frame = frames[source_frame(t, feature_frames, frames.size())];
    const auto map = rasterize_weight_map(rescale_landmarks(frame, resolution), resolution, options);
    std::transform(map.weights.begin(), map.weights.end(), data.begin() + static_cast<long>(t * plane),
                   [](double w) { return static_cast<T>(w); });
  }
  return Tensor<T>({feature_frames, resolution.height, resolution.width, 1}, std::move(data));
}

namespace {

std::uint64_t fingerprint(const std::vector<LandmarkFrame>& frames, const MaskOptions& options) {
  // FNV-1a over the raw coordinate bits and mask options.
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 1099511628211ULL;
    }
  };
  mix(frames.size());
  for (const auto& f : frames) {
    mix(f.height());
    mix(f.width());
    for (const auto& p : f.points()) {
      mix(std::bit_cast<std::uint64_t>(p.x));
      mix(std::bit_cast<std::uint64_t>(p.y));
    }
  }
  mix(options.window);
  mix(std::bit_cast<std::uint64_t>(options.slope));
  mix(std::bit_cast<std::uint64_t>(options.background));
  mix(static_cast<std::uint64_t>(options.metric));
  return h;
}

}  // namespace

template <typename T>
Tensor<T> MaskCache::get(const std::vector<LandmarkFrame>& frames, std::size_t feature_frames, GridSize resolution,
                         const MaskOptions& options) {
  const Key key{fingerprint(frames, options), frames.size(), feature_frames, resolution.height, resolution.width};
  const Shape shape{feature_frames, resolution.height, resolution.width, 1};
  {
    std::lock_guard lock(mutex_);
    if (auto it = entries_.find(key); it != entries_.end()) {
      return Tensor<T>(shape, std::vector<T>(it->second.begin(), it->second.end()));
    }
  }
  auto mask = mask_for_feature_map<double>(frames, feature_frames, resolution, options);
  std::vector<double> values = mask.values();
  {
    std::lock_guard lock(mutex_);
    entries_.emplace(key, values);
  }
  return Tensor<T>(shape, std::vector<T>(values.begin(), values.end()));
}

std::size_t MaskCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

std::vector<LandmarkFrame> read_landmark_csv(const std::filesystem::path& path, std::size_t height,
                                             std::size_t width) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open landmark file " + path.string());
  std::vector<std::pair<long, LandmarkFrame>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);

    auto parse = [&](const std::string& s, double& out) {
      char* end = nullptr;
      out = std::strtod(s.c_str(), &end);
      return end != s.c_str() && std::string(end).find_first_not_of(" \t") == std::string::npos;
    };
    double first = 0.0;
    if (!parse(fields.front(), first)) {
      if (rows.empty() && line_no == 1) continue;  // header
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": non-numeric frame index");
    }
    if (fields.size() != 1 + 2 * kLandmarkCount) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(1 + 2 * kLandmarkCount) + " fields, got " + std::to_string(fields.size()));
    }
    std::vector<Point2> points(kLandmarkCount);
    for (std::size_t i = 0; i < kLandmarkCount; ++i) {
      if (!parse(fields[1 + 2 * i], points[i].x) || !parse(fields[2 + 2 * i], points[i].y)) {
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": bad coordinate for landmark " +
                        std::to_string(i));
      }
    }
    rows.emplace_back(static_cast<long>(first), LandmarkFrame(std::move(points), height, width));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<LandmarkFrame> frames;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i && rows[i].first == rows[i - 1].first) {
      throw DataError(path.string() + ": duplicate frame index " + std::to_string(rows[i].first));
    }
    frames.push_back(std::move(rows[i].second));
  }
  return frames;
}

void write_landmark_csv(const std::filesystem::path& path, const std::vector<LandmarkFrame>& frames, bool header) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  if (header) {
    os << "frame";
    for (std::size_t i = 0; i < kLandmarkCount; ++i) os << ",x" << i << ",y" << i;
    os << '\n';
  }
  os.precision(17);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    os << f;
    for (const auto& p : frames[f].points()) os << ',' << p.x << ',' << p.y;
    os << '\n';
  }
  if (!os) throw IoError("write failed for " + path.string());
}

void write_weight_map_pgm(const std::filesystem::path& path, const WeightMap& map) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << map.resolution.width << ' ' << map.resolution.height << "\n255\n";
  for (double w : map.weights) {
    const auto level = static_cast<unsigned char>(std::lround(std::clamp(w, 0.0, 1.0) * 255.0));
    os.put(static_cast<char>(level));
  }
  if (!os) throw IoError("write failed for " + path.string());
}

template Tensor<float> mask_for_feature_map(const std::vector<LandmarkFrame>&, std::size_t, GridSize,
                                            const MaskOptions&);
template Tensor<double> mask_for_feature_map(const std::vector<LandmarkFrame>&, std::size_t, GridSize,
                                             const MaskOptions&);
template Tensor<float> MaskCache::get(const std::vector<LandmarkFrame>&, std::size_t, GridSize, const MaskOptions&);
template Tensor<double> MaskCache::get(const std::vector<LandmarkFrame>&, std::size_t, GridSize, const MaskOptions&);

}  // namespace dir3d
