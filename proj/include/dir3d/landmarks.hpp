#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "dir3d/tensor.hpp"

namespace dir3d {

inline constexpr std::size_t kLandmarkCount = 66;

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point2&) const = default;
};

/// The 66 facial landmarks of one frame, in source-image pixel coordinates.
class LandmarkFrame {
 public:
  /// Throws DataError unless exactly 66 points are given. Points are clamped into the frame.
  LandmarkFrame(std::vector<Point2> points, std::size_t height, std::size_t width);

  const std::vector<Point2>& points() const { return points_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }

  bool operator==(const LandmarkFrame&) const = default;

 private:
  std::vector<Point2> points_;
  std::size_t height_;
  std::size_t width_;
};

struct GridPoint {
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const GridPoint&) const = default;
};

struct GridSize {
  std::size_t height = 0;
  std::size_t width = 0;
  bool operator==(const GridSize&) const = default;
};

enum class DistanceMetric { Manhattan, Chebyshev, Euclidean };

struct MaskOptions {
  std::size_t window = 7;          // odd side length of the square window around each landmark
  double slope = 0.1;              // weight = 1 - slope * distance
  double background = 0.0;         // weight of cells outside every window
  DistanceMetric metric = DistanceMetric::Manhattan;

  bool operator==(const MaskOptions&) const = default;
};

/// Weight raster in [0, 1], row-major [height x width].
struct WeightMap {
  GridSize resolution;
  std::vector<double> weights;

  double at(std::size_t row, std::size_t col) const { return weights[row * resolution.width + col]; }
};

/// Maps landmarks onto a target grid: (x * W'/W, y * H'/H), rounded half-up, clamped.
std::vector<GridPoint> rescale_landmarks(const LandmarkFrame& frame, GridSize target);

/// Per-cell max over landmarks of max(0, 1 - slope * d(L, P)) within each window;
/// cells outside every window get options.background.
WeightMap rasterize_weight_map(const std::vector<GridPoint>& points, GridSize resolution,
                               const MaskOptions& options = {});

/// Input frame feeding feature-map time step `index` of `feature_frames` when
/// the clip had `input_frames` frames.
std::size_t source_frame(std::size_t index, std::size_t feature_frames, std::size_t input_frames);

/// [T' x H' x W' x 1] stack of per-frame weight maps for one sequence.
template <typename T>
Tensor<T> mask_for_feature_map(const std::vector<LandmarkFrame>& frames, std::size_t feature_frames,
                               GridSize resolution, const MaskOptions& options = {});

/// Thread-safe memo of rasterized sequence masks keyed by landmark content and resolution.
class MaskCache {
 public:
  template <typename T>
  Tensor<T> get(const std::vector<LandmarkFrame>& frames, std::size_t feature_frames, GridSize resolution,
                const MaskOptions& options);
  std::size_t size() const;

 private:
  using Key = std::tuple<std::uint64_t, std::size_t, std::size_t, std::size_t, std::size_t>;
  mutable std::mutex mutex_;
  std::map<Key, std::vector<double>> entries_;
};

/// Reads a per-video landmark CSV: `frame_index, x0, y0, ..., x65, y65` per row,
/// optional header. Frames are returned in frame-index order.
std::vector<LandmarkFrame> read_landmark_csv(const std::filesystem::path& path, std::size_t height,
                                             std::size_t width);
void write_landmark_csv(const std::filesystem::path& path, const std::vector<LandmarkFrame>& frames,
                        bool header = true);

/// 8-bit binary PGM; weight 1.0 maps to 255.
void write_weight_map_pgm(const std::filesystem::path& path, const WeightMap& map);

}  // namespace dir3d
