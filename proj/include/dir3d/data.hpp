#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dir3d/landmarks.hpp"
#include "dir3d/tensor.hpp"

namespace dir3d {

inline constexpr std::size_t kSequenceLength = 10;

struct SequenceSample {
  Tensor<float> clip;                     // [10 x H x W x C], values in [0, 1]
  std::vector<LandmarkFrame> landmarks;   // one per clip frame
  std::size_t label = 0;
  std::string subject;
  std::string database;
  std::string video;                      // source video name, for messages
  std::size_t first_frame = 0;            // window start within the video
};

struct Dataset {
  std::vector<std::string> class_names;  // index = label id
  std::vector<SequenceSample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  /// Subset in the given order, keeping the label map.
  Dataset subset(const std::vector<std::size_t>& indices) const;
};

enum class Windowing {
  Sliding,  // consecutive non-overlapping windows, trailing partial window dropped
  LastTen,  // the single window [n - 10, n)
};

std::string to_string(Windowing w);
Windowing parse_windowing(const std::string& text);

/// Half-open [begin, end) frame ranges of length 10. Throws DataError naming
/// `video` when fewer than 10 frames are available.
std::vector<std::pair<std::size_t, std::size_t>> window_video(std::size_t frame_count, Windowing rule,
                                                              const std::string& video = "video");

struct VideoRecord {
  std::filesystem::path frames_dir;    // PGM/PPM frames, taken in file-name order
  std::filesystem::path landmarks_csv;
  std::string label;                   // class name from the manifest's label map
  std::string subject;
  std::string database;
  Windowing windowing = Windowing::Sliding;
};

/// JSON manifest:
///   {"labels": {"name": id, ...}, "channels": 1,
///    "videos": [{"frames_dir", "landmarks_csv", "label", "subject", "database", "windowing"}]}
/// Relative paths resolve against the manifest's directory. `label` may be a
/// class name or an integer id.
struct DatasetManifest {
  std::map<std::string, std::size_t> labels;
  std::size_t channels = 1;
  std::vector<VideoRecord> videos;

  static DatasetManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  /// Names ordered by id; ids must be 0..n-1.
  std::vector<std::string> class_names() const;
};

struct Image {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<float> pixels;  // row-major, interleaved channels, in [0, 1]
};

/// Binary or ASCII PGM (P5/P2) and PPM (P6/P3), maxval up to 65535.
Image read_pnm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Image& image);

/// Half-pixel-centred bilinear resampling; identity when the size is unchanged.
Image resize_bilinear(const Image& image, std::size_t height, std::size_t width);
/// Gray to RGB by replication, RGB to gray by Rec. 601 luma.
Image convert_channels(const Image& image, std::size_t channels);

/// Decodes, resizes to (height, width) and windows every video, in manifest order.
Dataset load_dataset(const DatasetManifest& manifest, std::size_t height, std::size_t width);
Dataset load_dataset(const std::filesystem::path& manifest_path, std::size_t height, std::size_t width);

struct SynthOptions {
  std::size_t classes = 3;
  std::size_t videos_per_class = 30;
  std::size_t subjects = 10;
  std::size_t frames = kSequenceLength;  // frames per generated video
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t channels = 1;
  /// Moving background blobs and heavier noise outside the landmark-tracked region.
  bool distractors = false;
  double noise = 0.03;
  std::string database = "synth";
  std::uint64_t seed = 0;
};

/// Class k: a bright blob drifting from the face centre in direction 2*pi*k/K.
/// Subject identity sets face placement, size and brightness. Landmarks trace
/// a static jaw contour and a ring around the moving blob.
/// Videos longer than 10 frames are windowed with the sliding rule.
Dataset synth_dataset(const SynthOptions& options);

/// Writes frames (PGM), landmark CSVs and manifest.json under `dir`; returns the manifest path.
std::filesystem::path write_synth_dataset(const std::filesystem::path& dir, const SynthOptions& options);

/// Stacks samples into a [batch x 10 x H x W x C] clip tensor.
template <typename T>
Tensor<T> stack_clips(const Dataset& data, const std::vector<std::size_t>& indices);

/// [batch x K] one-hot rows.
template <typename T>
Tensor<T> one_hot(const std::vector<std::size_t>& labels, std::size_t classes);

}  // namespace dir3d
