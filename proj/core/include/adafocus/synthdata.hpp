#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "adafocus/common.hpp"

namespace adafocus {

/// Knobs of the moving-glyph video generator.
struct SynthConfig {
  int num_classes = 10;
  int frames = 8;       // T
  int frame_size = 64;  // H = W
  int glyph_size = 8;
  int num_distractors = 4;
  int max_step = 3;  // per-axis displacement bound per frame
  double noise_std = 0.05;
  double distractor_level = 0.45;  // foreground intensity of distractor pixels
  int channels = 1;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SynthConfig&) const = default;
};

inline constexpr float kBackgroundLevel = 0.1f;
inline constexpr float kForegroundLevel = 0.9f;

/// Pixel position of a glyph's top-left corner.
struct GlyphPos {
  int y = 0;
  int x = 0;
  bool operator==(const GlyphPos&) const = default;
};

struct VideoSample {
  int frames = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  int label = 0;
  std::vector<float> pixels;  // [T x C x H x W]
  std::vector<GlyphPos> glyph_track;  // [T]

  std::size_t frame_elems() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  std::span<const float> frame(int t) const {
    return std::span(pixels).subspan(t * frame_elems(), frame_elems());
  }
  bool operator==(const VideoSample&) const = default;
};

enum class SplitRole { kTrain, kCalibration, kTest };

std::string_view to_string(SplitRole role);
SplitRole parse_split_role(std::string_view name);

struct DatasetSplit {
  SynthConfig config;
  SplitRole role = SplitRole::kTrain;
  std::uint64_t seed = 0;
  std::vector<VideoSample> samples;

  bool operator==(const DatasetSplit&) const = default;
};

/// Fixed binary pattern (row-major glyph_size x glyph_size, values 0/1)
/// identifying `label`. Depends only on (num_classes, glyph_size) so every
/// split shares the same class glyphs.
std::vector<std::uint8_t> class_glyph(int num_classes, int glyph_size,
                                       int label);

/// Minimum Hamming distance required between any two class glyphs and
/// between a distractor and every class glyph.
int glyph_min_distance(int glyph_size);

VideoSample generate_video(const SynthConfig& cfg, int label, Rng& rng);
/// Label drawn uniformly from the rng first.
VideoSample generate_video(const SynthConfig& cfg, Rng& rng);

/// Sample i has label i % num_classes and seed derive_seed(split seed, i),
/// so any sample can be regenerated alone with generate_split_sample.
DatasetSplit generate_split(const SynthConfig& cfg, std::size_t n,
                            SplitRole role, std::uint64_t seed);
VideoSample generate_split_sample(const SynthConfig& cfg, SplitRole role,
                                  std::uint64_t seed, std::size_t index);

/// Binary container (see docs in synthdata.cpp) plus `<path>.manifest`.
/// Writes go to a temporary file that is renamed into place.
void save_split(const DatasetSplit& split, const std::filesystem::path& path);
DatasetSplit load_split(const std::filesystem::path& path);

}  // namespace adafocus
