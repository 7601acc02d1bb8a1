#include "adafocus/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <sstream>

#include "adafocus/serialize.hpp"

namespace adafocus {

namespace {

constexpr std::uint64_t kGlyphSeed = 0x61646166'6f637573ULL;
constexpr char kSplitMagic[8] = {'A', 'F', 'S', 'P', 'L', 'I', 'T', '\0'};
constexpr std::uint32_t kSplitVersion = 1;

using Pattern = std::vector<std::uint8_t>;

int hamming(const Pattern& a, const Pattern& b) {
  int d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

Pattern random_pattern(int glyph_size, Rng& rng) {
  Pattern p(static_cast<std::size_t>(glyph_size) * glyph_size);
  for (auto& v : p) v = static_cast<std::uint8_t>(rng.next_u64() & 1u);
  return p;
}

// Far from every pattern in `avoid` and from the blank pattern.
bool is_separated(const Pattern& p, const std::vector<Pattern>& avoid,
                  int min_distance) {
  const Pattern blank(p.size(), 0);
  if (hamming(p, blank) < min_distance) return false;
  return std::all_of(avoid.begin(), avoid.end(), [&](const Pattern& q) {
    return hamming(p, q) >= min_distance;
  });
}

std::vector<Pattern> build_class_glyphs(int num_classes, int glyph_size) {
  Rng rng(derive_seed(kGlyphSeed, static_cast<std::uint64_t>(glyph_size)));
  int min_distance = glyph_min_distance(glyph_size);
  std::vector<Pattern> glyphs;
  int rejects = 0;
  while (static_cast<int>(glyphs.size()) < num_classes) {
    auto p = random_pattern(glyph_size, rng);
    if (is_separated(p, glyphs, min_distance)) {
      glyphs.push_back(std::move(p));
      rejects = 0;
    } else if (++rejects > 20000 && min_distance > 1) {
      --min_distance;
      rejects = 0;
    }
  }
  return glyphs;
}

int reflect(int pos, int lim) {
  if (pos < 0) pos = -pos;
  if (pos > lim) pos = 2 * lim - pos;
  return std::clamp(pos, 0, lim);
}

void stamp(std::vector<float>& pixels, std::size_t frame_offset, int channels,
           int size, const Pattern& pattern, int glyph_size, GlyphPos at,
           float foreground) {
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (int c = 0; c < channels; ++c) {
    for (int gy = 0; gy < glyph_size; ++gy) {
      for (int gx = 0; gx < glyph_size; ++gx) {
        const float v = pattern[gy * glyph_size + gx] ? foreground : kBackgroundLevel;
        pixels[frame_offset + c * plane + (at.y + gy) * size + (at.x + gx)] = v;
      }
    }
  }
}

std::uint64_t split_stream_seed(SplitRole role, std::uint64_t seed) {
  return derive_seed(seed, to_string(role));
}

}  // namespace

void SynthConfig::validate() const {
  if (num_classes < 2) throw ConfigError("synth: num_classes must be >= 2");
  if (frames < 1) throw ConfigError("synth: frames must be >= 1");
  if (frame_size < 1) throw ConfigError("synth: frame_size must be >= 1");
  if (channels < 1) throw ConfigError("synth: channels must be >= 1");
  if (glyph_size < 1) throw ConfigError("synth: glyph_size must be >= 1");
  if (glyph_size > frame_size) {
    throw ConfigError("synth: glyph_size exceeds frame_size");
  }
  if (max_step < 0) throw ConfigError("synth: max_step must be >= 0");
  if (num_distractors < 0) throw ConfigError("synth: num_distractors must be >= 0");
  if (!(distractor_level >= 0.0 && distractor_level <= 1.0)) {
    throw ConfigError("synth: distractor_level must lie in [0, 1]");
  }
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
    throw ConfigError("synth: noise_std must be finite and >= 0");
  }
  // Room for num_classes distinct non-blank glyphs plus distractor patterns.
  const int bits = glyph_size * glyph_size;
  if (bits < 62 && (std::uint64_t{1} << bits) < static_cast<std::uint64_t>(num_classes) + 2) {
    throw ConfigError("synth: glyph_size too small for num_classes");
  }
}

std::string_view to_string(SplitRole role) {
  switch (role) {
    case SplitRole::kTrain: return "train";
    case SplitRole::kCalibration: return "calibration";
    case SplitRole::kTest: return "test";
  }
  return "?";
}

SplitRole parse_split_role(std::string_view name) {
  if (name == "train") return SplitRole::kTrain;
  if (name == "calibration") return SplitRole::kCalibration;
  if (name == "test") return SplitRole::kTest;
  throw ConfigError("unknown split role '" + std::string(name) + "'");
}

int glyph_min_distance(int glyph_size) {
  return std::max(1, glyph_size * glyph_size / 4);
}

std::vector<std::uint8_t> class_glyph(int num_classes, int glyph_size,
                                       int label) {
  static std::mutex mu;
  static std::map<int, std::vector<Pattern>> cache;
  if (label < 0 || label >= num_classes) {
    throw ContractError("class_glyph: label out of range");
  }
  std::lock_guard lock(mu);
  // Glyph sets are nested: the first n glyphs of a larger set equal the
  // n-class set, so cache one set per glyph size at the largest size seen.
  auto& set = cache[glyph_size];
  if (static_cast<int>(set.size()) < num_classes) {
    set = build_class_glyphs(num_classes, glyph_size);
  }
  return set[label];
}

VideoSample generate_video(const SynthConfig& cfg, int label, Rng& rng) {
  cfg.validate();
  if (label < 0 || label >= cfg.num_classes) {
    throw ConfigError("synth: label out of range");
  }
  const int size = cfg.frame_size;
  const int g = cfg.glyph_size;
  const int lim = size - g;
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  const std::size_t frame_elems = plane * cfg.channels;

  VideoSample s;
  s.frames = cfg.frames;
  s.channels = cfg.channels;
  s.height = size;
  s.width = size;
  s.label = label;
  s.pixels.assign(frame_elems * cfg.frames, kBackgroundLevel);
  s.glyph_track.resize(cfg.frames);

  std::vector<Pattern> class_set;
  for (int k = 0; k < cfg.num_classes; ++k) {
    class_set.push_back(class_glyph(cfg.num_classes, g, k));
  }
  const Pattern& glyph = class_set[label];

  auto random_pos = [&] {
    return GlyphPos{static_cast<int>(rng.between(0, lim)),
                    static_cast<int>(rng.between(0, lim))};
  };
  auto walk = [&](GlyphPos p) {
    p.y = reflect(p.y + static_cast<int>(rng.between(-cfg.max_step, cfg.max_step)), lim);
    p.x = reflect(p.x + static_cast<int>(rng.between(-cfg.max_step, cfg.max_step)), lim);
    return p;
  };

  GlyphPos glyph_pos = random_pos();
  std::vector<Pattern> distractors;
  std::vector<GlyphPos> distractor_pos;
  const int min_distance = glyph_min_distance(g);
  for (int d = 0; d < cfg.num_distractors; ++d) {
    Pattern p;
    int tries = 0;
    do {
      p = random_pattern(g, rng);
    } while (!is_separated(p, class_set, min_distance) && ++tries < 10000);
    distractors.push_back(std::move(p));
    distractor_pos.push_back(random_pos());
  }

  for (int t = 0; t < cfg.frames; ++t) {
    if (t > 0) {
      glyph_pos = walk(glyph_pos);
      for (auto& p : distractor_pos) p = walk(p);
    }
    const std::size_t off = frame_elems * t;
    for (int d = 0; d < cfg.num_distractors; ++d) {
      stamp(s.pixels, off, cfg.channels, size, distractors[d], g, distractor_pos[d],
            static_cast<float>(cfg.distractor_level));
    }
    // Glyph last, so it is never occluded.
    stamp(s.pixels, off, cfg.channels, size, glyph, g, glyph_pos, kForegroundLevel);
    s.glyph_track[t] = glyph_pos;
  }

  if (cfg.noise_std > 0.0) {
    for (auto& v : s.pixels) {
      const double noisy = v + cfg.noise_std * rng.normal();
      v = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
    }
  }
  return s;
}

VideoSample generate_video(const SynthConfig& cfg, Rng& rng) {
  cfg.validate();
  const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes)));
  return generate_video(cfg, label, rng);
}

VideoSample generate_split_sample(const SynthConfig& cfg, SplitRole role,
                                  std::uint64_t seed, std::size_t index) {
  Rng rng(derive_seed(split_stream_seed(role, seed), index));
  const int label = static_cast<int>(index % static_cast<std::size_t>(cfg.num_classes));
  return generate_video(cfg, label, rng);
}

DatasetSplit generate_split(const SynthConfig& cfg, std::size_t n,
                            SplitRole role, std::uint64_t seed) {
  cfg.validate();
  if (n < static_cast<std::size_t>(cfg.num_classes)) {
    throw ConfigError("synth: split size smaller than num_classes");
  }
  DatasetSplit split;
  split.config = cfg;
  split.role = role;
  split.seed = seed;
  split.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    split.samples.push_back(generate_split_sample(cfg, role, seed, i));
  }
  return split;
}

// Layout (all little-endian):
//   magic "AFSPLIT\0", u32 version
//   u32 role, u64 split seed, u64 num_samples
//   i32 num_classes, frames, frame_size, glyph_size, num_distractors,
//   max_step; f64 noise_std; f64 distractor_level; i32 channels; u64 config seed
//   array "labels"      i32 [N]
//   array "glyph_track" i32 [N, T, 2]   (y, x)
//   array "frames"      f32 [N, T, C, H, W]
//   u64 fnv1a checksum of all preceding bytes
// where each array is: name, u32 dtype, u32 ndim, u64 dims..., u64 byte
// length, raw bytes.
void save_split(const DatasetSplit& split, const std::filesystem::path& path) {
  const auto& cfg = split.config;
  const std::uint64_t n = split.samples.size();
  const std::uint64_t T = cfg.frames, C = cfg.channels, H = cfg.frame_size;

  std::vector<std::int32_t> labels;
  std::vector<std::int32_t> tracks;
  std::vector<float> frames;
  frames.reserve(n * T * C * H * H);
  for (const auto& s : split.samples) {
    if (s.frames != cfg.frames || s.channels != cfg.channels ||
        s.height != cfg.frame_size || s.width != cfg.frame_size ||
        s.pixels.size() != T * C * H * H || s.glyph_track.size() != T) {
      throw ContractError("save_split: sample shape disagrees with config");
    }
    labels.push_back(s.label);
    for (const auto& p : s.glyph_track) {
      tracks.push_back(p.y);
      tracks.push_back(p.x);
    }
    frames.insert(frames.end(), s.pixels.begin(), s.pixels.end());
  }

  BinaryWriter w;
  w.bytes(std::as_bytes(std::span(kSplitMagic)));
  w.u32(kSplitVersion);
  w.u32(static_cast<std::uint32_t>(split.role));
  w.u64(split.seed);
  w.u64(n);
  w.i32(cfg.num_classes);
  w.i32(cfg.frames);
  w.i32(cfg.frame_size);
  w.i32(cfg.glyph_size);
  w.i32(cfg.num_distractors);
  w.i32(cfg.max_step);
  w.f64(cfg.noise_std);
  w.f64(cfg.distractor_level);
  w.i32(cfg.channels);
  w.u64(cfg.seed);
  w.array<std::int32_t>({"labels", DType::kI32, {n}}, labels);
  w.array<std::int32_t>({"glyph_track", DType::kI32, {n, T, 2}}, tracks);
  w.array<float>({"frames", DType::kF32, {n, T, C, H, H}}, frames);
  w.checksum();
  write_file_atomic(path, w.buffer());

  std::ostringstream manifest;
  manifest << "format: adafocus-split\n"
           << "version: " << kSplitVersion << "\n"
           << "role: " << to_string(split.role) << "\n"
           << "split_seed: " << split.seed << "\n"
           << "num_samples: " << n << "\n"
           << "num_classes: " << cfg.num_classes << "\n"
           << "frames: " << cfg.frames << "\n"
           << "frame_size: " << cfg.frame_size << "\n"
           << "glyph_size: " << cfg.glyph_size << "\n"
           << "num_distractors: " << cfg.num_distractors << "\n"
           << "max_step: " << cfg.max_step << "\n"
           << "noise_std: " << cfg.noise_std << "\n"
           << "distractor_level: " << cfg.distractor_level << "\n"
           << "channels: " << cfg.channels << "\n"
           << "config_seed: " << cfg.seed << "\n"
           << "arrays: labels i32 [N]; glyph_track i32 [N,T,2]; frames f32 [N,T,C,H,W]\n"
           << "checksum_fnv1a: " << hex64(fnv1a(std::span(w.buffer()).first(w.buffer().size() - 8))) << "\n";
  auto manifest_path = path;
  manifest_path += ".manifest";
  write_text_atomic(manifest_path, manifest.str());
}

DatasetSplit load_split(const std::filesystem::path& path) {
  const auto raw = read_file(path);
  BinaryReader r(raw, path.string());

  auto magic = r.bytes(sizeof(kSplitMagic), "magic");
  if (std::memcmp(magic.data(), kSplitMagic, sizeof(kSplitMagic)) != 0) {
    r.fail("magic", "not an adafocus split file");
  }
  if (r.u32("version") != kSplitVersion) r.fail("version", "unsupported version");

  DatasetSplit split;
  const auto role = r.u32("role");
  if (role > static_cast<std::uint32_t>(SplitRole::kTest)) r.fail("role", "invalid role");
  split.role = static_cast<SplitRole>(role);
  split.seed = r.u64("split_seed");
  const auto n = r.u64("num_samples");
  auto& cfg = split.config;
  cfg.num_classes = r.i32("num_classes");
  cfg.frames = r.i32("frames");
  cfg.frame_size = r.i32("frame_size");
  cfg.glyph_size = r.i32("glyph_size");
  cfg.num_distractors = r.i32("num_distractors");
  cfg.max_step = r.i32("max_step");
  cfg.noise_std = r.f64("noise_std");
  cfg.distractor_level = r.f64("distractor_level");
  cfg.channels = r.i32("channels");
  cfg.seed = r.u64("config_seed");
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    r.fail("header", e.what());
  }
  const std::uint64_t T = cfg.frames, C = cfg.channels, H = cfg.frame_size;

  auto check_dims = [&](const ArrayHeader& h, const std::vector<std::uint64_t>& want,
                        const std::vector<std::string>& names) {
    if (h.dims.size() != want.size()) r.fail(h.name, "rank disagrees with header");
    for (std::size_t i = 0; i < want.size(); ++i) {
      if (h.dims[i] != want[i]) {
        r.fail(h.name + "." + names[i], "dimension " + std::to_string(h.dims[i]) +
                                            " disagrees with header value " +
                                            std::to_string(want[i]));
      }
    }
  };

  std::vector<std::int32_t> labels, tracks;
  std::vector<float> frames;
  auto lh = r.array_header("labels", DType::kI32);
  check_dims(lh, {n}, {"N"});
  r.array_values(lh, labels);
  auto th = r.array_header("glyph_track", DType::kI32);
  check_dims(th, {n, T, 2}, {"N", "T", "2"});
  r.array_values(th, tracks);
  auto fh = r.array_header("frames", DType::kF32);
  check_dims(fh, {n, T, C, H, H}, {"N", "T", "C", "H", "W"});
  r.array_values(fh, frames);
  r.verify_checksum();
  r.expect_end();

  const std::size_t per = T * C * H * H;
  split.samples.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    VideoSample s;
    s.frames = cfg.frames;
    s.channels = cfg.channels;
    s.height = cfg.frame_size;
    s.width = cfg.frame_size;
    s.label = labels[i];
    if (s.label < 0 || s.label >= cfg.num_classes) r.fail("labels", "label out of range");
    s.pixels.assign(frames.begin() + i * per, frames.begin() + (i + 1) * per);
    s.glyph_track.resize(T);
    for (std::uint64_t t = 0; t < T; ++t) {
      s.glyph_track[t] = {tracks[(i * T + t) * 2], tracks[(i * T + t) * 2 + 1]};
    }
    split.samples.push_back(std::move(s));
  }
  return split;
}

}  // namespace adafocus
