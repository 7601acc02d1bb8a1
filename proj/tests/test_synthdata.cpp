#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <set>

#include "adafocus/serialize.hpp"
#include "adafocus/synthdata.hpp"
#include "test_util.hpp"

using namespace adafocus;

TEST_CASE("degenerate config renders exactly the class glyph on a flat background") {
  SynthConfig cfg;
  cfg.noise_std = 0.0;
  cfg.num_distractors = 0;
  cfg.frames = 1;
  Rng rng(3);
  const auto s = generate_video(cfg, 4, rng);
  const auto glyph = class_glyph(cfg.num_classes, cfg.glyph_size, 4);
  const auto pos = s.glyph_track[0];
  for (int y = 0; y < cfg.frame_size; ++y) {
    for (int x = 0; x < cfg.frame_size; ++x) {
      const bool inside = y >= pos.y && y < pos.y + cfg.glyph_size && x >= pos.x && x < pos.x + cfg.glyph_size;
      float want = kBackgroundLevel;
      if (inside && glyph[(y - pos.y) * cfg.glyph_size + (x - pos.x)]) want = kForegroundLevel;
      REQUIRE(s.pixels[y * cfg.frame_size + x] == want);
    }
  }
}

TEST_CASE("same config and seed give a bit-identical video") {
  SynthConfig cfg;
  Rng a(42), b(42);
  CHECK(generate_video(cfg, a) == generate_video(cfg, b));
}

TEST_CASE("motion stays within max_step and the glyph stays inside the frame") {
  SynthConfig cfg;
  cfg.max_step = 3;
  cfg.frames = 16;
  Rng rng(7);
  int worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto s = generate_video(cfg, rng);
    for (int t = 0; t < cfg.frames; ++t) {
      const auto p = s.glyph_track[t];
      REQUIRE(p.y >= 0);
      REQUIRE(p.x >= 0);
      REQUIRE(p.y + cfg.glyph_size <= cfg.frame_size);
      REQUIRE(p.x + cfg.glyph_size <= cfg.frame_size);
      if (t > 0) {
        worst = std::max({worst, std::abs(p.y - s.glyph_track[t - 1].y), std::abs(p.x - s.glyph_track[t - 1].x)});
      }
    }
    const auto [lo, hi] = std::minmax_element(s.pixels.begin(), s.pixels.end());
    REQUIRE(*lo >= 0.0f);
    REQUIRE(*hi <= 1.0f);
  }
  CHECK(worst <= 3);
}

TEST_CASE("class glyphs are distinct and far apart") {
  const int g = 8, n = 10;
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) {
      const auto pa = class_glyph(n, g, a), pb = class_glyph(n, g, b);
      int d = 0;
      for (std::size_t i = 0; i < pa.size(); ++i) d += pa[i] != pb[i];
      CHECK(d >= glyph_min_distance(g));
    }
  }
}

TEST_CASE("template matching on the ground-truth glyph box recovers the label") {
  SynthConfig cfg;
  cfg.noise_std = 0.0;
  const auto split = generate_split(cfg, 300, SplitRole::kTest, 5);
  int correct = 0;
  for (const auto& s : split.samples) {
    const int t = s.frames / 2;
    const auto p = s.glyph_track[t];
    int best = -1, best_d = 1 << 30;
    for (int k = 0; k < cfg.num_classes; ++k) {
      const auto glyph = class_glyph(cfg.num_classes, cfg.glyph_size, k);
      int d = 0;
      for (int y = 0; y < cfg.glyph_size; ++y) {
        for (int x = 0; x < cfg.glyph_size; ++x) {
          const float v = s.frame(t)[(p.y + y) * cfg.frame_size + p.x + x];
          d += (v > 0.5f) != (glyph[y * cfg.glyph_size + x] != 0);
        }
      }
      if (d < best_d) best_d = d, best = k;
    }
    correct += best == s.label;
  }
  CHECK(correct >= 297);
}

TEST_CASE("splits are class balanced and reproducible") {
  SynthConfig cfg;
  const auto a = generate_split(cfg, 100, SplitRole::kTrain, 9);
  std::vector<int> counts(cfg.num_classes, 0);
  for (const auto& s : a.samples) ++counts[s.label];
  for (int c : counts) CHECK(c == 10);
  CHECK(a == generate_split(cfg, 100, SplitRole::kTrain, 9));
}

TEST_CASE("train and test splits share no frame arrays") {
  SynthConfig cfg;
  const auto train = generate_split(cfg, 200, SplitRole::kTrain, 1);
  const auto test = generate_split(cfg, 100, SplitRole::kTest, 2);
  std::set<std::uint64_t> seen;
  for (const auto& s : train.samples) {
    for (int t = 0; t < s.frames; ++t) seen.insert(fnv1a_values(s.frame(t)));
  }
  int shared = 0;
  for (const auto& s : test.samples) {
    for (int t = 0; t < s.frames; ++t) shared += seen.count(fnv1a_values(s.frame(t))) ? 1 : 0;
  }
  CHECK(shared == 0);
}

TEST_CASE("split files round-trip bit-exactly") {
  TempDir dir("synth_roundtrip");
  SynthConfig cfg;
  cfg.distractor_level = 0.3;
  const auto split = generate_split(cfg, 10, SplitRole::kCalibration, 77);
  const auto path = dir.path / "cal.afsplit";
  save_split(split, path);
  CHECK(load_split(path) == split);
  CHECK(std::filesystem::exists(path.string() + ".manifest"));
}

TEST_CASE("truncated split file is a format error") {
  TempDir dir("synth_truncated");
  const auto split = generate_split(SynthConfig{}, 10, SplitRole::kTrain, 1);
  const auto path = dir.path / "t.afsplit";
  save_split(split, path);
  auto bytes = read_file(path);
  bytes.resize(bytes.size() / 2);
  write_file_atomic(path, bytes);
  CHECK_THROWS_AS(load_split(path), FormatError);
}

TEST_CASE("header frame size disagreeing with the arrays is a format error") {
  TempDir dir("synth_header");
  const auto split = generate_split(SynthConfig{}, 10, SplitRole::kTrain, 1);
  const auto path = dir.path / "h.afsplit";
  save_split(split, path);
  auto bytes = read_file(path);
  // magic(8) version(4) role(4) seed(8) n(8) classes(4) frames(4) -> frame_size at 40
  const std::int32_t other = 32;
  std::memcpy(bytes.data() + 40, &other, sizeof(other));
  const auto sum = fnv1a(std::span<const std::byte>(bytes).first(bytes.size() - 8));
  std::memcpy(bytes.data() + bytes.size() - 8, &sum, sizeof(sum));
  write_file_atomic(path, bytes);
  try {
    load_split(path);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("frames") != std::string::npos);
  }
}

TEST_CASE("invalid configs are rejected") {
  SynthConfig cfg;
  cfg.glyph_size = cfg.frame_size + 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.num_classes = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.distractor_level = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.max_step = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
