#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace adafocus {

/// One parameter (or optimizer-state) tensor: name -> shape -> f32 values.
struct NamedArray {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> values;

  bool operator==(const NamedArray&) const = default;
};

/// Versioned container of named arrays plus a metadata record (JSON text).
struct Checkpoint {
  std::string metadata;
  std::vector<NamedArray> arrays;

  const NamedArray& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  bool operator==(const Checkpoint&) const = default;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace adafocus
