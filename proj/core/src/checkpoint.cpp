#include "adafocus/checkpoint.hpp"

#include <algorithm>
#include <cstring>

#include "adafocus/serialize.hpp"

namespace adafocus {

namespace {
constexpr char kMagic[8] = {'A', 'F', 'C', 'K', 'P', 'T', '\0', '\0'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

const NamedArray& Checkpoint::get(const std::string& name) const {
  auto it = std::find_if(arrays.begin(), arrays.end(),
                         [&](const NamedArray& a) { return a.name == name; });
  if (it == arrays.end()) throw FormatError("checkpoint: missing array '" + name + "'");
  return *it;
}

bool Checkpoint::contains(const std::string& name) const {
  return std::any_of(arrays.begin(), arrays.end(),
                     [&](const NamedArray& a) { return a.name == name; });
}

// Layout: magic "AFCKPT\0\0", u32 version, string metadata, u64 array
// count, arrays (name, dtype f32, ndim, dims, byte length, values), u64
// fnv1a checksum.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  BinaryWriter w;
  w.bytes(std::as_bytes(std::span(kMagic)));
  w.u32(kVersion);
  w.string(ckpt.metadata);
  w.u64(ckpt.arrays.size());
  for (const auto& a : ckpt.arrays) {
    ArrayHeader h{a.name, DType::kF32, a.dims};
    if (h.elements() != a.values.size()) {
      throw ContractError("checkpoint: array '" + a.name + "' shape disagrees with data");
    }
    w.array<float>(h, a.values);
  }
  w.checksum();
  write_file_atomic(path, w.buffer());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto raw = read_file(path);
  BinaryReader r(raw, path.string());
  auto magic = r.bytes(sizeof(kMagic), "magic");
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    r.fail("magic", "not an adafocus checkpoint");
  }
  if (r.u32("version") != kVersion) r.fail("version", "unsupported version");
  Checkpoint ckpt;
  ckpt.metadata = r.string("metadata");
  const auto count = r.u64("array_count");
  if (count > 100000) r.fail("array_count", "implausible array count");
  for (std::uint64_t i = 0; i < count; ++i) {
    // Names are free-form here, so read the header fields directly.
    NamedArray a;
    a.name = r.string("array.name");
    if (r.u32(a.name + ".dtype") != static_cast<std::uint32_t>(DType::kF32)) {
      r.fail(a.name, "dtype mismatch, expected f32");
    }
    const auto ndim = r.u32(a.name + ".ndim");
    if (ndim > 8) r.fail(a.name, "too many dimensions");
    for (std::uint32_t d = 0; d < ndim; ++d) a.dims.push_back(r.u64(a.name + ".dims"));
    ArrayHeader h{a.name, DType::kF32, a.dims};
    r.array_values(h, a.values);
    ckpt.arrays.push_back(std::move(a));
  }
  r.verify_checksum();
  r.expect_end();
  return ckpt;
}

}  // namespace adafocus
