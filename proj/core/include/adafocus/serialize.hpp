#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "adafocus/common.hpp"

namespace adafocus {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian and written by memcpy");

enum class DType : std::uint32_t { kI32 = 1, kF32 = 2, kF64 = 3, kU8 = 4 };

std::size_t dtype_size(DType dtype);
std::string_view to_string(DType dtype);

/// Shape-declared array as stored in containers.
struct ArrayHeader {
  std::string name;
  DType dtype = DType::kF32;
  std::vector<std::uint64_t> dims;

  std::uint64_t elements() const;
};

class BinaryWriter {
 public:
  void bytes(std::span<const std::byte> data);
  void u32(std::uint32_t v) { pod(v); }
  void i32(std::int32_t v) { pod(v); }
  void u64(std::uint64_t v) { pod(v); }
  void f64(double v) { pod(v); }
  void string(std::string_view s);

  /// Header followed by the raw element bytes.
  template <typename T>
  void array(const ArrayHeader& header, std::span<const T> values) {
    array_header(header, values.size_bytes());
    bytes(std::as_bytes(values));
  }

  /// Appends fnv1a of everything written so far.
  void checksum();

  const std::vector<std::byte>& buffer() const { return buf_; }

 private:
  template <typename T>
  void pod(const T& v) {
    bytes(std::as_bytes(std::span(&v, 1)));
  }
  void array_header(const ArrayHeader& header, std::size_t byte_len);

  std::vector<std::byte> buf_;
};

/// Bounds-checked reader; every failure is a FormatError naming the field.
class BinaryReader {
 public:
  BinaryReader(std::span<const std::byte> data, std::string source)
      : data_(data), source_(std::move(source)) {}

  std::span<const std::byte> bytes(std::size_t n, std::string_view field);
  std::uint32_t u32(std::string_view field) { return pod<std::uint32_t>(field); }
  std::int32_t i32(std::string_view field) { return pod<std::int32_t>(field); }
  std::uint64_t u64(std::string_view field) { return pod<std::uint64_t>(field); }
  double f64(std::string_view field) { return pod<double>(field); }
  std::string string(std::string_view field);

  /// Reads an array header and checks its name and dtype.
  ArrayHeader array_header(std::string_view expected_name, DType expected);
  /// Reads the payload of `header` into `out`.
  template <typename T>
  void array_values(const ArrayHeader& header, std::vector<T>& out) {
    const auto len = u64(header.name + ".byte_length");
    if (len != header.elements() * sizeof(T)) {
      fail(header.name, "byte length does not match declared shape");
    }
    auto raw = bytes(len, header.name);
    out.resize(header.elements());
    if (len > 0) std::memcpy(out.data(), raw.data(), len);
  }

  /// Verifies the trailing checksum against everything read so far.
  void verify_checksum();
  void expect_end();

  std::size_t position() const { return pos_; }
  [[noreturn]] void fail(std::string_view field, std::string_view what) const;

 private:
  template <typename T>
  T pod(std::string_view field) {
    T v;
    auto raw = bytes(sizeof(T), field);
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
  }

  std::span<const std::byte> data_;
  std::string source_;
  std::size_t pos_ = 0;
};

/// Write to `<path>.tmp` then rename over `path`.
void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::byte> data);
void write_text_atomic(const std::filesystem::path& path,
                       std::string_view text);
std::vector<std::byte> read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

}  // namespace adafocus
