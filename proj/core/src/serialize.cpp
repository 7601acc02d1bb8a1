#include "adafocus/serialize.hpp"

#include <fstream>
#include <sstream>

namespace adafocus {

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kI32: return 4;
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
  }
  throw FormatError("unknown dtype tag");
}

std::string_view to_string(DType dtype) {
  switch (dtype) {
    case DType::kI32: return "i32";
    case DType::kF32: return "f32";
    case DType::kF64: return "f64";
    case DType::kU8: return "u8";
  }
  return "?";
}

std::uint64_t ArrayHeader::elements() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void BinaryWriter::bytes(std::span<const std::byte> data) {
  buf_.insert(buf_.end(), data.begin(), data.end());
}

void BinaryWriter::string(std::string_view s) {
  u64(s.size());
  bytes(std::as_bytes(std::span(s.data(), s.size())));
}

void BinaryWriter::array_header(const ArrayHeader& header,
                                std::size_t byte_len) {
  string(header.name);
  u32(static_cast<std::uint32_t>(header.dtype));
  u32(static_cast<std::uint32_t>(header.dims.size()));
  for (auto d : header.dims) u64(d);
  u64(byte_len);
}

void BinaryWriter::checksum() { u64(fnv1a(std::span(buf_))); }

std::span<const std::byte> BinaryReader::bytes(std::size_t n,
                                               std::string_view field) {
  if (n > data_.size() - pos_) fail(field, "truncated");
  auto out = data_.subspan(pos_, n);
  pos_ += n;
  return out;
}

std::string BinaryReader::string(std::string_view field) {
  const auto n = u64(field);
  if (n > (1u << 24)) fail(field, "implausible string length");
  auto raw = bytes(n, field);
  return std::string(reinterpret_cast<const char*>(raw.data()), raw.size());
}

ArrayHeader BinaryReader::array_header(std::string_view expected_name,
                                       DType expected) {
  ArrayHeader h;
  h.name = string(std::string(expected_name) + ".name");
  if (h.name != expected_name) {
    fail(expected_name, "expected array '" + std::string(expected_name) +
                            "', found '" + h.name + "'");
  }
  const auto tag = u32(h.name + ".dtype");
  if (tag != static_cast<std::uint32_t>(expected)) {
    fail(h.name, "dtype mismatch, expected " + std::string(to_string(expected)));
  }
  h.dtype = expected;
  const auto ndim = u32(h.name + ".ndim");
  if (ndim > 8) fail(h.name, "too many dimensions");
  for (std::uint32_t i = 0; i < ndim; ++i) h.dims.push_back(u64(h.name + ".dims"));
  return h;
}

void BinaryReader::verify_checksum() {
  const auto expected = fnv1a(data_.first(pos_));
  const auto stored = u64("checksum");
  if (stored != expected) fail("checksum", "content checksum mismatch");
}

void BinaryReader::expect_end() {
  if (pos_ != data_.size()) fail("trailer", "unexpected trailing bytes");
}

void BinaryReader::fail(std::string_view field, std::string_view what) const {
  std::ostringstream os;
  os << source_ << ": field '" << field << "': " << what;
  throw FormatError(os.str());
}

void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::byte> data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size()));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path,
                       std::string_view text) {
  write_file_atomic(path, std::as_bytes(std::span(text.data(), text.size())));
}

std::vector<std::byte> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> buf(size);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
  if (!in) throw FormatError("read failed: " + path.string());
  return buf;
}

std::string read_text(const std::filesystem::path& path) {
  auto raw = read_file(path);
  return std::string(reinterpret_cast<const char*>(raw.data()), raw.size());
}

}  // namespace adafocus
