#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <system_error>
#include <vector>

#include "geofaith/error.hpp"

namespace geofaith::io {

namespace fs = std::filesystem;

/// Append-only little-endian byte buffer.
class ByteWriter {
 public:
  void put_u32(std::uint32_t value) {
    for (int shift = 0; shift < 32; shift += 8) bytes_.push_back(static_cast<char>((value >> shift) & 0xFFu));
  }

  void put_f32(float value) { put_u32(std::bit_cast<std::uint32_t>(value)); }

  void put_f32s(std::span<const float> values) {
    for (float v : values) put_f32(v);
  }

  void put_raw(std::string_view raw) { bytes_.insert(bytes_.end(), raw.begin(), raw.end()); }

  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

/// Bounds-checked little-endian cursor over a byte buffer. Running past the
/// end throws CorruptBinary tagged with `context`.
class ByteReader {
 public:
  ByteReader(std::span<const char> bytes, std::string context) : bytes_(bytes), context_(std::move(context)) {}

  std::uint32_t get_u32() {
    require(4);
    std::uint32_t value = 0;
    for (int i = 0; i < 4; ++i) {
      value |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[offset_ + i])) << (8 * i);
    }
    offset_ += 4;
    return value;
  }

  float get_f32() { return std::bit_cast<float>(get_u32()); }

  void get_f32s(std::span<float> out) {
    for (float& v : out) v = get_f32();
  }

  std::string get_raw(std::size_t n) {
    require(n);
    std::string out(bytes_.data() + offset_, n);
    offset_ += n;
    return out;
  }

  std::size_t remaining() const { return bytes_.size() - offset_; }

 private:
  void require(std::size_t n) const {
    if (bytes_.size() - offset_ < n) {
      fail(ErrorCode::CorruptBinary, context_ + ": truncated at byte " + std::to_string(offset_));
    }
  }

  std::span<const char> bytes_;
  std::string context_;
  std::size_t offset_ = 0;
};

inline std::vector<char> read_file(const fs::path& path, ErrorCode missing_code = ErrorCode::IoFailure) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(missing_code, "cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    fail(ErrorCode::IoFailure, dir.string() + ": " + (ec ? ec.message() : "not a directory"));
  }
}

/// Writes to a sibling temporary file and renames it into place, so readers
/// never observe a partially written file.
inline void write_file_atomic(const fs::path& path, std::span<const char> bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoFailure, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::IoFailure, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::IoFailure, path.string() + ": " + ec.message());
}

inline void write_text_atomic(const fs::path& path, std::string_view text) {
  write_file_atomic(path, std::span<const char>(text.data(), text.size()));
}

}  // namespace geofaith::io
