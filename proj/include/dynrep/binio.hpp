#pragma once

// Fixed little-endian binary encoding shared by the dataset (IMPD) and
// network checkpoint (IMPN) files. Every file ends with a CRC32 of all
// preceding bytes.

#include "dynrep/common.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dynrep::binio {

enum class FileErrorCode { io, bad_magic, version_mismatch, truncated, checksum_mismatch, malformed };

const char* to_string(FileErrorCode code);

class FileError : public Error {
 public:
  FileError(FileErrorCode code, const std::string& what);
  FileErrorCode code() const noexcept { return code_; }

 private:
  FileErrorCode code_;
};

std::uint32_t crc32(const std::uint8_t* data, std::size_t size);

// File layout: magic[4] | version u16 | total_length u64 | body | crc32 u32.
class Writer {
 public:
  Writer(const char (&magic)[5], std::uint16_t version);
  void bytes(const void* data, std::size_t n);
  void u8(std::uint8_t v);
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void str(const std::string& s);
  void matrix(const Mat& m);  // rows u32, cols u32, row-major f64
  void vector(const Vec& v);  // size u64, f64 values

  /// Appends the CRC32 trailer and writes the buffer to disk.
  void finish_to_file(const std::filesystem::path& path);
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  /// Reads the whole file and validates magic, version, length and CRC32,
  /// in that order. The returned reader is positioned at the body.
  static Reader from_file(const std::filesystem::path& path, const char (&magic)[5],
                          std::uint16_t version);
  static Reader from_bytes(std::vector<std::uint8_t> data, const char (&magic)[5],
                           std::uint16_t version);

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string str();
  Mat matrix();
  Vec vector();
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  explicit Reader(std::vector<std::uint8_t> data, std::size_t pos) : buf_(std::move(data)), pos_(pos) {}
  const std::uint8_t* take(std::size_t n);
  std::vector<std::uint8_t> buf_;
  std::size_t pos_;
};

}  // namespace dynrep::binio
