#include "dynrep/binio.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dynrep {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace binio {

const char* to_string(FileErrorCode code) {
  switch (code) {
    case FileErrorCode::io: return "io";
    case FileErrorCode::bad_magic: return "bad_magic";
    case FileErrorCode::version_mismatch: return "version_mismatch";
    case FileErrorCode::truncated: return "truncated";
    case FileErrorCode::checksum_mismatch: return "checksum_mismatch";
    case FileErrorCode::malformed: return "malformed";
  }
  return "unknown";
}

FileError::FileError(FileErrorCode code, const std::string& what)
    : Error(std::string(to_string(code)) + ": " + what), code_(code) {}

std::uint32_t crc32(const std::uint8_t* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

Writer::Writer(const char (&magic)[5], std::uint16_t version) {
  bytes(magic, 4);
  u16(version);
  u64(0);  // patched in finish_to_file
}

void Writer::bytes(const void* data, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  buf_.insert(buf_.end(), p, p + n);
}

void Writer::u8(std::uint8_t v) { buf_.push_back(v); }
void Writer::u16(std::uint16_t v) {
  for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void Writer::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void Writer::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void Writer::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void Writer::str(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s.data(), s.size());
}

void Writer::matrix(const Mat& m) {
  u32(static_cast<std::uint32_t>(m.rows()));
  u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) f64(m(i, j));
}

void Writer::vector(const Vec& v) {
  u64(static_cast<std::uint64_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) f64(v(i));
}

void Writer::finish_to_file(const std::filesystem::path& path) {
  const std::uint64_t total = buf_.size() + 4;
  for (int i = 0; i < 8; ++i) buf_[6 + i] = static_cast<std::uint8_t>(total >> (8 * i));
  const std::uint32_t crc = crc32(buf_.data(), buf_.size());
  u32(crc);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError(FileErrorCode::io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
  if (!out) throw FileError(FileErrorCode::io, "write failed for " + path.string());
  buf_.resize(buf_.size() - 4);
}

Reader Reader::from_file(const std::filesystem::path& path, const char (&magic)[5],
                         std::uint16_t version) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError(FileErrorCode::io, "cannot open " + path.string());
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_bytes(std::move(data), magic, version);
}

Reader Reader::from_bytes(std::vector<std::uint8_t> data, const char (&magic)[5], std::uint16_t version) {
  constexpr std::size_t header = 14;
  if (data.size() < 4 || std::memcmp(data.data(), magic, 4) != 0) {
    if (data.size() < 4) throw FileError(FileErrorCode::truncated, "file shorter than magic");
    throw FileError(FileErrorCode::bad_magic, std::string("expected magic ") + magic);
  }
  if (data.size() < header + 4) throw FileError(FileErrorCode::truncated, "file shorter than header");
  const auto got_version = static_cast<std::uint16_t>(data[4] | (data[5] << 8));
  if (got_version != version)
    throw FileError(FileErrorCode::version_mismatch,
                    "file version " + std::to_string(got_version) + ", expected " + std::to_string(version));
  std::uint64_t total = 0;
  for (int i = 0; i < 8; ++i) total |= static_cast<std::uint64_t>(data[6 + i]) << (8 * i);
  if (data.size() < total)
    throw FileError(FileErrorCode::truncated,
                    "file has " + std::to_string(data.size()) + " bytes, header declares " + std::to_string(total));
  if (data.size() > total) throw FileError(FileErrorCode::malformed, "trailing bytes after declared length");
  const std::size_t body = data.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(data[body + i]) << (8 * i);
  if (stored != crc32(data.data(), body)) throw FileError(FileErrorCode::checksum_mismatch, "CRC32 mismatch");
  data.resize(body);
  return Reader(std::move(data), header);
}

const std::uint8_t* Reader::take(std::size_t n) {
  if (buf_.size() - pos_ < n) throw FileError(FileErrorCode::truncated, "unexpected end of data");
  const std::uint8_t* p = buf_.data() + pos_;
  pos_ += n;
  return p;
}

std::uint8_t Reader::u8() { return *take(1); }
std::uint16_t Reader::u16() {
  const std::uint8_t* p = take(2);
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
std::uint32_t Reader::u32() {
  const std::uint8_t* p = take(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}
std::uint64_t Reader::u64() {
  const std::uint8_t* p = take(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}
double Reader::f64() { return std::bit_cast<double>(u64()); }

std::string Reader::str() {
  const std::uint32_t n = u32();
  const std::uint8_t* p = take(n);
  return std::string(reinterpret_cast<const char*>(p), n);
}

Mat Reader::matrix() {
  const std::uint32_t rows = u32();
  const std::uint32_t cols = u32();
  if (static_cast<std::uint64_t>(rows) * cols * 8 > buf_.size() - pos_)
    throw FileError(FileErrorCode::truncated, "matrix payload exceeds file size");
  Mat m(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i)
    for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = f64();
  return m;
}

Vec Reader::vector() {
  const std::uint64_t n = u64();
  if (n * 8 > buf_.size() - pos_) throw FileError(FileErrorCode::truncated, "vector payload exceeds file size");
  Vec v(static_cast<Eigen::Index>(n));
  for (std::uint64_t i = 0; i < n; ++i) v(static_cast<Eigen::Index>(i)) = f64();
  return v;
}

}  // namespace binio
}  // namespace dynrep
