#include "handkd/binio.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>

namespace handkd {

namespace {

// Serialize integers explicitly byte-by-byte so files are little-endian
// regardless of host order.
template <typename T>
void encode_le(T v, char* dst) {
  for (size_t i = 0; i < sizeof(T); ++i) {
    dst[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  }
}

template <typename T>
T decode_le(const char* src) {
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<unsigned char>(src[i])) << (8 * i);
  }
  return v;
}

}  // namespace

BinWriter::BinWriter(const std::string& path)
    : out_(path, std::ios::binary), path_(path) {
  if (!out_) {
    throw FormatError("cannot open '" + path + "' for writing");
  }
}

void BinWriter::u8(uint8_t v) {
  char b = static_cast<char>(v);
  out_.write(&b, 1);
  bytes_ += 1;
}

void BinWriter::u16(uint16_t v) {
  char b[2];
  encode_le(v, b);
  out_.write(b, 2);
  bytes_ += 2;
}

void BinWriter::u32(uint32_t v) {
  char b[4];
  encode_le(v, b);
  out_.write(b, 4);
  bytes_ += 4;
}

void BinWriter::u64(uint64_t v) {
  char b[8];
  encode_le(v, b);
  out_.write(b, 8);
  bytes_ += 8;
}

void BinWriter::f64(double v) { u64(std::bit_cast<uint64_t>(v)); }

void BinWriter::f64_block(const double* data, uint64_t count) {
  char buf[8 * 1024];
  uint64_t done = 0;
  while (done < count) {
    const uint64_t chunk = std::min<uint64_t>(count - done, sizeof(buf) / 8);
    for (uint64_t i = 0; i < chunk; ++i)
      encode_le(std::bit_cast<uint64_t>(data[done + i]), buf + 8 * i);
    out_.write(buf, static_cast<std::streamsize>(8 * chunk));
    bytes_ += 8 * chunk;
    done += chunk;
  }
}

void BinWriter::magic(const char tag[4]) {
  out_.write(tag, 4);
  bytes_ += 4;
}

void BinWriter::section(const std::string& name, const double* data,
                        uint64_t count) {
  u16(static_cast<uint16_t>(name.size()));
  out_.write(name.data(), static_cast<std::streamsize>(name.size()));
  bytes_ += name.size();
  u64(count);
  for (uint64_t i = 0; i < count; ++i) {
    f64(data[i]);
  }
}

void BinWriter::section(const std::string& name,
                        const std::vector<double>& data) {
  section(name, data.data(), data.size());
}

void BinWriter::close() {
  out_.flush();
  if (!out_) {
    throw FormatError("write failure on '" + path_ + "'");
  }
  out_.close();
}

BinReader::BinReader(const std::string& path)
    : in_(path, std::ios::binary), path_(path) {
  if (!in_) {
    throw FormatError("cannot open '" + path + "' for reading");
  }
  file_size_ = std::filesystem::file_size(path);
}

void BinReader::raw(void* dst, size_t n, const char* what) {
  in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in_.gcount()) != n) {
    throw FormatError("'" + path_ + "': unexpected end of file while reading " +
                      what);
  }
  bytes_ += n;
}

uint8_t BinReader::u8(const char* what) {
  char b;
  raw(&b, 1, what);
  return static_cast<uint8_t>(b);
}

uint16_t BinReader::u16(const char* what) {
  char b[2];
  raw(b, 2, what);
  return decode_le<uint16_t>(b);
}

uint32_t BinReader::u32(const char* what) {
  char b[4];
  raw(b, 4, what);
  return decode_le<uint32_t>(b);
}

uint64_t BinReader::u64(const char* what) {
  char b[8];
  raw(b, 8, what);
  return decode_le<uint64_t>(b);
}

double BinReader::f64(const char* what) {
  return std::bit_cast<double>(u64(what));
}

std::vector<double> BinReader::f64_block(uint64_t count, const char* what) {
  if (count * 8 > file_size_ - bytes_)
    throw FormatError("'" + path_ + "': " + what +
                      " block extends past end of file");
  std::vector<double> data(count);
  char buf[8 * 1024];
  uint64_t done = 0;
  while (done < count) {
    const uint64_t chunk = std::min<uint64_t>(count - done, sizeof(buf) / 8);
    raw(buf, static_cast<size_t>(8 * chunk), what);
    for (uint64_t i = 0; i < chunk; ++i)
      data[done + i] = std::bit_cast<double>(decode_le<uint64_t>(buf + 8 * i));
    done += chunk;
  }
  return data;
}

void BinReader::magic(const char expect[4]) {
  char got[4];
  raw(got, 4, "magic bytes");
  if (std::memcmp(got, expect, 4) != 0) {
    throw FormatError("'" + path_ + "': bad magic, expected '" +
                      std::string(expect, 4) + "' got '" + std::string(got, 4) +
                      "'");
  }
}

std::vector<double> BinReader::section(const std::string& expect_name) {
  const std::string ctx = "section '" + expect_name + "'";
  uint16_t len = u16(ctx.c_str());
  std::string name(len, '\0');
  raw(name.data(), len, ctx.c_str());
  if (name != expect_name) {
    throw FormatError("'" + path_ + "': expected section '" + expect_name +
                      "' but found '" + name + "'");
  }
  uint64_t count = u64(ctx.c_str());
  // sanity bound: payload must fit in what remains of the file
  if (count * 8 > file_size_ - bytes_) {
    throw FormatError("'" + path_ + "': section '" + expect_name +
                      "' payload length exceeds file size");
  }
  std::vector<double> data(count);
  for (uint64_t i = 0; i < count; ++i) {
    data[i] = f64(ctx.c_str());
  }
  return data;
}

bool BinReader::at_end() { return bytes_ >= file_size_; }

namespace {
uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}
}  // namespace

uint64_t bytes_digest_u64(const void* data, size_t n) {
  return fnv1a(data, n);
}

std::string bytes_digest(const void* data, size_t n) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(data, n)));
  return std::string(buf);
}

std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open '" + path + "' for digest");
  }
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a(buf, static_cast<size_t>(in.gcount()), h);
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return std::string(out);
}

}  // namespace handkd
