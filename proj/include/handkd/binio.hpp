#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "handkd/common.hpp"

namespace handkd {

// Little-endian binary container shared by the rig/dataset/model formats.
// Sections are (name length u16, name bytes, element count u64, f64 payload).

class BinWriter {
 public:
  explicit BinWriter(const std::string& path);

  void u8(uint8_t v);
  void u16(uint16_t v);
  void u32(uint32_t v);
  void u64(uint64_t v);
  void f64(double v);
  /// Raw doubles with no name/count framing (fixed-layout records).
  void f64_block(const double* data, uint64_t count);
  void magic(const char tag[4]);
  void section(const std::string& name, const double* data, uint64_t count);
  void section(const std::string& name, const std::vector<double>& data);

  uint64_t bytes_written() const { return bytes_; }
  void close();

 private:
  std::ofstream out_;
  std::string path_;
  uint64_t bytes_ = 0;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path);

  uint8_t u8(const char* what);
  uint16_t u16(const char* what);
  uint32_t u32(const char* what);
  uint64_t u64(const char* what);
  double f64(const char* what);
  /// Reads `count` raw doubles (the counterpart of BinWriter::f64_block).
  std::vector<double> f64_block(uint64_t count, const char* what);
  /// Reads 4 magic bytes and fails if they differ from `expect`.
  void magic(const char expect[4]);
  /// Reads a section and fails (naming the section) on any mismatch.
  std::vector<double> section(const std::string& expect_name);

  uint64_t file_size() const { return file_size_; }
  uint64_t bytes_read() const { return bytes_; }
  bool at_end();

 private:
  void raw(void* dst, size_t n, const char* what);
  std::ifstream in_;
  std::string path_;
  uint64_t bytes_ = 0;
  uint64_t file_size_ = 0;
};

/// FNV-1a 64-bit digest of a file's bytes, as 16 hex chars.
std::string file_digest(const std::string& path);
/// FNV-1a 64-bit digest of a byte buffer.
std::string bytes_digest(const void* data, size_t n);
/// Same digest as a raw integer (content ids stored in file headers).
uint64_t bytes_digest_u64(const void* data, size_t n);

}  // namespace handkd
