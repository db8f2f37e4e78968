#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace icl::io {

// Little-endian primitive encoding, independent of host byte order.
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);
void put_f64(std::vector<std::uint8_t>& out, double v);
void put_bytes(std::vector<std::uint8_t>& out, std::string_view bytes);

/// Sequential little-endian decoder; throws MalformedInput on truncation.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string bytes(std::size_t n);

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const;

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes to a temporary sibling and renames, so readers never see a partial file.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

/// FNV-1a 64 of a file's bytes, as 16 lowercase hex digits.
std::string file_hash(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

// Predictor/function-space row files shared by predictors and trajectory_pca:
//   "ICLROW\0\0" | u32 version=1 | u64 length | length x f64
void write_row(const std::filesystem::path& path, std::span<const double> row);
std::vector<double> read_row(const std::filesystem::path& path);

}  // namespace icl::io
