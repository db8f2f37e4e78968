#include "icl/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "icl/errors.hpp"
#include "icl/rng.hpp"

namespace icl::io {
namespace {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
}

constexpr std::string_view kRowMagic{"ICLROW\0\0", 8};

}  // namespace

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) { put_le(out, v); }
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) { put_le(out, v); }
void put_f32(std::vector<std::uint8_t>& out, float v) {
  put_le(out, std::bit_cast<std::uint32_t>(v));
}
void put_f64(std::vector<std::uint8_t>& out, double v) {
  put_le(out, std::bit_cast<std::uint64_t>(v));
}
void put_bytes(std::vector<std::uint8_t>& out, std::string_view bytes) {
  out.insert(out.end(), bytes.begin(), bytes.end());
}

void Reader::need(std::size_t n) const {
  if (data_.size() - pos_ < n) {
    throw MalformedInput("binary record truncated at byte " + std::to_string(pos_));
  }
}

std::uint32_t Reader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t Reader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

float Reader::f32() { return std::bit_cast<float>(u32()); }
double Reader::f64() { return std::bit_cast<double>(u64()); }

std::string Reader::bytes(std::size_t n) {
  need(n);
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ManifestError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ManifestError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size()));
    if (!out) throw ManifestError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::string read_text(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = kDigits[v & 0xf];
    v >>= 4;
  }
  return s;
}

std::string file_hash(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return hex64(fnv1a64({reinterpret_cast<const char*>(bytes.data()), bytes.size()}));
}

void write_row(const std::filesystem::path& path, std::span<const double> row) {
  std::vector<std::uint8_t> out;
  out.reserve(20 + 8 * row.size());
  put_bytes(out, kRowMagic);
  put_u32(out, 1);
  put_u64(out, row.size());
  for (double v : row) put_f64(out, v);
  write_file(path, out);
}

std::vector<double> read_row(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  Reader r(bytes);
  if (r.bytes(8) != kRowMagic) throw MalformedInput(path.string() + ": not a row file");
  if (const auto version = r.u32(); version != 1) {
    throw MalformedInput(path.string() + ": unsupported row version " + std::to_string(version));
  }
  const auto n = r.u64();
  if (r.remaining() != 8 * n) throw MalformedInput(path.string() + ": row length mismatch");
  std::vector<double> row(n);
  for (auto& v : row) v = r.f64();
  return row;
}

}  // namespace icl::io
