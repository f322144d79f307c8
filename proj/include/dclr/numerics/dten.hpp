#pragma once

// DTEN v1 tensor files: "DTEN", u8 version (1), u8 rank, rank x u32 LE extents,
// then float32 LE payload in row-major order.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "dclr/numerics/tensor.hpp"

namespace dclr {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace dten {

inline constexpr std::array<char, 4> kMagic{'D', 'T', 'E', 'N'};
inline constexpr std::uint8_t kVersion = 1;

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t get_u32(const unsigned char* b) {
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}
}  // namespace detail

template <typename T>
void write(std::ostream& os, const BasicTensor<T>& t) {
  if (t.rank() == 0 || t.rank() > 255) throw FormatError("dten: rank must be in [1,255]");
  os.write(kMagic.data(), 4);
  const char hdr[2] = {static_cast<char>(kVersion), static_cast<char>(t.rank())};
  os.write(hdr, 2);
  for (auto e : t.shape()) {
    if (e > 0xffffffffu) throw FormatError("dten: extent exceeds u32");
    detail::put_u32(os, static_cast<std::uint32_t>(e));
  }
  for (T v : t.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!os) throw FormatError("dten: write failed");
}

inline Tensor read(std::istream& is) {
  char magic[4];
  unsigned char hdr[2];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic.data(), 4) != 0) throw FormatError("dten: bad magic");
  if (!is.read(reinterpret_cast<char*>(hdr), 2)) throw FormatError("dten: truncated header");
  if (hdr[0] != kVersion) throw FormatError("dten: unsupported version " + std::to_string(hdr[0]));
  if (hdr[1] == 0) throw FormatError("dten: rank 0");
  Shape shape(hdr[1]);
  for (auto& e : shape) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("dten: truncated extents");
    e = detail::get_u32(b);
    if (e == 0) throw FormatError("dten: zero extent");
  }
  std::vector<unsigned char> raw(shape_numel(shape) * 4);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw FormatError("dten: truncated payload, expected " + std::to_string(raw.size()) + " bytes");
  std::vector<float> data(shape_numel(shape));
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = std::bit_cast<float>(detail::get_u32(&raw[4 * i]));
  return Tensor(std::move(shape), std::move(data));
}

template <typename T>
void save(const std::filesystem::path& path, const BasicTensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("dten: cannot open " + path.string() + " for writing");
  write(os, t);
}

inline Tensor load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("dten: cannot open " + path.string());
  try {
    return read(is);
  } catch (const FormatError& e) {
    throw FormatError(std::string(e.what()) + " (" + path.string() + ")");
  }
}

}  // namespace dten
}  // namespace dclr
