#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "oscount/tensor.hpp"

namespace oscount {

// Portable tensor file: magic "TNSR", little-endian u32 ndim, ndim x u32
// dims, then the row-major f32 payload. Assumes a little-endian host.

inline void append_tensor_bytes(const Tensor<float>& t, std::string& out) {
  out.append("TNSR", 4);
  const std::uint32_t ndim = static_cast<std::uint32_t>(t.ndim());
  out.append(reinterpret_cast<const char*>(&ndim), 4);
  for (int i = 0; i < t.ndim(); ++i) {
    const std::uint32_t d = static_cast<std::uint32_t>(t.dim(i));
    out.append(reinterpret_cast<const char*>(&d), 4);
  }
  out.append(reinterpret_cast<const char*>(t.data().data()), t.data().size_bytes());
}

inline void write_tensor(const Tensor<float>& t, const std::string& path) {
  std::string buf;
  append_tensor_bytes(t, buf);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("short write: " + path);
}

/// Cursor over an in-memory tensor blob; parse errors report byte offsets.
class TensorReader {
 public:
  TensorReader(const char* data, std::size_t size, std::string origin)
      : data_(data), size_(size), origin_(std::move(origin)) {}

  Tensor<float> read_tensor() {
    const std::size_t start = pos_;
    char magic[4];
    take(magic, 4, "magic");
    if (std::string_view(magic, 4) != "TNSR")
      throw std::runtime_error(origin_ + ": bad magic at byte offset " + std::to_string(start) +
                               " (expected \"TNSR\")");
    std::uint32_t ndim = 0;
    take(&ndim, 4, "ndim");
    if (ndim == 0 || ndim > 8)
      throw std::runtime_error(origin_ + ": implausible ndim " + std::to_string(ndim) +
                               " at byte offset " + std::to_string(start + 4));
    Shape shape(ndim);
    std::int64_t n = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
      std::uint32_t d = 0;
      take(&d, 4, "dim");
      if (d == 0)
        throw std::runtime_error(origin_ + ": zero dim at byte offset " + std::to_string(pos_ - 4));
      shape[i] = static_cast<int>(d);
      n *= d;
    }
    std::vector<float> vals(static_cast<std::size_t>(n));
    take(vals.data(), static_cast<std::size_t>(n) * 4, "payload");
    return Tensor<float>::from(std::move(shape), std::move(vals));
  }

  bool at_end() const { return pos_ == size_; }
  std::size_t position() const { return pos_; }

  void take(void* dst, std::size_t count, const char* what) {
    if (pos_ + count > size_)
      throw std::runtime_error(origin_ + ": truncated " + what + " at byte offset " +
                               std::to_string(pos_) + " (need " + std::to_string(count) +
                               " bytes, have " + std::to_string(size_ - pos_) + ")");
    std::memcpy(dst, data_ + pos_, count);
    pos_ += count;
  }

 private:
  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string origin_;
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline Tensor<float> read_tensor(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  TensorReader r(bytes.data(), bytes.size(), path);
  Tensor<float> t = r.read_tensor();
  if (!r.at_end())
    throw std::runtime_error(path + ": trailing bytes at offset " + std::to_string(r.position()));
  return t;
}

/// 8-bit binary PGM preview, values scaled by 255/max (zero map stays zero).
inline void write_pgm(const Tensor<float>& t, const std::string& path) {
  if (t.ndim() != 2) throw std::invalid_argument("write_pgm: need 2-d tensor, got " + shape_str(t.shape()));
  const int h = t.dim(0), w = t.dim(1);
  float maxv = 0.0f;
  for (float v : t.data()) maxv = std::max(maxv, v);
  const float scale = maxv > 0.0f ? 255.0f / maxv : 0.0f;
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "P5\n" << w << " " << h << "\n255\n";
  for (float v : t.data()) {
    const int q = static_cast<int>(std::lround(std::max(0.0f, v) * scale));
    const unsigned char byte = static_cast<unsigned char>(std::min(q, 255));
    f.write(reinterpret_cast<const char*>(&byte), 1);
  }
}

}  // namespace oscount
