#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "trustdd/common.hpp"

namespace trustdd {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

// Dense tensor with a shared flat buffer. Reshape is free (aliases the
// buffer); tensors placed in autodiff graphs are treated as immutable.
template <typename T>
class Tensor {
 public:
  Tensor() : buf_(std::make_shared<std::vector<T>>()) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<T>>(static_cast<std::size_t>(shape_numel(shape_)))) {}

  Tensor(Shape shape, T fill)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<T>>(static_cast<std::size_t>(shape_numel(shape_)), fill)) {}

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), buf_(std::make_shared<std::vector<T>>(std::move(data))) {
    if (static_cast<std::int64_t>(buf_->size()) != shape_numel(shape_))
      throw ValidationError("tensor data size " + std::to_string(buf_->size()) +
                            " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return static_cast<std::int64_t>(buf_->size()); }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }

  const T* data() const { return buf_->data(); }
  T* data() { return buf_->data(); }
  const std::vector<T>& vec() const { return *buf_; }
  std::vector<T>& vec() { return *buf_; }

  T& operator[](std::int64_t i) { return (*buf_)[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return (*buf_)[static_cast<std::size_t>(i)]; }

  // 4-D convenience accessor (n, c, h, w).
  T& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return (*buf_)[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  const T& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return (*buf_)[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  // Aliasing reshape; element count must match.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size())
      throw ValidationError("reshape from " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.buf_ = buf_;
    return t;
  }

  // Deep copy with its own buffer.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.buf_ = std::make_shared<std::vector<T>>(*buf_);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const T& v : *buf_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  T min_value() const {
    T m = (*buf_).empty() ? T{0} : (*buf_)[0];
    for (const T& v : *buf_) m = std::min(m, v);
    return m;
  }
  T max_value() const {
    T m = (*buf_).empty() ? T{0} : (*buf_)[0];
    for (const T& v : *buf_) m = std::max(m, v);
    return m;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out{shape_};
    for (std::int64_t i = 0; i < size(); ++i) out[i] = static_cast<U>((*buf_)[static_cast<std::size_t>(i)]);
    return out;
  }

 private:
  template <typename U>
  friend class Tensor;

  Shape shape_;
  std::shared_ptr<std::vector<T>> buf_;
};

// ---------------------------------------------------------------------------
// Binary container primitives. Arrays are little-endian 32-bit (float or int),
// C row-major, preceded by a 4-int32 shape header; 1-D payloads pad the
// header with trailing ones.

namespace detail {

inline void write_exact(std::ofstream& f, const void* p, std::size_t n) {
  f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!f) throw LoadError("short write to binary stream");
}

inline void read_exact(std::ifstream& f, void* p, std::size_t n, const std::string& path) {
  f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (f.gcount() != static_cast<std::streamsize>(n))
    throw LoadError("truncated binary file: " + path);
}

inline bool host_is_little_endian() {
  const std::uint32_t x = 1;
  return *reinterpret_cast<const unsigned char*>(&x) == 1;
}

template <typename T32>
void byteswap_vec(std::vector<T32>& v) {
  for (auto& x : v) {
    auto* b = reinterpret_cast<unsigned char*>(&x);
    std::swap(b[0], b[3]);
    std::swap(b[1], b[2]);
  }
}

}  // namespace detail

template <typename T>
void write_f32_array(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw LoadError("cannot open for write: " + path.string());
  std::int32_t header[4] = {1, 1, 1, 1};
  for (std::size_t i = 0; i < t.rank() && i < 4; ++i) header[i] = static_cast<std::int32_t>(t.shape()[i]);
  std::vector<float> payload(static_cast<std::size_t>(t.size()));
  for (std::int64_t i = 0; i < t.size(); ++i) payload[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
  if (!detail::host_is_little_endian()) {
    std::vector<std::int32_t> h(header, header + 4);
    detail::byteswap_vec(h);
    std::memcpy(header, h.data(), sizeof(header));
    detail::byteswap_vec(payload);
  }
  detail::write_exact(f, header, sizeof(header));
  detail::write_exact(f, payload.data(), payload.size() * sizeof(float));
}

template <typename T>
Tensor<T> read_f32_array(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("missing binary file: " + path.string());
  std::int32_t header[4];
  detail::read_exact(f, header, sizeof(header), path.string());
  if (!detail::host_is_little_endian()) {
    std::vector<std::int32_t> h(header, header + 4);
    detail::byteswap_vec(h);
    std::memcpy(header, h.data(), sizeof(header));
  }
  Shape shape;
  for (int i = 0; i < 4; ++i) {
    if (header[i] < 0) throw LoadError("negative dimension in header: " + path.string());
    shape.push_back(header[i]);
  }
  std::vector<float> payload(static_cast<std::size_t>(shape_numel(shape)));
  detail::read_exact(f, payload.data(), payload.size() * sizeof(float), path.string());
  if (!detail::host_is_little_endian()) detail::byteswap_vec(payload);
  Tensor<T> t{shape};
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(payload[static_cast<std::size_t>(i)]);
  return t;
}

inline void write_i32_array(const std::filesystem::path& path, const std::vector<std::int32_t>& v) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw LoadError("cannot open for write: " + path.string());
  std::vector<std::int32_t> payload = v;
  if (!detail::host_is_little_endian()) detail::byteswap_vec(payload);
  detail::write_exact(f, payload.data(), payload.size() * sizeof(std::int32_t));
}

inline std::vector<std::int32_t> read_i32_array(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("missing binary file: " + path.string());
  f.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(f.tellg());
  f.seekg(0);
  if (bytes % sizeof(std::int32_t) != 0) throw LoadError("int32 file has ragged size: " + path.string());
  std::vector<std::int32_t> v(bytes / sizeof(std::int32_t));
  detail::read_exact(f, v.data(), bytes, path.string());
  if (!detail::host_is_little_endian()) detail::byteswap_vec(v);
  return v;
}

// Checksum over the exact serialized float32 payload.
template <typename T>
std::uint64_t pixel_checksum(const Tensor<T>& t) {
  std::vector<float> payload(static_cast<std::size_t>(t.size()));
  for (std::int64_t i = 0; i < t.size(); ++i) payload[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
  return fnv1a64(payload.data(), payload.size() * sizeof(float));
}

}  // namespace trustdd
