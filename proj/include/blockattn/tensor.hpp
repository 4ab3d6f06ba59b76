// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <blockattn/errors.hpp>

namespace blockattn {

using i64 = std::int64_t;

// Dense rank-4 tensor (batch, heads, length, dim), row-major, contiguous.
// All attention inputs and outputs use this layout. Construction validates
// that every element is finite; the hot paths then never have to re-check.
template <typename Real>
class Tensor4 {
 public:
  Tensor4() = default;

  // Zero-initialised tensor.
  Tensor4(i64 b, i64 h, i64 l, i64 d)
      : b_(b), h_(h), l_(l), d_(d), data_(static_cast<std::size_t>(b * h * l * d), Real(0)) {
    check_dims();
  }

  Tensor4(i64 b, i64 h, i64 l, i64 d, std::vector<Real> data)
      : b_(b), h_(h), l_(l), d_(d), data_(std::move(data)) {
    check_dims();
    if (static_cast<i64>(data_.size()) != b_ * h_ * l_ * d_) {
      throw ShapeMismatch("Tensor4: data size " + std::to_string(data_.size()) +
                          " does not match dims " + shape_str());
    }
    for (const Real v : data_) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw NonFiniteInput("Tensor4: non-finite element in " + shape_str());
      }
    }
  }

  i64 batch() const { return b_; }
  i64 heads() const { return h_; }
  i64 length() const { return l_; }
  i64 dim() const { return d_; }
  i64 size() const { return b_ * h_ * l_ * d_; }

  // Unchecked element access; hot loops index rows via row_ptr instead.
  Real& operator()(i64 b, i64 h, i64 l, i64 d) {
    return data_[static_cast<std::size_t>(((b * h_ + h) * l_ + l) * d_ + d)];
  }
  Real operator()(i64 b, i64 h, i64 l, i64 d) const {
    return data_[static_cast<std::size_t>(((b * h_ + h) * l_ + l) * d_ + d)];
  }

  Real& at(i64 b, i64 h, i64 l, i64 d) {
    check_index(b, h, l, d);
    return (*this)(b, h, l, d);
  }
  Real at(i64 b, i64 h, i64 l, i64 d) const {
    check_index(b, h, l, d);
    return (*this)(b, h, l, d);
  }

  Real* row_ptr(i64 b, i64 h, i64 l) {
    return data_.data() + static_cast<std::size_t>(((b * h_ + h) * l_ + l) * d_);
  }
  const Real* row_ptr(i64 b, i64 h, i64 l) const {
    return data_.data() + static_cast<std::size_t>(((b * h_ + h) * l_ + l) * d_);
  }

  std::vector<Real>& data() { return data_; }
  const std::vector<Real>& data() const { return data_; }

  bool same_shape(const Tensor4& o) const {
    return b_ == o.b_ && h_ == o.h_ && l_ == o.l_ && d_ == o.d_;
  }

  bool all_finite() const {
    for (const Real v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <typename Out>
  Tensor4<Out> cast() const {
    std::vector<Out> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<Out>(data_[i]);
    return Tensor4<Out>(b_, h_, l_, d_, std::move(out));
  }

  std::string shape_str() const {
    return "(" + std::to_string(b_) + "," + std::to_string(h_) + "," + std::to_string(l_) + "," +
           std::to_string(d_) + ")";
  }

 private:
  void check_dims() const {
    if (b_ <= 0 || h_ <= 0 || l_ <= 0 || d_ <= 0) {
      throw ShapeMismatch("Tensor4: all dims must be positive, got " + shape_str());
    }
  }
  void check_index(i64 b, i64 h, i64 l, i64 d) const {
    if (b < 0 || b >= b_ || h < 0 || h >= h_ || l < 0 || l >= l_ || d < 0 || d >= d_) {
      throw IndexOutOfRange("Tensor4: index (" + std::to_string(b) + "," + std::to_string(h) +
                            "," + std::to_string(l) + "," + std::to_string(d) +
                            ") out of range for " + shape_str());
    }
  }

  i64 b_ = 0, h_ = 0, l_ = 0, d_ = 0;
  std::vector<Real> data_;
};

namespace detail {

inline void write_u64le(std::ostream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), 8);
}

inline std::uint64_t read_u64le(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw Error("unexpected end of file while reading u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

template <typename Real>
constexpr std::uint64_t precision_tag() {
  static_assert(sizeof(Real) == 4 || sizeof(Real) == 8, "only float/double supported");
  return sizeof(Real) == 4 ? 32u : 64u;
}

}  // namespace detail

// Fixture format: u64le rank, u64le dims[rank], u64le precision tag (32|64),
// then elements as little-endian IEEE float32/float64 in row-major order.
// Rank is always 4 for Tensor4 but the header keeps it explicit so files are
// self-describing.
template <typename Real>
void save_tensor(const std::string& path, const Tensor4<Real>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_tensor: cannot open " + path);
  detail::write_u64le(os, 4);
  detail::write_u64le(os, static_cast<std::uint64_t>(t.batch()));
  detail::write_u64le(os, static_cast<std::uint64_t>(t.heads()));
  detail::write_u64le(os, static_cast<std::uint64_t>(t.length()));
  detail::write_u64le(os, static_cast<std::uint64_t>(t.dim()));
  detail::write_u64le(os, detail::precision_tag<Real>());
  for (const Real v : t.data()) {
    if constexpr (sizeof(Real) == 4) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      unsigned char buf[4];
      for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
      os.write(reinterpret_cast<const char*>(buf), 4);
    } else {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      detail::write_u64le(os, bits);
    }
  }
  if (!os) throw Error("save_tensor: write failed for " + path);
}

template <typename Real>
Tensor4<Real> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_tensor: cannot open " + path);
  const std::uint64_t rank = detail::read_u64le(is);
  if (rank != 4) throw Error("load_tensor: expected rank 4, got " + std::to_string(rank));
  i64 dims[4];
  for (auto& d : dims) d = static_cast<i64>(detail::read_u64le(is));
  const std::uint64_t tag = detail::read_u64le(is);
  if (tag != detail::precision_tag<Real>()) {
    throw Error("load_tensor: precision tag " + std::to_string(tag) + " does not match requested " +
                std::to_string(detail::precision_tag<Real>()) + "-bit load");
  }
  const i64 n = dims[0] * dims[1] * dims[2] * dims[3];
  std::vector<Real> data(static_cast<std::size_t>(n));
  for (i64 i = 0; i < n; ++i) {
    if constexpr (sizeof(Real) == 4) {
      unsigned char buf[4];
      is.read(reinterpret_cast<char*>(buf), 4);
      if (!is) throw Error("load_tensor: truncated payload in " + path);
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(buf[k]) << (8 * k);
      std::memcpy(&data[static_cast<std::size_t>(i)], &bits, 4);
    } else {
      const std::uint64_t bits = detail::read_u64le(is);
      std::memcpy(&data[static_cast<std::size_t>(i)], &bits, 8);
    }
  }
  return Tensor4<Real>(dims[0], dims[1], dims[2], dims[3], std::move(data));
}

}  // namespace blockattn
