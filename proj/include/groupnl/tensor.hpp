#pragma once

// Dense NCHW tensors, channel-axis manipulation and the direct convolution
// reference used as the correctness oracle throughout the library.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace groupnl {

struct ShapeMismatch : std::runtime_error {
  explicit ShapeMismatch(const std::string& what) : std::runtime_error(what) {}
};
struct NonDivisibleChannels : std::runtime_error {
  explicit NonDivisibleChannels(const std::string& what) : std::runtime_error(what) {}
};
struct GroupMismatch : std::runtime_error {
  explicit GroupMismatch(const std::string& what) : std::runtime_error(what) {}
};
struct InvalidSpec : std::runtime_error {
  explicit InvalidSpec(const std::string& what) : std::runtime_error(what) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Rank-4 dense tensor, fixed NCHW layout, contiguous row-major storage.
// Element (n,c,y,x) lives at ((n*C + c)*H + y)*W + x.
template <typename T>
struct TensorT {
  std::uint32_t n = 1, c = 1, h = 1, w = 1;
  std::vector<T> data;

  TensorT() : data(1, T(0)) {}
  TensorT(std::uint32_t n_, std::uint32_t c_, std::uint32_t h_, std::uint32_t w_)
      : n(n_), c(c_), h(h_), w(w_) {
    if (n == 0 || c == 0 || h == 0 || w == 0)
      throw ShapeMismatch("tensor dims must all be >= 1");
    data.assign(numel(), T(0));
  }

  std::size_t numel() const {
    return std::size_t(n) * c * h * w;
  }
  std::size_t index(std::uint32_t in, std::uint32_t ic, std::uint32_t iy, std::uint32_t ix) const {
    return ((std::size_t(in) * c + ic) * h + iy) * w + ix;
  }
  T& at(std::uint32_t in, std::uint32_t ic, std::uint32_t iy, std::uint32_t ix) {
    return data[index(in, ic, iy, ix)];
  }
  T at(std::uint32_t in, std::uint32_t ic, std::uint32_t iy, std::uint32_t ix) const {
    return data[index(in, ic, iy, ix)];
  }
  bool same_shape(const TensorT& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }

  static TensorT zeros(std::uint32_t n, std::uint32_t c, std::uint32_t h, std::uint32_t w) {
    return TensorT(n, c, h, w);
  }
  static TensorT full(std::uint32_t n, std::uint32_t c, std::uint32_t h, std::uint32_t w, T v) {
    TensorT t(n, c, h, w);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  // Uniform values in [lo, hi), deterministic for a given seed.
  static TensorT uniform(std::uint32_t n, std::uint32_t c, std::uint32_t h, std::uint32_t w,
                         std::uint64_t seed, T lo = T(-1), T hi = T(1)) {
    TensorT t(n, c, h, w);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist{double(lo), double(hi)};
    for (auto& v : t.data) v = T(dist(rng));
    return t;
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(n, c, h, w);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

template <typename T>
inline bool bitwise_equal(const TensorT<T>& a, const TensorT<T>& b) {
  return a.same_shape(b) &&
         std::memcmp(a.data.data(), b.data.data(), a.numel() * sizeof(T)) == 0;
}

template <typename T>
inline double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) throw ShapeMismatch("max_abs_diff: shapes differ");
  double m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    double d = std::abs(double(a.data[i]) - double(b.data[i]));
    if (d > m) m = d;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Channel-axis manipulation

template <typename T>
std::vector<TensorT<T>> channel_split(const TensorT<T>& t, std::uint32_t g) {
  if (g == 0 || t.c % g != 0)
    throw NonDivisibleChannels("channel_split: c=" + std::to_string(t.c) +
                               " not divisible by g=" + std::to_string(g));
  std::uint32_t cg = t.c / g;
  std::vector<TensorT<T>> parts;
  parts.reserve(g);
  std::size_t plane = std::size_t(t.h) * t.w;
  for (std::uint32_t i = 0; i < g; ++i) {
    TensorT<T> p(t.n, cg, t.h, t.w);
    for (std::uint32_t in = 0; in < t.n; ++in) {
      const T* src = t.data.data() + (std::size_t(in) * t.c + std::size_t(i) * cg) * plane;
      T* dst = p.data.data() + std::size_t(in) * cg * plane;
      std::memcpy(dst, src, cg * plane * sizeof(T));
    }
    parts.push_back(std::move(p));
  }
  return parts;
}

template <typename T>
TensorT<T> channel_concat(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ShapeMismatch("channel_concat: empty part list");
  std::uint32_t ctot = 0;
  for (const auto& p : parts) {
    if (p.n != parts[0].n || p.h != parts[0].h || p.w != parts[0].w)
      throw ShapeMismatch("channel_concat: parts disagree on n/h/w");
    ctot += p.c;
  }
  TensorT<T> out(parts[0].n, ctot, parts[0].h, parts[0].w);
  std::size_t plane = std::size_t(out.h) * out.w;
  for (std::uint32_t in = 0; in < out.n; ++in) {
    std::uint32_t coff = 0;
    for (const auto& p : parts) {
      const T* src = p.data.data() + std::size_t(in) * p.c * plane;
      T* dst = out.data.data() + (std::size_t(in) * ctot + coff) * plane;
      std::memcpy(dst, src, std::size_t(p.c) * plane * sizeof(T));
      coff += p.c;
    }
  }
  return out;
}

// Copy j (0-based) occupies channels [j*t.c, (j+1)*t.c).
template <typename T>
TensorT<T> channel_repeat(const TensorT<T>& t, std::uint32_t times) {
  if (times == 0) throw ShapeMismatch("channel_repeat: times must be >= 1");
  TensorT<T> out(t.n, t.c * times, t.h, t.w);
  std::size_t block = std::size_t(t.c) * t.h * t.w;
  for (std::uint32_t in = 0; in < t.n; ++in) {
    const T* src = t.data.data() + std::size_t(in) * block;
    for (std::uint32_t j = 0; j < times; ++j) {
      T* dst = out.data.data() + (std::size_t(in) * times + j) * block;
      std::memcpy(dst, src, block * sizeof(T));
    }
  }
  return out;
}

// Channels [from, to) as a standalone tensor.
template <typename T>
TensorT<T> channel_slice(const TensorT<T>& t, std::uint32_t from, std::uint32_t to) {
  if (from >= to || to > t.c) throw ShapeMismatch("channel_slice: bad range");
  TensorT<T> out(t.n, to - from, t.h, t.w);
  std::size_t plane = std::size_t(t.h) * t.w;
  for (std::uint32_t in = 0; in < t.n; ++in) {
    const T* src = t.data.data() + (std::size_t(in) * t.c + from) * plane;
    T* dst = out.data.data() + std::size_t(in) * out.c * plane;
    std::memcpy(dst, src, std::size_t(out.c) * plane * sizeof(T));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution geometry

struct ConvGeometry {
  std::uint32_t c_in = 1;
  std::uint32_t c_out = 1;
  std::uint32_t k = 1;
  std::uint32_t stride = 1;
  std::uint32_t pad = 0;
  std::uint32_t groups = 1;
  bool bias = true;

  void validate() const {
    if (c_in == 0 || c_out == 0 || k == 0 || stride == 0 || groups == 0)
      throw InvalidSpec("conv geometry fields must be positive");
    if (c_in % groups != 0 || c_out % groups != 0)
      throw GroupMismatch("c_in/c_out not divisible by groups");
  }
  std::uint32_t out_dim(std::uint32_t in) const {
    std::int64_t o = (std::int64_t(in) + 2 * std::int64_t(pad) - std::int64_t(k)) / stride + 1;
    if (o < 1) throw ShapeMismatch("conv output dim would be < 1");
    return std::uint32_t(o);
  }
};

// Reference grouped/strided/zero-padded cross-correlation. Seven plain loops,
// correctness over speed; every faster path in the library is checked against
// this.
template <typename T>
TensorT<T> conv2d_direct(const TensorT<T>& x, const TensorT<T>& weight,
                         const std::vector<T>* bias, const ConvGeometry& geom) {
  geom.validate();
  if (x.c != geom.c_in) throw ShapeMismatch("conv2d_direct: input channels != c_in");
  std::uint32_t cg_in = geom.c_in / geom.groups;
  std::uint32_t cg_out = geom.c_out / geom.groups;
  if (weight.n != geom.c_out || weight.c != cg_in || weight.h != geom.k || weight.w != geom.k)
    throw ShapeMismatch("conv2d_direct: weight shape inconsistent with geometry");
  if (bias && bias->size() != geom.c_out)
    throw ShapeMismatch("conv2d_direct: bias length != c_out");

  std::uint32_t oh = geom.out_dim(x.h);
  std::uint32_t ow = geom.out_dim(x.w);
  TensorT<T> y(x.n, geom.c_out, oh, ow);

  for (std::uint32_t in = 0; in < x.n; ++in)
    for (std::uint32_t oc = 0; oc < geom.c_out; ++oc) {
      std::uint32_t grp = oc / cg_out;
      for (std::uint32_t oy = 0; oy < oh; ++oy)
        for (std::uint32_t ox = 0; ox < ow; ++ox) {
          T acc = bias ? (*bias)[oc] : T(0);
          for (std::uint32_t ic = 0; ic < cg_in; ++ic)
            for (std::uint32_t ky = 0; ky < geom.k; ++ky)
              for (std::uint32_t kx = 0; kx < geom.k; ++kx) {
                std::int64_t iy = std::int64_t(oy) * geom.stride + ky - geom.pad;
                std::int64_t ix = std::int64_t(ox) * geom.stride + kx - geom.pad;
                if (iy < 0 || ix < 0 || iy >= std::int64_t(x.h) || ix >= std::int64_t(x.w))
                  continue;
                acc += x.at(in, grp * cg_in + ic, std::uint32_t(iy), std::uint32_t(ix)) *
                       weight.at(oc, ic, ky, kx);
              }
          y.at(in, oc, oy, ox) = acc;
        }
    }
  return y;
}

template <typename T>
TensorT<T> conv2d_direct(const TensorT<T>& x, const TensorT<T>& weight,
                         const ConvGeometry& geom) {
  return conv2d_direct(x, weight, static_cast<const std::vector<T>*>(nullptr), geom);
}

// ---------------------------------------------------------------------------
// .nchw fixture format: 16-byte header (4 x u32 dims, little-endian) + raw
// little-endian f32 data.

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("truncated .nchw header");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

inline void save_nchw(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  write_u32_le(os, t.n);
  write_u32_le(os, t.c);
  write_u32_le(os, t.h);
  write_u32_le(os, t.w);
  for (float v : t.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32_le(os, bits);
  }
  if (!os) throw IoError("write failed: " + path);
}

inline Tensor load_nchw(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path);
  std::uint32_t n = read_u32_le(is), c = read_u32_le(is), h = read_u32_le(is),
                w = read_u32_le(is);
  Tensor t(n, c, h, w);
  for (auto& v : t.data) {
    std::uint32_t bits = read_u32_le(is);
    std::memcpy(&v, &bits, 4);
  }
  return t;
}

}  // namespace groupnl
