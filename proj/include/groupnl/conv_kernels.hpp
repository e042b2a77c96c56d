#pragma once

// Production convolution path: im2col + GEMM (Eigen), with a direct loop for
// the depthwise case where column buffers buy nothing. Forward results are
// verified against conv2d_direct by the test suite and the verify command.
// Also houses the backward kernels used by the autodiff tape.

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <vector>

#include "tensor.hpp"

namespace groupnl {

inline void set_num_threads(int n) {
  Eigen::setNbThreads(n > 0 ? n : 1);
}

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

// Columns for one (batch item, group): rows = (c_in/g)*k*k, cols = oh*ow.
// Borders are handled per row span so the interior copies run branch-free.
template <typename T>
void im2col(const TensorT<T>& x, std::uint32_t in, std::uint32_t grp, const ConvGeometry& g,
            std::uint32_t oh, std::uint32_t ow, T* col) {
  std::uint32_t cg_in = g.c_in / g.groups;
  std::size_t out_hw = std::size_t(oh) * ow;
  for (std::uint32_t ic = 0; ic < cg_in; ++ic) {
    std::uint32_t src_c = grp * cg_in + ic;
    const T* plane = x.data.data() + (std::size_t(in) * x.c + src_c) * x.h * x.w;
    for (std::uint32_t ky = 0; ky < g.k; ++ky)
      for (std::uint32_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((std::size_t(ic) * g.k + ky) * g.k + kx) * out_hw;
        std::int64_t xoff = std::int64_t(kx) - g.pad;
        // valid ox range: 0 <= ox*stride + xoff < x.w
        std::uint32_t ox_lo =
            xoff < 0 ? std::uint32_t((-xoff + g.stride - 1) / g.stride) : 0;
        std::int64_t hi = std::int64_t(x.w) - 1 - xoff;
        std::uint32_t ox_hi = hi < 0 ? 0 : std::min<std::uint32_t>(std::uint32_t(hi / g.stride) + 1, ow);
        if (ox_lo > ox_hi) ox_lo = ox_hi;

        for (std::uint32_t oy = 0; oy < oh; ++oy) {
          T* dst = row + std::size_t(oy) * ow;
          std::int64_t iy = std::int64_t(oy) * g.stride + ky - g.pad;
          if (iy < 0 || iy >= std::int64_t(x.h)) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = plane + std::size_t(iy) * x.w;
          std::fill(dst, dst + ox_lo, T(0));
          if (g.stride == 1) {
            std::memcpy(dst + ox_lo, src + ox_lo + xoff, (ox_hi - ox_lo) * sizeof(T));
          } else {
            for (std::uint32_t ox = ox_lo; ox < ox_hi; ++ox)
              dst[ox] = src[std::size_t(ox) * g.stride + xoff];
          }
          std::fill(dst + ox_hi, dst + ow, T(0));
        }
      }
  }
}

// Scatter-add inverse of im2col.
template <typename T>
void col2im_add(const T* col, std::uint32_t in, std::uint32_t grp, const ConvGeometry& g,
                std::uint32_t oh, std::uint32_t ow, TensorT<T>& dx) {
  std::uint32_t cg_in = g.c_in / g.groups;
  std::size_t out_hw = std::size_t(oh) * ow;
  for (std::uint32_t ic = 0; ic < cg_in; ++ic) {
    std::uint32_t dst_c = grp * cg_in + ic;
    for (std::uint32_t ky = 0; ky < g.k; ++ky)
      for (std::uint32_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((std::size_t(ic) * g.k + ky) * g.k + kx) * out_hw;
        for (std::uint32_t oy = 0; oy < oh; ++oy) {
          std::int64_t iy = std::int64_t(oy) * g.stride + ky - g.pad;
          if (iy < 0 || iy >= std::int64_t(dx.h)) continue;
          for (std::uint32_t ox = 0; ox < ow; ++ox) {
            std::int64_t ix = std::int64_t(ox) * g.stride + kx - g.pad;
            if (ix < 0 || ix >= std::int64_t(dx.w)) continue;
            dx.at(in, dst_c, std::uint32_t(iy), std::uint32_t(ix)) +=
                row[std::size_t(oy) * ow + ox];
          }
        }
      }
  }
}

}  // namespace detail

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& weight, const std::vector<T>* bias,
                  const ConvGeometry& geom) {
  geom.validate();
  if (x.c != geom.c_in) throw ShapeMismatch("conv2d: input channels != c_in");
  std::uint32_t cg_in = geom.c_in / geom.groups;
  std::uint32_t cg_out = geom.c_out / geom.groups;
  if (weight.n != geom.c_out || weight.c != cg_in || weight.h != geom.k || weight.w != geom.k)
    throw ShapeMismatch("conv2d: weight shape inconsistent with geometry");
  if (bias && bias->size() != geom.c_out)
    throw ShapeMismatch("conv2d: bias length != c_out");

  std::uint32_t oh = geom.out_dim(x.h);
  std::uint32_t ow = geom.out_dim(x.w);

  TensorT<T> y(x.n, geom.c_out, oh, ow);
  std::size_t klen = std::size_t(cg_in) * geom.k * geom.k;
  std::size_t out_hw = std::size_t(oh) * ow;

  if (geom.k == 1 && geom.stride == 1 && geom.pad == 0) {
    // pointwise: the input block already is the column matrix
    for (std::uint32_t in = 0; in < x.n; ++in)
      for (std::uint32_t grp = 0; grp < geom.groups; ++grp) {
        detail::CMapRM<T> w_mat(weight.data.data() + std::size_t(grp) * cg_out * klen,
                                cg_out, klen);
        detail::CMapRM<T> x_mat(
            x.data.data() + (std::size_t(in) * x.c + std::size_t(grp) * cg_in) * out_hw,
            cg_in, out_hw);
        detail::MapRM<T> y_mat(
            y.data.data() + (std::size_t(in) * geom.c_out + std::size_t(grp) * cg_out) * out_hw,
            cg_out, out_hw);
        y_mat.noalias() = w_mat * x_mat;
      }
  } else {
    std::vector<T> col(klen * out_hw);
    for (std::uint32_t in = 0; in < x.n; ++in)
      for (std::uint32_t grp = 0; grp < geom.groups; ++grp) {
        detail::im2col(x, in, grp, geom, oh, ow, col.data());
        detail::CMapRM<T> w_mat(weight.data.data() + std::size_t(grp) * cg_out * klen,
                                cg_out, klen);
        detail::CMapRM<T> col_mat(col.data(), klen, out_hw);
        detail::MapRM<T> y_mat(
            y.data.data() + (std::size_t(in) * geom.c_out + std::size_t(grp) * cg_out) * out_hw,
            cg_out, out_hw);
        y_mat.noalias() = w_mat * col_mat;
      }
  }

  if (bias) {
    for (std::uint32_t in = 0; in < x.n; ++in)
      for (std::uint32_t oc = 0; oc < geom.c_out; ++oc) {
        T b = (*bias)[oc];
        T* p = y.data.data() + (std::size_t(in) * geom.c_out + oc) * out_hw;
        for (std::size_t i = 0; i < out_hw; ++i) p[i] += b;
      }
  }
  return y;
}

// Gradients of conv2d w.r.t. input, weights and bias given the upstream
// gradient dy. Recomputes columns rather than caching them.
template <typename T>
struct ConvGrads {
  TensorT<T> dx;
  TensorT<T> dw;
  std::vector<T> db;
};

template <typename T>
ConvGrads<T> conv2d_backward(const TensorT<T>& x, const TensorT<T>& weight,
                             const ConvGeometry& geom, const TensorT<T>& dy,
                             bool need_dx, bool has_bias) {
  geom.validate();
  std::uint32_t cg_in = geom.c_in / geom.groups;
  std::uint32_t cg_out = geom.c_out / geom.groups;
  std::uint32_t oh = geom.out_dim(x.h);
  std::uint32_t ow = geom.out_dim(x.w);
  if (dy.n != x.n || dy.c != geom.c_out || dy.h != oh || dy.w != ow)
    throw ShapeMismatch("conv2d_backward: dy shape mismatch");

  ConvGrads<T> g;
  g.dw = TensorT<T>(geom.c_out, cg_in, geom.k, geom.k);
  if (need_dx) g.dx = TensorT<T>(x.n, x.c, x.h, x.w);
  if (has_bias) g.db.assign(geom.c_out, T(0));

  std::size_t klen = std::size_t(cg_in) * geom.k * geom.k;
  std::size_t out_hw = std::size_t(oh) * ow;
  std::vector<T> col(klen * out_hw);
  std::vector<T> dcol(need_dx ? klen * out_hw : 0);

  for (std::uint32_t in = 0; in < x.n; ++in)
    for (std::uint32_t grp = 0; grp < geom.groups; ++grp) {
      detail::im2col(x, in, grp, geom, oh, ow, col.data());
      detail::CMapRM<T> col_mat(col.data(), klen, out_hw);
      detail::CMapRM<T> dy_mat(
          dy.data.data() + (std::size_t(in) * geom.c_out + std::size_t(grp) * cg_out) * out_hw,
          cg_out, out_hw);
      detail::MapRM<T> dw_mat(g.dw.data.data() + std::size_t(grp) * cg_out * klen, cg_out,
                              klen);
      dw_mat.noalias() += dy_mat * col_mat.transpose();
      if (need_dx) {
        detail::CMapRM<T> w_mat(weight.data.data() + std::size_t(grp) * cg_out * klen,
                                cg_out, klen);
        detail::MapRM<T> dcol_mat(dcol.data(), klen, out_hw);
        dcol_mat.noalias() = w_mat.transpose() * dy_mat;
        detail::col2im_add(dcol.data(), in, grp, geom, oh, ow, g.dx);
      }
    }

  if (has_bias) {
    for (std::uint32_t in = 0; in < dy.n; ++in)
      for (std::uint32_t oc = 0; oc < geom.c_out; ++oc) {
        const T* p = dy.data.data() + (std::size_t(in) * geom.c_out + oc) * out_hw;
        T s = T(0);
        for (std::size_t i = 0; i < out_hw; ++i) s += p[i];
        g.db[oc] += s;
      }
  }
  return g;
}

}  // namespace groupnl
