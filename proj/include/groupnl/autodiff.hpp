#pragma once

// Tape-based reverse-mode differentiation over the library's primitives:
// conv, channel slice/concat/repeat, elementwise NLF, batch norm, relu,
// residual add, global average pool and softmax cross-entropy. Only tensors
// registered as trainable leaves receive gradients; NLF hyperparameters are
// never registered.

#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "conv_kernels.hpp"
#include "layers.hpp"
#include "nlf.hpp"
#include "tensor.hpp"

namespace groupnl {

struct NonScalarLoss : std::runtime_error {
  explicit NonScalarLoss(const std::string& what) : std::runtime_error(what) {}
};

template <typename T>
class Tape {
 public:
  struct Node {
    TensorT<T> value;
    TensorT<T> grad;
    bool has_grad = false;
    bool needs_grad = false;
    std::string leaf_name;  // non-empty for registered trainable leaves
    std::function<void(Tape&, int)> backprop;
  };

  const TensorT<T>& value(int id) const { return nodes_[id].value; }
  const TensorT<T>& grad(int id) const { return nodes_[id].grad; }
  bool has_grad(int id) const { return nodes_[id].has_grad; }

  int constant(TensorT<T> v) {
    Node n;
    n.value = std::move(v);
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  int leaf(TensorT<T> v, const std::string& name) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = true;
    n.leaf_name = name;
    nodes_.push_back(std::move(n));
    leaves_.push_back(int(nodes_.size()) - 1);
    return int(nodes_.size()) - 1;
  }

  std::size_t trainable_scalar_count() const {
    std::size_t n = 0;
    for (int id : leaves_) n += nodes_[id].value.numel();
    return n;
  }

  bool node_needs_grad(int id) const { return nodes_[id].needs_grad; }

  // Escape hatch for ops built outside the tape (value precomputed, adjoint
  // supplied by the caller).
  int custom(TensorT<T> value, const std::vector<int>& parents,
             std::function<void(Tape&, int)> backprop) {
    int id = emit(std::move(value), parents);
    nodes_[id].backprop = std::move(backprop);
    return id;
  }

  // ---- ops -----------------------------------------------------------------

  int conv(int x, int w, int b, const ConvGeometry& geom) {
    const TensorT<T>& xv = nodes_[x].value;
    const TensorT<T>& wv = nodes_[w].value;
    std::vector<T> bias;
    if (b >= 0) bias = nodes_[b].value.data;
    TensorT<T> y = conv2d(xv, wv, b >= 0 ? &bias : nullptr, geom);
    int id = emit(std::move(y), {x, w, b});
    nodes_[id].backprop = [x, w, b, geom](Tape& t, int self) {
      bool need_dx = t.nodes_[x].needs_grad;
      bool need_db = b >= 0 && t.nodes_[b].needs_grad;
      ConvGrads<T> g = conv2d_backward(t.nodes_[x].value, t.nodes_[w].value, geom,
                                       t.nodes_[self].grad, need_dx, need_db);
      if (t.nodes_[w].needs_grad) t.accumulate(w, g.dw);
      if (need_dx) t.accumulate(x, g.dx);
      if (need_db) {
        TensorT<T> db(1, geom.c_out, 1, 1);
        db.data = g.db;
        t.accumulate(b, db);
      }
    };
    return id;
  }

  int slice_channels(int x, std::uint32_t from, std::uint32_t to) {
    TensorT<T> y = channel_slice(nodes_[x].value, from, to);
    int id = emit(std::move(y), {x});
    nodes_[id].backprop = [x, from, to](Tape& t, int self) {
      if (!t.nodes_[x].needs_grad) return;
      const TensorT<T>& g = t.nodes_[self].grad;
      TensorT<T>& dst = t.grad_buffer(x);
      std::size_t plane = std::size_t(g.h) * g.w;
      for (std::uint32_t in = 0; in < g.n; ++in)
        for (std::uint32_t c = 0; c < g.c; ++c) {
          const T* src = g.data.data() + (std::size_t(in) * g.c + c) * plane;
          T* d = dst.data.data() + (std::size_t(in) * dst.c + from + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) d[i] += src[i];
        }
    };
    return id;
  }

  int concat_channels(const std::vector<int>& parts) {
    std::vector<TensorT<T>> vals;
    vals.reserve(parts.size());
    for (int p : parts) vals.push_back(nodes_[p].value);
    TensorT<T> y = channel_concat(vals);
    int id = emit(std::move(y), parts);
    nodes_[id].backprop = [parts](Tape& t, int self) {
      const TensorT<T>& g = t.nodes_[self].grad;
      std::size_t plane = std::size_t(g.h) * g.w;
      std::uint32_t coff = 0;
      for (int p : parts) {
        std::uint32_t pc = t.nodes_[p].value.c;
        if (t.nodes_[p].needs_grad) {
          TensorT<T>& dst = t.grad_buffer(p);
          for (std::uint32_t in = 0; in < g.n; ++in) {
            const T* src = g.data.data() + (std::size_t(in) * g.c + coff) * plane;
            T* d = dst.data.data() + std::size_t(in) * pc * plane;
            for (std::size_t i = 0; i < std::size_t(pc) * plane; ++i) d[i] += src[i];
          }
        }
        coff += pc;
      }
    };
    return id;
  }

  // Adjoint sums gradients across copies.
  int repeat_channels(int x, std::uint32_t times) {
    TensorT<T> y = channel_repeat(nodes_[x].value, times);
    int id = emit(std::move(y), {x});
    nodes_[id].backprop = [x, times](Tape& t, int self) {
      if (!t.nodes_[x].needs_grad) return;
      const TensorT<T>& g = t.nodes_[self].grad;
      TensorT<T>& dst = t.grad_buffer(x);
      std::size_t block = dst.numel() / dst.n;
      for (std::uint32_t in = 0; in < dst.n; ++in)
        for (std::uint32_t j = 0; j < times; ++j) {
          const T* src = g.data.data() + (std::size_t(in) * times + j) * block;
          T* d = dst.data.data() + std::size_t(in) * block;
          for (std::size_t i = 0; i < block; ++i) d[i] += src[i];
        }
    };
    return id;
  }

  // Elementwise NLF with one fixed hyperparameter set over the whole tensor.
  int nlf_elementwise(int x, NlfKind kind, double p0d, double p1d, bool laplace_abs) {
    T p0 = T(p0d), p1 = T(p1d);
    const TensorT<T>& xv = nodes_[x].value;
    TensorT<T> y(xv.n, xv.c, xv.h, xv.w);
    detail::nlf_eval_span(kind, laplace_abs, p0, p1, xv.data.data(), y.data.data(),
                          xv.data.size());
    int id = emit(std::move(y), {x});
    nodes_[id].backprop = [x, kind, p0, p1, laplace_abs](Tape& t, int self) {
      if (!t.nodes_[x].needs_grad) return;
      const TensorT<T>& g = t.nodes_[self].grad;
      const TensorT<T>& xv = t.nodes_[x].value;
      TensorT<T>& dst = t.grad_buffer(x);
      for (std::size_t i = 0; i < xv.data.size(); ++i)
        dst.data[i] += g.data[i] * detail::nlf_grad(kind, laplace_abs, p0, p1, xv.data[i]);
    };
    return id;
  }

  // Slot s transforms channels [s*width, (s+1)*width).
  int nlf_grouped(int x, const HyperSet& hs, std::uint32_t width) {
    TensorT<T> y = nlf_apply_grouped(hs, width, nodes_[x].value);
    int id = emit(std::move(y), {x});
    NlfKind kind = hs.kind();
    bool labs = hs.laplace_abs();
    std::vector<T> p0(hs.slots()), p1(hs.slots(), T(0));
    for (std::uint32_t s = 0; s < hs.slots(); ++s) {
      p0[s] = T(hs.param(0, s));
      if (nlf_arity(kind) > 1) p1[s] = T(hs.param(1, s));
    }
    nodes_[id].backprop = [x, kind, labs, p0, p1, width](Tape& t, int self) {
      if (!t.nodes_[x].needs_grad) return;
      const TensorT<T>& g = t.nodes_[self].grad;
      const TensorT<T>& xv = t.nodes_[x].value;
      TensorT<T>& dst = t.grad_buffer(x);
      std::size_t plane = std::size_t(xv.h) * xv.w;
      for (std::uint32_t in = 0; in < xv.n; ++in)
        for (std::uint32_t c = 0; c < xv.c; ++c) {
          std::uint32_t slot = c / width;
          std::size_t off = (std::size_t(in) * xv.c + c) * plane;
          for (std::size_t i = 0; i < plane; ++i)
            dst.data[off + i] += g.data[off + i] * detail::nlf_grad(kind, labs, p0[slot],
                                                                    p1[slot], xv.data[off + i]);
        }
    };
    return id;
  }

  // Seed-channel-major interleave of equally shaped branch tensors: output
  // channel q*t + i is branch i's channel q.
  int interleave_channels(const std::vector<int>& branches) {
    std::uint32_t t_cnt = std::uint32_t(branches.size());
    const TensorT<T>& b0 = nodes_[branches[0]].value;
    TensorT<T> y(b0.n, b0.c * t_cnt, b0.h, b0.w);
    std::size_t plane = std::size_t(b0.h) * b0.w;
    for (std::uint32_t i = 0; i < t_cnt; ++i) {
      const TensorT<T>& bi = nodes_[branches[i]].value;
      if (!bi.same_shape(b0)) throw ShapeMismatch("interleave: branch shapes differ");
      for (std::uint32_t in = 0; in < b0.n; ++in)
        for (std::uint32_t q = 0; q < b0.c; ++q)
          std::memcpy(y.data.data() + (std::size_t(in) * y.c + std::size_t(q) * t_cnt + i) * plane,
                      bi.data.data() + (std::size_t(in) * b0.c + q) * plane,
                      plane * sizeof(T));
    }
    int id = emit(std::move(y), branches);
    nodes_[id].backprop = [branches, t_cnt](Tape& t, int self) {
      const TensorT<T>& g = t.nodes_[self].grad;
      std::size_t plane = std::size_t(g.h) * g.w;
      for (std::uint32_t i = 0; i < t_cnt; ++i) {
        int p = branches[i];
        if (!t.nodes_[p].needs_grad) continue;
        TensorT<T>& dst = t.grad_buffer(p);
        for (std::uint32_t in = 0; in < dst.n; ++in)
          for (std::uint32_t q = 0; q < dst.c; ++q) {
            const T* src = g.data.data() + (std::size_t(in) * g.c + std::size_t(q) * t_cnt + i) * plane;
            T* d = dst.data.data() + (std::size_t(in) * dst.c + q) * plane;
            for (std::size_t k = 0; k < plane; ++k) d[k] += src[k];
          }
      }
    };
    return id;
  }

  // Concatenation along the leading axis (used for filter banks, whose
  // out-channel axis is dim 0).
  int concat_n(const std::vector<int>& parts) {
    std::uint32_t ntot = 0;
    const TensorT<T>& p0 = nodes_[parts[0]].value;
    for (int p : parts) {
      const TensorT<T>& v = nodes_[p].value;
      if (v.c != p0.c || v.h != p0.h || v.w != p0.w)
        throw ShapeMismatch("concat_n: trailing dims differ");
      ntot += v.n;
    }
    TensorT<T> y(ntot, p0.c, p0.h, p0.w);
    std::size_t off = 0;
    for (int p : parts) {
      const auto& d = nodes_[p].value.data;
      std::memcpy(y.data.data() + off, d.data(), d.size() * sizeof(T));
      off += d.size();
    }
    int id = emit(std::move(y), parts);
    nodes_[id].backprop = [parts](Tape& t, int self) {
      const TensorT<T>& g = t.nodes_[self].grad;
      std::size_t off = 0;
      for (int p : parts) {
        std::size_t len = t.nodes_[p].value.numel();
        if (t.nodes_[p].needs_grad) {
          TensorT<T>& dst = t.grad_buffer(p);
          for (std::size_t i = 0; i < len; ++i) dst.data[i] += g.data[off + i];
        }
        off += len;
      }
    };
    return id;
  }

  int slice_n(int x, std::uint32_t from, std::uint32_t to) {
    const TensorT<T>& xv = nodes_[x].value;
    if (from >= to || to > xv.n) throw ShapeMismatch("slice_n: bad range");
    TensorT<T> y(to - from, xv.c, xv.h, xv.w);
    std::size_t block = xv.numel() / xv.n;
    std::memcpy(y.data.data(), xv.data.data() + std::size_t(from) * block,
                y.numel() * sizeof(T));
    int id = emit(std::move(y), {x});
    nodes_[id].backprop = [x, from, block](Tape& t, int self) {
      if (!t.nodes_[x].needs_grad) return;
      const TensorT<T>& g = t.nodes_[self].grad;
      TensorT<T>& dst = t.grad_buffer(x);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        dst.data[std::size_t(from) * block + i] += g.data[i];
    };
    return id;
  }

  int relu(int x) {
    const TensorT<T>& xv = nodes_[x].value;
    TensorT<T> y(xv.n, xv.c, xv.h, xv.w);
    for (std::size_t i = 0; i < xv.data.size(); ++i)
      y.data[i] = xv.data[i] > T(0) ? xv.data[i] : T(0);
    int id = emit(std::move(y), {x});
    nodes_[id].backprop = [x](Tape& t, int self) {
      if (!t.nodes_[x].needs_grad) return;
      const TensorT<T>& g = t.nodes_[self].grad;
      const TensorT<T>& xv = t.nodes_[x].value;
      TensorT<T>& dst = t.grad_buffer(x);
      for (std::size_t i = 0; i < xv.data.size(); ++i)
        if (xv.data[i] > T(0)) dst.data[i] += g.data[i];
    };
    return id;
  }

  int add(int a, int b) {
    const TensorT<T>& av = nodes_[a].value;
    const TensorT<T>& bv = nodes_[b].value;
    if (!av.same_shape(bv)) throw ShapeMismatch("add: shapes differ");
    TensorT<T> y(av.n, av.c, av.h, av.w);
    for (std::size_t i = 0; i < av.data.size(); ++i) y.data[i] = av.data[i] + bv.data[i];
    int id = emit(std::move(y), {a, b});
    nodes_[id].backprop = [a, b](Tape& t, int self) {
      const TensorT<T>& g = t.nodes_[self].grad;
      for (int p : {a, b})
        if (t.nodes_[p].needs_grad) {
          TensorT<T>& dst = t.grad_buffer(p);
          for (std::size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i];
        }
    };
    return id;
  }

  int global_avg_pool(int x) {
    const TensorT<T>& xv = nodes_[x].value;
    TensorT<T> y(xv.n, xv.c, 1, 1);
    std::size_t plane = std::size_t(xv.h) * xv.w;
    for (std::uint32_t in = 0; in < xv.n; ++in)
      for (std::uint32_t c = 0; c < xv.c; ++c) {
        const T* p = xv.data.data() + (std::size_t(in) * xv.c + c) * plane;
        T s = T(0);
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
        y.at(in, c, 0, 0) = s / T(plane);
      }
    int id = emit(std::move(y), {x});
    nodes_[id].backprop = [x, plane](Tape& t, int self) {
      if (!t.nodes_[x].needs_grad) return;
      const TensorT<T>& g = t.nodes_[self].grad;
      TensorT<T>& dst = t.grad_buffer(x);
      for (std::uint32_t in = 0; in < dst.n; ++in)
        for (std::uint32_t c = 0; c < dst.c; ++c) {
          T gv = g.at(in, c, 0, 0) / T(plane);
          T* d = dst.data.data() + (std::size_t(in) * dst.c + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) d[i] += gv;
        }
    };
    return id;
  }

  // Batch norm, eval mode: affine with frozen statistics. gamma/beta shaped
  // (1,c,1,1).
  int bn_eval(int x, int gamma, int beta, const std::vector<float>& run_mean,
              const std::vector<float>& run_var, float eps) {
    const TensorT<T>& xv = nodes_[x].value;
    std::vector<T> inv_sigma(xv.c), mu(xv.c);
    for (std::uint32_t c = 0; c < xv.c; ++c) {
      inv_sigma[c] = T(1) / std::sqrt(T(run_var[c]) + T(eps));
      mu[c] = T(run_mean[c]);
    }
    return bn_affine(x, gamma, beta, std::move(mu), std::move(inv_sigma));
  }

  // Batch norm, train mode: batch statistics; updates the layer's running
  // stats in place.
  int bn_train(int x, int gamma, int beta, BatchNormParams& bn) {
    const TensorT<T>& xv = nodes_[x].value;
    std::size_t plane = std::size_t(xv.h) * xv.w;
    std::size_t cnt = std::size_t(xv.n) * plane;
    std::vector<T> mu(xv.c, T(0)), var(xv.c, T(0)), inv_sigma(xv.c);
    for (std::uint32_t c = 0; c < xv.c; ++c) {
      double s = 0;
      for (std::uint32_t in = 0; in < xv.n; ++in) {
        const T* p = xv.data.data() + (std::size_t(in) * xv.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += double(p[i]);
      }
      mu[c] = T(s / double(cnt));
      double v = 0;
      for (std::uint32_t in = 0; in < xv.n; ++in) {
        const T* p = xv.data.data() + (std::size_t(in) * xv.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          double d = double(p[i]) - double(mu[c]);
          v += d * d;
        }
      }
      var[c] = T(v / double(cnt));
      inv_sigma[c] = T(1) / std::sqrt(var[c] + T(bn.eps));
      double unbi = cnt > 1 ? v / double(cnt - 1) : v;
      bn.run_mean[c] = (1.0f - bn.momentum) * bn.run_mean[c] + bn.momentum * float(mu[c]);
      bn.run_var[c] = (1.0f - bn.momentum) * bn.run_var[c] + bn.momentum * float(unbi);
    }
    return bn_affine(x, gamma, beta, std::move(mu), std::move(inv_sigma),
                     /*batch_stats=*/true);
  }

  int softmax_cross_entropy(int logits, const std::vector<int>& labels) {
    const TensorT<T>& z = nodes_[logits].value;
    if (z.h != 1 || z.w != 1 || labels.size() != z.n)
      throw ShapeMismatch("softmax_cross_entropy: logits must be (n, classes, 1, 1)");
    TensorT<T> probs(z.n, z.c, 1, 1);
    double total = 0;
    for (std::uint32_t in = 0; in < z.n; ++in) {
      T zmax = z.at(in, 0, 0, 0);
      for (std::uint32_t c = 1; c < z.c; ++c) zmax = std::max(zmax, z.at(in, c, 0, 0));
      double denom = 0;
      for (std::uint32_t c = 0; c < z.c; ++c) denom += std::exp(double(z.at(in, c, 0, 0) - zmax));
      for (std::uint32_t c = 0; c < z.c; ++c)
        probs.at(in, c, 0, 0) = T(std::exp(double(z.at(in, c, 0, 0) - zmax)) / denom);
      total += std::log(denom) - double(z.at(in, labels[in], 0, 0) - zmax);
    }
    TensorT<T> loss(1, 1, 1, 1);
    loss.data[0] = T(total / double(z.n));
    int id = emit(std::move(loss), {logits});
    nodes_[id].backprop = [logits, labels, probs](Tape& t, int self) {
      if (!t.nodes_[logits].needs_grad) return;
      T gl = t.nodes_[self].grad.data[0];
      TensorT<T>& dst = t.grad_buffer(logits);
      T inv_n = T(1) / T(probs.n);
      for (std::uint32_t in = 0; in < probs.n; ++in)
        for (std::uint32_t c = 0; c < probs.c; ++c) {
          T d = probs.at(in, c, 0, 0) - (int(c) == labels[in] ? T(1) : T(0));
          dst.at(in, c, 0, 0) += gl * d * inv_n;
        }
    };
    return id;
  }

  int sum(int x) {
    const TensorT<T>& xv = nodes_[x].value;
    TensorT<T> y(1, 1, 1, 1);
    double s = 0;
    for (T v : xv.data) s += double(v);
    y.data[0] = T(s);
    int id = emit(std::move(y), {x});
    nodes_[id].backprop = [x](Tape& t, int self) {
      if (!t.nodes_[x].needs_grad) return;
      T g = t.nodes_[self].grad.data[0];
      TensorT<T>& dst = t.grad_buffer(x);
      for (auto& v : dst.data) v += g;
    };
    return id;
  }

  // sum(x * weights); a fixed random projection conditions gradient checks
  // better than a plain sum.
  int weighted_sum(int x, const TensorT<T>& weights) {
    const TensorT<T>& xv = nodes_[x].value;
    if (!xv.same_shape(weights)) throw ShapeMismatch("weighted_sum: shapes differ");
    TensorT<T> y(1, 1, 1, 1);
    double s = 0;
    for (std::size_t i = 0; i < xv.data.size(); ++i)
      s += double(xv.data[i]) * double(weights.data[i]);
    y.data[0] = T(s);
    int id = emit(std::move(y), {x});
    nodes_[id].backprop = [x, weights](Tape& t, int self) {
      if (!t.nodes_[x].needs_grad) return;
      T g = t.nodes_[self].grad.data[0];
      TensorT<T>& dst = t.grad_buffer(x);
      for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g * weights.data[i];
    };
    return id;
  }

  // ---- reverse pass ---------------------------------------------------------

  void backward(int loss) {
    if (nodes_[loss].value.numel() != 1)
      throw NonScalarLoss("backward: loss must be a scalar node");
    TensorT<T> one(1, 1, 1, 1);
    one.data[0] = T(1);
    accumulate(loss, one);
    for (int i = loss; i >= 0; --i)
      if (nodes_[i].has_grad && nodes_[i].backprop) nodes_[i].backprop(*this, i);
  }

  // Gradients of every registered trainable leaf; leaves untouched by the
  // loss report zeros.
  std::map<std::string, TensorT<T>> gradients() const {
    std::map<std::string, TensorT<T>> out;
    for (int id : leaves_) {
      const Node& n = nodes_[id];
      if (n.has_grad) {
        out[n.leaf_name] = n.grad;
      } else {
        out[n.leaf_name] = TensorT<T>(n.value.n, n.value.c, n.value.h, n.value.w);
      }
    }
    return out;
  }

  void accumulate(int id, const TensorT<T>& g) {
    TensorT<T>& dst = grad_buffer(id);
    for (std::size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i];
  }

  TensorT<T>& grad_buffer(int id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = TensorT<T>(n.value.n, n.value.c, n.value.h, n.value.w);
      n.has_grad = true;
    }
    return n.grad;
  }

 private:
  int emit(TensorT<T> value, const std::vector<int>& parents) {
    Node n;
    n.value = std::move(value);
    for (int p : parents)
      if (p >= 0 && nodes_[p].needs_grad) n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  int bn_affine(int x, int gamma, int beta, std::vector<T> mu, std::vector<T> inv_sigma,
                bool batch_stats = false) {
    const TensorT<T>& xv = nodes_[x].value;
    const TensorT<T>& gv = nodes_[gamma].value;
    if (gv.c != xv.c) throw ShapeMismatch("bn: gamma channels != input channels");
    TensorT<T> y(xv.n, xv.c, xv.h, xv.w);
    std::size_t plane = std::size_t(xv.h) * xv.w;
    for (std::uint32_t in = 0; in < xv.n; ++in)
      for (std::uint32_t c = 0; c < xv.c; ++c) {
        T gmc = gv.at(0, c, 0, 0);
        T btc = nodes_[beta].value.at(0, c, 0, 0);
        const T* p = xv.data.data() + (std::size_t(in) * xv.c + c) * plane;
        T* q = y.data.data() + (std::size_t(in) * xv.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i)
          q[i] = gmc * (p[i] - mu[c]) * inv_sigma[c] + btc;
      }
    int id = emit(std::move(y), {x, gamma, beta});
    nodes_[id].backprop = [x, gamma, beta, mu, inv_sigma, batch_stats](Tape& t, int self) {
      const TensorT<T>& g = t.nodes_[self].grad;
      const TensorT<T>& xv = t.nodes_[x].value;
      const TensorT<T>& gv = t.nodes_[gamma].value;
      std::size_t plane = std::size_t(xv.h) * xv.w;
      std::size_t cnt = std::size_t(xv.n) * plane;
      bool want_dx = t.nodes_[x].needs_grad;
      bool want_dg = t.nodes_[gamma].needs_grad;
      bool want_db = t.nodes_[beta].needs_grad;
      for (std::uint32_t c = 0; c < xv.c; ++c) {
        double sum_dy = 0, sum_dy_xhat = 0;
        for (std::uint32_t in = 0; in < xv.n; ++in) {
          const T* gp = g.data.data() + (std::size_t(in) * xv.c + c) * plane;
          const T* xp = xv.data.data() + (std::size_t(in) * xv.c + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            double xhat = double(xp[i] - mu[c]) * double(inv_sigma[c]);
            sum_dy += double(gp[i]);
            sum_dy_xhat += double(gp[i]) * xhat;
          }
        }
        if (want_dg) t.grad_buffer(gamma).at(0, c, 0, 0) += T(sum_dy_xhat);
        if (want_db) t.grad_buffer(beta).at(0, c, 0, 0) += T(sum_dy);
        if (want_dx) {
          TensorT<T>& dst = t.grad_buffer(x);
          T gmc = gv.at(0, c, 0, 0);
          if (batch_stats) {
            double mean_dy = sum_dy / double(cnt);
            double mean_dy_xhat = sum_dy_xhat / double(cnt);
            for (std::uint32_t in = 0; in < xv.n; ++in) {
              const T* gp = g.data.data() + (std::size_t(in) * xv.c + c) * plane;
              const T* xp = xv.data.data() + (std::size_t(in) * xv.c + c) * plane;
              T* dp = dst.data.data() + (std::size_t(in) * xv.c + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                double xhat = double(xp[i] - mu[c]) * double(inv_sigma[c]);
                dp[i] += T(double(gmc) * double(inv_sigma[c]) *
                           (double(gp[i]) - mean_dy - xhat * mean_dy_xhat));
              }
            }
          } else {
            T scale = gmc * inv_sigma[c];
            for (std::uint32_t in = 0; in < xv.n; ++in) {
              const T* gp = g.data.data() + (std::size_t(in) * xv.c + c) * plane;
              T* dp = dst.data.data() + (std::size_t(in) * xv.c + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) dp[i] += gp[i] * scale;
            }
          }
        }
      }
    };
    return id;
  }

  std::vector<Node> nodes_;
  std::vector<int> leaves_;
};

// ---------------------------------------------------------------------------
// Tracing a layer onto a tape. Parameters become trainable leaves; the
// hyperparameters are baked into the op (never leaves).

template <typename T>
struct LayerNodes {
  int output = -1;
  std::vector<std::pair<std::string, int>> params;  // leaf name -> node id
};

namespace detail {

template <typename T>
int leaf_from_floats(Tape<T>& tape, const float* data, std::size_t len, std::uint32_t n,
                     std::uint32_t c, std::uint32_t h, std::uint32_t w,
                     const std::string& name, LayerNodes<T>& out) {
  TensorT<T> v(n, c, h, w);
  for (std::size_t i = 0; i < len; ++i) v.data[i] = T(data[i]);
  int id = tape.leaf(std::move(v), name);
  out.params.emplace_back(name, id);
  return id;
}

}  // namespace detail

inline HyperSet slice_hyperset(const HyperSet& hs, std::uint32_t from, std::uint32_t count) {
  std::vector<std::vector<double>> dims(nlf_arity(hs.kind()));
  for (std::uint32_t d = 0; d < dims.size(); ++d) {
    dims[d].resize(count);
    for (std::uint32_t s = 0; s < count; ++s) dims[d][s] = hs.param(d, from + s);
  }
  return HyperSet(hs.kind(), count, hs.seed(), std::move(dims), hs.laplace_abs());
}

// training=true runs sinefm batch norm in batch-statistics mode and updates
// the layer's running statistics (requires exclusive access to the layer).
template <typename T>
LayerNodes<T> trace_layer(Tape<T>& tape, Layer& layer, int x, bool training,
                          const std::string& prefix = "") {
  const LayerSpec& s = layer.spec;
  LayerNodes<T> out;
  ConvGeometry sg = s.seed_geom();

  int w_seed = detail::leaf_from_floats(tape, layer.seed_w.data.data(), layer.seed_w.numel(),
                                        layer.seed_w.n, layer.seed_w.c, layer.seed_w.h,
                                        layer.seed_w.w, prefix + "seed_w", out);
  int b_seed = -1;
  if (layer.seed_b)
    b_seed = detail::leaf_from_floats(tape, layer.seed_b->data(), layer.seed_b->size(), 1,
                                      std::uint32_t(layer.seed_b->size()), 1, 1,
                                      prefix + "seed_b", out);

  switch (s.kind) {
    case LayerKind::Vanilla:
    case LayerKind::Depthwise: {
      out.output = tape.conv(x, w_seed, b_seed, sg);
      return out;
    }
    case LayerKind::Mono: {
      int w_full = w_seed;
      if (s.c_gen() > 0) {
        std::vector<int> banks{w_seed};
        for (std::uint32_t j = 0; j < s.gamma(); ++j)
          banks.push_back(tape.nlf_elementwise(w_seed, layer.hypers.kind(),
                                               layer.hypers.param(0, j), 0.0,
                                               layer.hypers.laplace_abs()));
        w_full = tape.concat_n(banks);
        if ((s.gamma() + 1) * s.c_seed() > s.geom.c_out)
          w_full = tape.slice_n(w_full, 0, s.geom.c_out);
      }
      ConvGeometry full = s.geom;
      full.groups = 1;
      out.output = tape.conv(x, w_full, b_seed, full);
      return out;
    }
    case LayerKind::Ghost: {
      int y_seed = tape.conv(x, w_seed, b_seed, sg);
      if (s.c_gen() == 0) {
        out.output = y_seed;
        return out;
      }
      int w_cheap = detail::leaf_from_floats(tape, layer.cheap_w.data.data(),
                                             layer.cheap_w.numel(), layer.cheap_w.n,
                                             layer.cheap_w.c, layer.cheap_w.h, layer.cheap_w.w,
                                             prefix + "cheap_w", out);
      int b_cheap = -1;
      if (layer.cheap_b)
        b_cheap = detail::leaf_from_floats(tape, layer.cheap_b->data(), layer.cheap_b->size(),
                                           1, std::uint32_t(layer.cheap_b->size()), 1, 1,
                                           prefix + "cheap_b", out);
      ConvGeometry cheap{s.c_seed(), s.c_gen(), s.d, 1, s.d / 2, s.c_seed(), s.geom.bias};
      int y_gen = tape.conv(y_seed, w_cheap, b_cheap, cheap);
      out.output = tape.concat_channels({y_seed, y_gen});
      return out;
    }
    case LayerKind::SineFM: {
      int y_seed = tape.conv(x, w_seed, b_seed, sg);
      if (s.c_gen() == 0) {
        out.output = y_seed;
        return out;
      }
      std::vector<int> branches;
      for (std::uint32_t i = 0; i < s.t; ++i) {
        int z = tape.nlf_elementwise(y_seed, layer.hypers.kind(), layer.hypers.param(0, i),
                                     nlf_arity(layer.hypers.kind()) > 1
                                         ? layer.hypers.param(1, i)
                                         : 0.0,
                                     layer.hypers.laplace_abs());
        BatchNormParams& bn = layer.bns[i];
        std::string tag = prefix + "bn" + std::to_string(i) + "_";
        int g = detail::leaf_from_floats(tape, bn.gamma.data(), bn.gamma.size(), 1,
                                         bn.channels(), 1, 1, tag + "gamma", out);
        int b = detail::leaf_from_floats(tape, bn.beta.data(), bn.beta.size(), 1,
                                         bn.channels(), 1, 1, tag + "beta", out);
        branches.push_back(training ? tape.bn_train(z, g, b, bn)
                                    : tape.bn_eval(z, g, b, bn.run_mean, bn.run_var, bn.eps));
      }
      int y_exp = tape.interleave_channels(branches);
      int w_pt = detail::leaf_from_floats(tape, layer.point_w.data.data(),
                                          layer.point_w.numel(), layer.point_w.n,
                                          layer.point_w.c, layer.point_w.h, layer.point_w.w,
                                          prefix + "point_w", out);
      int b_pt = -1;
      if (layer.point_b)
        b_pt = detail::leaf_from_floats(tape, layer.point_b->data(), layer.point_b->size(), 1,
                                        std::uint32_t(layer.point_b->size()), 1, 1,
                                        prefix + "point_b", out);
      ConvGeometry pt{s.c_seed() * s.t, s.c_gen(), 1, 1, 0, s.c_seed(), s.geom.bias};
      int y_gen = tape.conv(y_exp, w_pt, b_pt, pt);
      out.output = tape.concat_channels({y_seed, y_gen});
      return out;
    }
    case LayerKind::GroupNLStd:
    case LayerKind::GroupNLSparse: {
      int y_seed = tape.conv(x, w_seed, b_seed, sg);
      if (s.c_gen() == 0) {
        out.output = y_seed;
        return out;
      }
      std::uint32_t cs = s.c_seed();
      std::uint32_t width = cs / s.g;
      std::uint32_t gamma = s.gamma();
      std::vector<int> pieces{y_seed};
      for (std::uint32_t i = 0; i < s.g; ++i) {
        int part = tape.slice_channels(y_seed, i * width, (i + 1) * width);
        int rep = tape.repeat_channels(part, gamma);
        HyperSet sub = slice_hyperset(layer.hypers, i * gamma, gamma);
        pieces.push_back(tape.nlf_grouped(rep, sub, width));
      }
      int full = tape.concat_channels(pieces);
      out.output = (cs * (1 + gamma) > s.geom.c_out)
                       ? tape.slice_channels(full, 0, s.geom.c_out)
                       : full;
      return out;
    }
  }
  throw InvalidSpec("trace_layer: unknown layer kind");
}

// ---------------------------------------------------------------------------
// Finite-difference verification (f64): central differences on every
// trainable scalar against the tape gradient, max relative error.

inline double finite_diff_check(const Layer& layer_in, const Tensor& x, double eps) {
  Layer layer = layer_in;  // perturbed locally
  Tensor64 x64 = x.cast<double>();

  auto params = trainable_params(layer);
  auto forward_loss = [&](Tape<double>& tape, LayerNodes<double>& nodes) {
    int xin = tape.constant(x64);
    nodes = trace_layer(tape, layer, xin, /*training=*/false);
    const Tensor64& out = tape.value(nodes.output);
    Tensor64 proj = Tensor64::uniform(out.n, out.c, out.h, out.w, 0xfeedu, -1.0, 1.0);
    return tape.weighted_sum(nodes.output, proj);
  };

  // analytic gradients
  Tape<double> tape;
  LayerNodes<double> nodes;
  int loss = forward_loss(tape, nodes);
  tape.backward(loss);
  auto grads = tape.gradients();

  auto eval_loss = [&]() {
    Tape<double> t2;
    LayerNodes<double> n2;
    int l2 = forward_loss(t2, n2);
    return double(t2.value(l2).data[0]);
  };

  double max_rel = 0;
  for (auto& pv : params) {
    const Tensor64& g_ad = grads.at(pv.name);
    for (std::size_t i = 0; i < pv.size; ++i) {
      float keep = pv.data[i];
      // f32 storage cannot hold v +/- eps exactly; evaluate at the actually
      // representable points instead.
      float hi = float(double(keep) + eps);
      float lo = float(double(keep) - eps);
      pv.data[i] = hi;
      double lp = eval_loss();
      pv.data[i] = lo;
      double lm = eval_loss();
      pv.data[i] = keep;
      double g_fd = (lp - lm) / (double(hi) - double(lo));
      double err = std::abs(g_ad.data[i] - g_fd) / std::max(1.0, std::abs(g_fd));
      if (err > max_rel) max_rel = err;
    }
  }
  return max_rel;
}

}  // namespace groupnl
