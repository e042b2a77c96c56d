#pragma once

// Declarative architecture configs (resnet / vgg / plain stacks) loaded from
// JSON files, plus the substitution rules that produce the conv-family
// variants of each backbone. Architectures can be added by dropping a config
// file into the arch directory; no code changes needed.

#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "cost_model.hpp"
#include "layers.hpp"
#include "serialize.hpp"

namespace groupnl {

struct UnknownArch : std::runtime_error {
  explicit UnknownArch(const std::string& what) : std::runtime_error(what) {}
};

enum class Variant { Vanilla, Mono, Ghost, SineFM, GroupNL, GroupNLStd, GroupNLSparse };

inline Variant variant_from_name(const std::string& s) {
  if (s == "vanilla") return Variant::Vanilla;
  if (s == "mono") return Variant::Mono;
  if (s == "ghost") return Variant::Ghost;
  if (s == "sinefm") return Variant::SineFM;
  if (s == "groupnl") return Variant::GroupNL;
  if (s == "groupnl_std") return Variant::GroupNLStd;
  if (s == "groupnl_sparse") return Variant::GroupNLSparse;
  throw InvalidSpec("variant: unknown value '" + s + "'");
}

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Vanilla: return "vanilla";
    case Variant::Mono: return "mono";
    case Variant::Ghost: return "ghost";
    case Variant::SineFM: return "sinefm";
    case Variant::GroupNL: return "groupnl";
    case Variant::GroupNLStd: return "groupnl_std";
    case Variant::GroupNLSparse: return "groupnl_sparse";
  }
  return "?";
}

struct ZooOverrides {
  std::optional<std::uint32_t> r, g, t, d;
  std::optional<NlfKind> nlf;
  std::uint64_t seed = 0;       // hyperparameter sampling base seed
  std::uint64_t init_seed = 1;  // weight init base seed
  std::optional<std::uint32_t> classes;
  std::vector<std::uint32_t> mono_exp_factors;  // cycled per substituted layer when set
};

struct ModelOp {
  enum Kind { Input, Conv, Bn, Relu, Add, Gap, Pool } kind = Input;
  int in0 = -1, in1 = -1;
  int layer = -1;  // Conv
  int bn = -1;     // Bn
};

struct Model {
  std::string arch;
  std::string variant;
  std::vector<Layer> layers;
  std::vector<BatchNormParams> bns;
  std::vector<ModelOp> prog;
  std::uint32_t in_c = 3;
  std::uint32_t in_h = 32, in_w = 32;  // nominal input size (cost accounting)
  std::uint32_t classes = 10;
};

// ---------------------------------------------------------------------------
// Arch config files

struct StageCfg {
  std::uint32_t blocks = 1, width = 64, stride = 1;
};

struct ArchConfig {
  int schema_version = 1;
  std::string name;
  std::string family;  // "resnet" | "vgg" | "plain"
  std::string block = "basic";
  std::uint32_t stem_channels = 64;
  std::vector<StageCfg> stages;
  std::vector<int> vgg_layers;  // -1 encodes a pooling step
  std::vector<StageCfg> plain_convs;
  std::uint32_t classes = 10;
  std::uint32_t in_c = 3, in_h = 32, in_w = 32;
  bool sub_stem = true;
  bool sub_projections = false;
  bool sparse = false;  // groupnl auto-policy: sparse seed convolutions
  bool plain_batchnorm = true;
};

inline std::string default_arch_dir() {
  if (const char* env = std::getenv("GROUPNL_ARCH_DIR")) return env;
#ifdef GROUPNL_DEFAULT_ARCH_DIR
  return GROUPNL_DEFAULT_ARCH_DIR;
#else
  return "configs";
#endif
}

inline ArchConfig load_arch_config(const std::string& name, const std::string& arch_dir) {
  std::string path = arch_dir + "/" + name + ".json";
  std::ifstream is(path);
  if (!is) throw UnknownArch("unknown architecture '" + name + "' (no config at " + path + ")");
  json j;
  is >> j;
  ArchConfig c;
  c.schema_version = j.value("schema_version", 1);
  if (c.schema_version != 1)
    throw InvalidSpec("arch config " + path + ": unsupported schema_version");
  c.name = j.value("name", name);
  c.family = j.at("family").get<std::string>();
  c.block = j.value("block", std::string("basic"));
  c.stem_channels = j.value("stem_channels", 64u);
  c.classes = j.value("classes", 10u);
  if (j.contains("input")) {
    c.in_c = j["input"][0].get<std::uint32_t>();
    c.in_h = j["input"][1].get<std::uint32_t>();
    c.in_w = j["input"][2].get<std::uint32_t>();
  }
  if (j.contains("stages"))
    for (const auto& s : j["stages"])
      c.stages.push_back({s.at("blocks").get<std::uint32_t>(), s.at("width").get<std::uint32_t>(),
                          s.value("stride", 1u)});
  if (j.contains("layers"))
    for (const auto& v : j["layers"]) {
      if (v.is_string())
        c.vgg_layers.push_back(-1);
      else
        c.vgg_layers.push_back(int(v.get<std::uint32_t>()));
    }
  if (j.contains("convs"))
    for (const auto& s : j["convs"])
      c.plain_convs.push_back({1, s.at("out").get<std::uint32_t>(), s.value("stride", 1u)});
  c.plain_batchnorm = j.value("batchnorm", true);
  if (j.contains("substitution")) {
    const auto& s = j["substitution"];
    c.sub_stem = s.value("stem", true);
    c.sub_projections = s.value("projections", false);
    c.sparse = s.value("sparse", false);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Builder

namespace detail {

struct ModelBuilder {
  Model m;
  const ArchConfig& cfg;
  Variant variant;
  const ZooOverrides& ov;
  std::uint32_t conv_counter = 0;

  ModelBuilder(const ArchConfig& c, Variant v, const ZooOverrides& o) : cfg(c), variant(v), ov(o) {}

  int emit(ModelOp op) {
    m.prog.push_back(op);
    return int(m.prog.size()) - 1;
  }

  LayerKind substituted_kind() const {
    switch (variant) {
      case Variant::Mono: return LayerKind::Mono;
      case Variant::Ghost: return LayerKind::Ghost;
      case Variant::SineFM: return LayerKind::SineFM;
      case Variant::GroupNLStd: return LayerKind::GroupNLStd;
      case Variant::GroupNLSparse: return LayerKind::GroupNLSparse;
      case Variant::GroupNL:
        return cfg.sparse ? LayerKind::GroupNLSparse : LayerKind::GroupNLStd;
      default: return LayerKind::Vanilla;
    }
  }

  // role: "stem", "body", "projection", "inner1x1", "classifier"
  int conv(int in, std::uint32_t c_in, std::uint32_t c_out, std::uint32_t k,
           std::uint32_t stride, std::uint32_t pad, const std::string& role, bool with_bias) {
    LayerSpec s;
    s.geom = ConvGeometry{c_in, c_out, k, stride, pad, 1, with_bias};
    bool substitute = variant != Variant::Vanilla &&
                      (role == "body" || (role == "stem" && cfg.sub_stem) ||
                       (role == "projection" && cfg.sub_projections));
    if (substitute) {
      s.kind = substituted_kind();
      s.r = ov.r.value_or(2);
      s.g = ov.g.value_or(4);
      s.t = ov.t.value_or(5);
      s.d = ov.d.value_or(3);
      if (s.kind == LayerKind::Mono && !ov.mono_exp_factors.empty())
        s.r = ov.mono_exp_factors[conv_counter % ov.mono_exp_factors.size()];
      s.nlf = NlfSpec::of(ov.nlf.value_or(
          s.kind == LayerKind::Mono ? NlfKind::Monomial : NlfKind::Sinusoidal));
      // grouped splitting must divide the seed channels
      if ((s.kind == LayerKind::GroupNLStd || s.kind == LayerKind::GroupNLSparse))
        while (s.g > 1 && s.c_seed() % s.g != 0) s.g /= 2;
    } else {
      s.kind = LayerKind::Vanilla;
    }
    s.seed = groupnl::detail::mix_seed(ov.seed, 1000 + conv_counter);
    std::uint64_t init = groupnl::detail::mix_seed(ov.init_seed, 2000 + conv_counter);
    ++conv_counter;
    m.layers.push_back(build_layer(s, init));
    ModelOp op;
    op.kind = ModelOp::Conv;
    op.in0 = in;
    op.layer = int(m.layers.size()) - 1;
    return emit(op);
  }

  int bn(int in, std::uint32_t c) {
    m.bns.emplace_back(c);
    ModelOp op;
    op.kind = ModelOp::Bn;
    op.in0 = in;
    op.bn = int(m.bns.size()) - 1;
    return emit(op);
  }
  int relu(int in) { return emit({ModelOp::Relu, in, -1, -1, -1}); }
  int add(int a, int b) { return emit({ModelOp::Add, a, b, -1, -1}); }
  int gap(int in) { return emit({ModelOp::Gap, in, -1, -1, -1}); }
  int pool(int in) { return emit({ModelOp::Pool, in, -1, -1, -1}); }

  int conv_bn_relu(int in, std::uint32_t c_in, std::uint32_t c_out, std::uint32_t k,
                   std::uint32_t stride, std::uint32_t pad, const std::string& role) {
    return relu(bn(conv(in, c_in, c_out, k, stride, pad, role, false), c_out));
  }

  int basic_block(int in, std::uint32_t c_in, std::uint32_t width, std::uint32_t stride) {
    int y = relu(bn(conv(in, c_in, width, 3, stride, 1, "body", false), width));
    y = bn(conv(y, width, width, 3, 1, 1, "body", false), width);
    int sc = in;
    if (stride != 1 || c_in != width)
      sc = bn(conv(in, c_in, width, 1, stride, 0, "projection", false), width);
    return relu(add(y, sc));
  }

  int bottleneck_block(int in, std::uint32_t c_in, std::uint32_t width, std::uint32_t stride) {
    std::uint32_t out = width * 4;
    int y = relu(bn(conv(in, c_in, width, 1, 1, 0, "inner1x1", false), width));
    y = relu(bn(conv(y, width, width, 3, stride, 1, "body", false), width));
    y = bn(conv(y, width, out, 1, 1, 0, "inner1x1", false), out);
    int sc = in;
    if (stride != 1 || c_in != out)
      sc = bn(conv(in, c_in, out, 1, stride, 0, "projection", false), out);
    return relu(add(y, sc));
  }

  void build() {
    m.arch = cfg.name;
    m.in_c = cfg.in_c;
    m.in_h = cfg.in_h;
    m.in_w = cfg.in_w;
    m.classes = ov.classes.value_or(cfg.classes);
    int v = emit({ModelOp::Input, -1, -1, -1, -1});

    if (cfg.family == "resnet") {
      bool bottleneck = cfg.block == "bottleneck";
      std::uint32_t expansion = bottleneck ? 4 : 1;
      v = conv_bn_relu(v, cfg.in_c, cfg.stem_channels, 3, 1, 1, "stem");
      std::uint32_t c_in = cfg.stem_channels;
      for (const auto& st : cfg.stages) {
        for (std::uint32_t b = 0; b < st.blocks; ++b) {
          std::uint32_t stride = b == 0 ? st.stride : 1;
          v = bottleneck ? bottleneck_block(v, c_in, st.width, stride)
                         : basic_block(v, c_in, st.width, stride);
          c_in = st.width * expansion;
        }
      }
      v = gap(v);
      v = conv(v, c_in, m.classes, 1, 1, 0, "classifier", true);
    } else if (cfg.family == "vgg") {
      std::uint32_t c_in = cfg.in_c;
      for (int entry : cfg.vgg_layers) {
        if (entry < 0) {
          v = pool(v);
        } else {
          v = conv_bn_relu(v, c_in, std::uint32_t(entry), 3, 1, 1,
                           c_in == cfg.in_c ? "stem" : "body");
          c_in = std::uint32_t(entry);
        }
      }
      v = gap(v);
      v = conv(v, c_in, m.classes, 1, 1, 0, "classifier", true);
    } else if (cfg.family == "plain") {
      std::uint32_t c_in = cfg.in_c;
      bool first = true;
      for (const auto& cv : cfg.plain_convs) {
        const std::string role = first ? "stem" : "body";
        if (cfg.plain_batchnorm)
          v = conv_bn_relu(v, c_in, cv.width, 3, cv.stride, 1, role);
        else
          v = relu(conv(v, c_in, cv.width, 3, cv.stride, 1, role, true));
        c_in = cv.width;
        first = false;
      }
      v = gap(v);
      v = conv(v, c_in, m.classes, 1, 1, 0, "classifier", true);
    } else {
      throw InvalidSpec("arch config: unknown family '" + cfg.family + "'");
    }
  }
};

}  // namespace detail

inline Model build_model(const std::string& arch, Variant variant, const ZooOverrides& ov = {},
                         const std::string& arch_dir = default_arch_dir()) {
  ArchConfig cfg = load_arch_config(arch, arch_dir);
  detail::ModelBuilder b(cfg, variant, ov);
  b.build();
  b.m.variant = variant_name(variant);
  return b.m;
}

// ---------------------------------------------------------------------------
// Execution: one program walker shared by the plain evaluator and the tape.

namespace detail {

inline Tensor max_pool2x2(const Tensor& x) {
  std::uint32_t oh = x.h / 2, ow = x.w / 2;
  if (oh == 0 || ow == 0) throw ShapeMismatch("max_pool2x2: input too small");
  Tensor y(x.n, x.c, oh, ow);
  for (std::uint32_t in = 0; in < x.n; ++in)
    for (std::uint32_t c = 0; c < x.c; ++c)
      for (std::uint32_t oy = 0; oy < oh; ++oy)
        for (std::uint32_t ox = 0; ox < ow; ++ox) {
          float m = x.at(in, c, 2 * oy, 2 * ox);
          m = std::max(m, x.at(in, c, 2 * oy, 2 * ox + 1));
          m = std::max(m, x.at(in, c, 2 * oy + 1, 2 * ox));
          m = std::max(m, x.at(in, c, 2 * oy + 1, 2 * ox + 1));
          y.at(in, c, oy, ox) = m;
        }
  return y;
}

}  // namespace detail

// Eval-mode forward. Pure; thread-safe for concurrent calls on the same model.
inline Tensor forward_model(const Model& m, const Tensor& x) {
  if (x.c != m.in_c)
    throw ShapeMismatch("forward_model: input channels != " + std::to_string(m.in_c));
  std::vector<Tensor> vals(m.prog.size());
  for (std::size_t i = 0; i < m.prog.size(); ++i) {
    const ModelOp& op = m.prog[i];
    switch (op.kind) {
      case ModelOp::Input: vals[i] = x; break;
      case ModelOp::Conv: vals[i] = layer_forward(m.layers[op.layer], vals[op.in0]); break;
      case ModelOp::Bn: {
        vals[i] = vals[op.in0];
        detail::bn_eval_inplace(m.bns[op.bn], vals[i]);
        break;
      }
      case ModelOp::Relu: {
        vals[i] = vals[op.in0];
        for (auto& v : vals[i].data) v = v > 0.f ? v : 0.f;
        break;
      }
      case ModelOp::Add: {
        const Tensor& a = vals[op.in0];
        const Tensor& b = vals[op.in1];
        if (!a.same_shape(b)) throw ShapeMismatch("residual add: shapes differ");
        vals[i] = a;
        for (std::size_t k = 0; k < b.data.size(); ++k) vals[i].data[k] += b.data[k];
        break;
      }
      case ModelOp::Gap: {
        const Tensor& a = vals[op.in0];
        Tensor y(a.n, a.c, 1, 1);
        std::size_t plane = std::size_t(a.h) * a.w;
        for (std::uint32_t in = 0; in < a.n; ++in)
          for (std::uint32_t c = 0; c < a.c; ++c) {
            double s = 0;
            const float* p = a.data.data() + (std::size_t(in) * a.c + c) * plane;
            for (std::size_t k = 0; k < plane; ++k) s += p[k];
            y.at(in, c, 0, 0) = float(s / double(plane));
          }
        vals[i] = std::move(y);
        break;
      }
      case ModelOp::Pool: vals[i] = detail::max_pool2x2(vals[op.in0]); break;
    }
  }
  return vals.back();
}

// Tape trace of the whole model; leaf names are "L<i>.<param>" for layer i
// and "bn<i>.gamma/beta" for model-level batch norms.
template <typename T>
struct ModelTrace {
  int output = -1;
  std::vector<std::pair<std::string, int>> params;
};

template <typename T>
int tape_max_pool2x2(Tape<T>& tape, int x);

template <typename T>
ModelTrace<T> trace_model(Tape<T>& tape, Model& m, int input, bool training) {
  ModelTrace<T> out;
  std::vector<int> vals(m.prog.size(), -1);
  for (std::size_t i = 0; i < m.prog.size(); ++i) {
    const ModelOp& op = m.prog[i];
    switch (op.kind) {
      case ModelOp::Input: vals[i] = input; break;
      case ModelOp::Conv: {
        std::string prefix = "L" + std::to_string(op.layer) + ".";
        LayerNodes<T> ln = trace_layer(tape, m.layers[op.layer], vals[op.in0], training, prefix);
        out.params.insert(out.params.end(), ln.params.begin(), ln.params.end());
        vals[i] = ln.output;
        break;
      }
      case ModelOp::Bn: {
        BatchNormParams& bn = m.bns[op.bn];
        std::string tag = "bn" + std::to_string(op.bn) + ".";
        TensorT<T> gv(1, bn.channels(), 1, 1), bv(1, bn.channels(), 1, 1);
        for (std::uint32_t c = 0; c < bn.channels(); ++c) {
          gv.data[c] = T(bn.gamma[c]);
          bv.data[c] = T(bn.beta[c]);
        }
        int g = tape.leaf(std::move(gv), tag + "gamma");
        int b = tape.leaf(std::move(bv), tag + "beta");
        out.params.emplace_back(tag + "gamma", g);
        out.params.emplace_back(tag + "beta", b);
        vals[i] = training ? tape.bn_train(vals[op.in0], g, b, bn)
                           : tape.bn_eval(vals[op.in0], g, b, bn.run_mean, bn.run_var, bn.eps);
        break;
      }
      case ModelOp::Relu: vals[i] = tape.relu(vals[op.in0]); break;
      case ModelOp::Add: vals[i] = tape.add(vals[op.in0], vals[op.in1]); break;
      case ModelOp::Gap: vals[i] = tape.global_avg_pool(vals[op.in0]); break;
      case ModelOp::Pool: vals[i] = tape_max_pool2x2(tape, vals[op.in0]); break;
    }
  }
  out.output = vals.back();
  return out;
}

// Trainable views over the model's master (f32) storage, names matching the
// tape leaves from trace_model.
inline std::vector<ParamView> model_trainable_params(Model& m) {
  std::vector<ParamView> out;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    std::string prefix = "L" + std::to_string(i) + ".";
    for (auto& pv : trainable_params(m.layers[i]))
      out.push_back({prefix + pv.name, pv.data, pv.size});
  }
  for (std::size_t i = 0; i < m.bns.size(); ++i) {
    std::string tag = "bn" + std::to_string(i) + ".";
    out.push_back({tag + "gamma", m.bns[i].gamma.data(), m.bns[i].gamma.size()});
    out.push_back({tag + "beta", m.bns[i].beta.data(), m.bns[i].beta.size()});
  }
  return out;
}

inline std::size_t count_trainable(const Model& m) {
  std::size_t n = 0;
  for (const auto& l : m.layers) n += count_trainable(l);
  for (const auto& bn : m.bns) n += bn.gamma.size() + bn.beta.size();
  return n;
}

// ---------------------------------------------------------------------------
// Whole-model analytic cost: conv layers via layer_cost, BN affine parameters
// and 2 ops per normalized element; relu/add/pool are free by convention.

inline CostReport model_cost(const Model& m, std::uint32_t in_h = 0, std::uint32_t in_w = 0) {
  if (in_h == 0) in_h = m.in_h;
  if (in_w == 0) in_w = m.in_w;
  struct Dim {
    std::uint32_t c, h, w;
  };
  std::vector<Dim> dims(m.prog.size());
  std::map<std::string, CostTerm> agg;
  auto add = [&](const std::string& label, std::uint64_t p, std::uint64_t f) {
    auto& t = agg[label];
    t.label = label;
    t.params += p;
    t.flops += f;
  };

  for (std::size_t i = 0; i < m.prog.size(); ++i) {
    const ModelOp& op = m.prog[i];
    switch (op.kind) {
      case ModelOp::Input: dims[i] = {m.in_c, in_h, in_w}; break;
      case ModelOp::Conv: {
        const LayerSpec& s = m.layers[op.layer].spec;
        Dim in = dims[op.in0];
        CostReport lc = layer_cost(s, in.h, in.w);
        for (const auto& t : lc.breakdown) add(t.label, t.params, t.flops);
        dims[i] = {s.geom.c_out, s.geom.out_dim(in.h), s.geom.out_dim(in.w)};
        break;
      }
      case ModelOp::Bn: {
        Dim in = dims[op.in0];
        std::uint64_t elems = std::uint64_t(in.c) * in.h * in.w;
        add("bn", 2ull * in.c, 2ull * elems);
        dims[i] = in;
        break;
      }
      case ModelOp::Relu:
      case ModelOp::Add: dims[i] = dims[op.in0]; break;
      case ModelOp::Gap: dims[i] = {dims[op.in0].c, 1, 1}; break;
      case ModelOp::Pool: dims[i] = {dims[op.in0].c, dims[op.in0].h / 2, dims[op.in0].w / 2}; break;
    }
  }

  CostReport rep;
  for (auto& [label, term] : agg) rep.add(label, term.params, term.flops);
  rep.ops_modules = 0;
  for (const auto& l : m.layers) rep.ops_modules += layer_cost(l.spec, 8, 8).ops_modules;
  rep.ops_modules += m.bns.size();
  return rep;
}

// ---------------------------------------------------------------------------

template <typename T>
int tape_max_pool2x2(Tape<T>& tape, int x) {
  const TensorT<T>& xv = tape.value(x);
  std::uint32_t oh = xv.h / 2, ow = xv.w / 2;
  if (oh == 0 || ow == 0) throw ShapeMismatch("max_pool2x2: input too small");
  TensorT<T> y(xv.n, xv.c, oh, ow);
  std::vector<std::size_t> argmax(y.numel());
  for (std::uint32_t in = 0; in < xv.n; ++in)
    for (std::uint32_t c = 0; c < xv.c; ++c)
      for (std::uint32_t oy = 0; oy < oh; ++oy)
        for (std::uint32_t ox = 0; ox < ow; ++ox) {
          std::size_t best = xv.index(in, c, 2 * oy, 2 * ox);
          T m = xv.data[best];
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              std::size_t idx = xv.index(in, c, 2 * oy + dy, 2 * ox + dx);
              if (xv.data[idx] > m) {
                m = xv.data[idx];
                best = idx;
              }
            }
          y.at(in, c, oy, ox) = m;
          argmax[y.index(in, c, oy, ox)] = best;
        }
  return tape.custom(std::move(y), {x}, [x, argmax](Tape<T>& t, int self) {
    if (!t.node_needs_grad(x)) return;
    const TensorT<T>& g = t.grad(self);
    TensorT<T>& dst = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.data.size(); ++i) dst.data[argmax[i]] += g.data[i];
  });
}

}  // namespace groupnl
