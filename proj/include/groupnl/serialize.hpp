#pragma once

// JSON round-trips for specs, hyperparameter sets and reports.

#include <json.hpp>

#include <fstream>
#include <string>

#include "cost_model.hpp"
#include "dataset.hpp"
#include "layers.hpp"
#include "nlf.hpp"

namespace groupnl {

using nlohmann::json;

inline NlfKind nlf_kind_from_name(const std::string& s) {
  if (s == "sinusoidal") return NlfKind::Sinusoidal;
  if (s == "monomial") return NlfKind::Monomial;
  if (s == "gaussian") return NlfKind::Gaussian;
  if (s == "laplace") return NlfKind::Laplace;
  throw InvalidSpec("nlf.kind: unknown value '" + s + "'");
}

inline LayerKind layer_kind_from_name(const std::string& s) {
  if (s == "vanilla") return LayerKind::Vanilla;
  if (s == "depthwise") return LayerKind::Depthwise;
  if (s == "mono") return LayerKind::Mono;
  if (s == "ghost") return LayerKind::Ghost;
  if (s == "sinefm") return LayerKind::SineFM;
  if (s == "groupnl_std" || s == "groupnl") return LayerKind::GroupNLStd;
  if (s == "groupnl_sparse") return LayerKind::GroupNLSparse;
  throw InvalidSpec("kind: unknown value '" + s + "'");
}

inline json to_json(const NlfSpec& n) {
  json j;
  j["kind"] = nlf_name(n.kind);
  j["range0"] = {n.range0[0], n.range0[1]};
  if (n.kind == NlfKind::Sinusoidal) j["range1"] = {n.range1[0], n.range1[1]};
  j["laplace_abs"] = n.laplace_abs;
  return j;
}

inline NlfSpec nlf_spec_from_json(const json& j) {
  NlfSpec n = NlfSpec::of(nlf_kind_from_name(j.at("kind").get<std::string>()));
  if (j.contains("range0")) n.range0 = {j["range0"][0].get<double>(), j["range0"][1].get<double>()};
  if (j.contains("range1")) n.range1 = {j["range1"][0].get<double>(), j["range1"][1].get<double>()};
  if (j.contains("laplace_abs")) n.laplace_abs = j["laplace_abs"].get<bool>();
  return n;
}

inline json to_json(const LayerSpec& s) {
  json j;
  j["kind"] = layer_kind_name(s.kind);
  j["c_in"] = s.geom.c_in;
  j["c_out"] = s.geom.c_out;
  j["k"] = s.geom.k;
  j["stride"] = s.geom.stride;
  j["pad"] = s.geom.pad;
  j["groups"] = s.geom.groups;
  j["bias"] = s.geom.bias;
  j["r"] = s.r;
  j["g"] = s.g;
  j["t"] = s.t;
  j["d"] = s.d;
  j["nlf"] = to_json(s.nlf);
  j["seed"] = s.seed;
  return j;
}

// Throws InvalidSpec with the field path of the first problem.
inline LayerSpec layer_spec_from_json(const json& j) {
  auto require_uint = [&](const char* key, std::uint32_t dflt, bool required) -> std::uint32_t {
    if (!j.contains(key)) {
      if (required) throw InvalidSpec(std::string("missing required field: ") + key);
      return dflt;
    }
    if (!j[key].is_number_integer() || j[key].get<std::int64_t>() < 0)
      throw InvalidSpec(std::string(key) + ": expected a non-negative integer");
    return j[key].get<std::uint32_t>();
  };
  LayerSpec s;
  if (!j.contains("kind")) throw InvalidSpec("missing required field: kind");
  s.kind = layer_kind_from_name(j.at("kind").get<std::string>());
  s.geom.c_in = require_uint("c_in", 0, true);
  s.geom.c_out = require_uint("c_out", 0, true);
  s.geom.k = require_uint("k", 0, true);
  s.geom.stride = require_uint("stride", 1, false);
  s.geom.pad = require_uint("pad", 0, false);
  s.geom.groups = require_uint("groups", 1, false);
  s.geom.bias = j.value("bias", true);
  s.r = require_uint("r", 2, false);
  s.g = require_uint("g", 4, false);
  s.t = require_uint("t", 5, false);
  s.d = require_uint("d", 3, false);
  if (j.contains("nlf"))
    s.nlf = nlf_spec_from_json(j["nlf"]);
  else
    s.nlf = NlfSpec::of(s.kind == LayerKind::Mono ? NlfKind::Monomial : NlfKind::Sinusoidal);
  s.seed = j.value("seed", std::uint64_t(0));
  s.validate();
  return s;
}

inline json to_json(const HyperSet& h) {
  json j;
  j["kind"] = nlf_name(h.kind());
  j["slots"] = h.slots();
  j["seed"] = h.seed();
  j["params"] = h.flat();
  return j;
}

inline HyperSet hyperset_from_json(const json& j) {
  NlfKind kind = nlf_kind_from_name(j.at("kind").get<std::string>());
  std::uint32_t slots = j.at("slots").get<std::uint32_t>();
  std::vector<double> flat = j.at("params").get<std::vector<double>>();
  std::uint32_t arity = nlf_arity(kind);
  if (flat.size() != std::size_t(slots) * arity)
    throw InvalidSpec("params: expected slots*arity values");
  std::vector<std::vector<double>> dims(arity);
  for (std::uint32_t d = 0; d < arity; ++d)
    dims[d].assign(flat.begin() + std::size_t(d) * slots,
                   flat.begin() + std::size_t(d + 1) * slots);
  return HyperSet(kind, slots, j.value("seed", std::uint64_t(0)), std::move(dims),
                  j.value("laplace_abs", false));
}

inline json to_json(const CostReport& r) {
  json j;
  j["params"] = r.params;
  j["flops"] = r.flops;
  j["grads"] = r.grads;
  j["ops_modules"] = r.ops_modules;
  json terms = json::array();
  for (const auto& t : r.breakdown)
    terms.push_back({{"label", t.label}, {"params", t.params}, {"flops", t.flops}});
  j["breakdown"] = terms;
  return j;
}

inline json to_json(const CommReport& r) {
  json j;
  j["mode"] = r.mode == CommMode::DP ? "dp" : "ddp";
  j["n_gpus"] = r.n_gpus;
  j["grads"] = r.grads;
  j["per_gpu"] = r.per_gpu;
  j["total"] = r.total;
  return j;
}

// Dataset disk cache: <base>.nchw for the images, <base>.labels.json sidecar.
inline void save_dataset(const std::string& base, const SyntheticDataset& ds) {
  save_nchw(base + ".nchw", ds.images);
  json j;
  j["labels"] = ds.labels;
  j["classes"] = ds.classes;
  j["seed"] = ds.seed;
  j["train_count"] = ds.train_count;
  std::ofstream os(base + ".labels.json");
  if (!os) throw IoError("cannot write label sidecar for " + base);
  os << j.dump(2) << "\n";
}

inline SyntheticDataset load_dataset(const std::string& base) {
  SyntheticDataset ds;
  ds.images = load_nchw(base + ".nchw");
  std::ifstream is(base + ".labels.json");
  if (!is) throw IoError("missing label sidecar for " + base);
  json j;
  is >> j;
  ds.labels = j.at("labels").get<std::vector<int>>();
  ds.classes = j.value("classes", 10u);
  ds.seed = j.value("seed", std::uint64_t(0));
  ds.train_count = j.value("train_count", std::uint32_t(ds.labels.size()));
  if (ds.labels.size() != ds.images.n)
    throw InvalidSpec("label sidecar does not match image count for " + base);
  return ds;
}

}  // namespace groupnl
