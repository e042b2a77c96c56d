// groupnl: cost analysis, verification, micro-benchmarking and toy training
// for the grouped-nonlinear convolution family.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "groupnl/bench.hpp"
#include "groupnl/cost_model.hpp"
#include "groupnl/dataset.hpp"
#include "groupnl/model_zoo.hpp"
#include "groupnl/serialize.hpp"
#include "groupnl/train.hpp"
#include "groupnl/verify.hpp"

namespace {

using namespace groupnl;
using nlohmann::json;

std::uint64_t env_seed(std::uint64_t dflt) {
  if (const char* e = std::getenv("GROUPNL_SEED")) return std::strtoull(e, nullptr, 10);
  return dflt;
}

std::pair<std::uint32_t, std::uint32_t> parse_hw(const std::string& s) {
  auto pos = s.find('x');
  if (pos == std::string::npos) throw InvalidSpec("expected HxW, e.g. 32x32: '" + s + "'");
  return {std::uint32_t(std::stoul(s.substr(0, pos))),
          std::uint32_t(std::stoul(s.substr(pos + 1)))};
}

std::pair<std::uint32_t, std::uint32_t> parse_range(const std::string& s) {
  auto pos = s.find("..");
  if (pos == std::string::npos) {
    std::uint32_t v = std::uint32_t(std::stoul(s));
    return {v, v};
  }
  return {std::uint32_t(std::stoul(s.substr(0, pos))),
          std::uint32_t(std::stoul(s.substr(pos + 2)))};
}

std::string fmt_count(double v) {
  std::ostringstream os;
  if (v >= 1e6)
    os << std::fixed << std::setprecision(2) << v / 1e6 << "M";
  else if (v >= 1e3)
    os << std::fixed << std::setprecision(2) << v / 1e3 << "K";
  else
    os << std::fixed << std::setprecision(0) << v;
  return os.str();
}

void render_cost(const CostReport& r, const std::string& format, std::ostream& os) {
  if (format == "json") {
    os << to_json(r).dump(2) << "\n";
  } else if (format == "csv") {
    os << "term,params,flops\n";
    for (const auto& t : r.breakdown) os << t.label << "," << t.params << "," << t.flops << "\n";
    os << "total," << r.params << "," << r.flops << "\n";
  } else {
    os << std::left << std::setw(16) << "term" << std::right << std::setw(14) << "params"
       << std::setw(16) << "flops" << "\n";
    for (const auto& t : r.breakdown)
      os << std::left << std::setw(16) << t.label << std::right << std::setw(14)
         << fmt_count(double(t.params)) << std::setw(16) << fmt_count(double(t.flops)) << "\n";
    os << std::left << std::setw(16) << "total" << std::right << std::setw(14)
       << fmt_count(double(r.params)) << std::setw(16) << fmt_count(double(r.flops)) << "\n";
    os << "grads: " << fmt_count(double(r.grads)) << "   nn modules: " << r.ops_modules << "\n";
  }
}

void render_bench(const BenchReport& r, const std::string& format, std::ostream& os) {
  if (format == "json") {
    json j;
    j["target"] = r.target;
    j["mean_ms"] = r.mean_ms;
    j["median_ms"] = r.median_ms;
    j["p95_ms"] = r.p95_ms;
    j["fps"] = r.fps;
    j["iters"] = r.config.iters;
    j["warmup"] = r.config.warmup;
    j["threads"] = r.config.threads;
    j["input"] = {r.config.in_n, r.config.in_c, r.config.in_h, r.config.in_w};
    j["host"] = r.host;
    os << j.dump(2) << "\n";
  } else {
    os << std::left << std::setw(22) << r.target << std::right << std::fixed
       << std::setprecision(2) << std::setw(12) << r.mean_ms << std::setw(12) << r.median_ms
       << std::setw(12) << r.p95_ms << std::setw(10) << r.fps << "\n";
  }
}

void bench_table_header(std::ostream& os) {
  os << std::left << std::setw(22) << "module" << std::right << std::setw(12) << "mean(ms)"
     << std::setw(12) << "median(ms)" << std::setw(12) << "p95(ms)" << std::setw(10) << "fps"
     << "\n";
}

Variant variant_or_throw(const std::string& name) { return variant_from_name(name); }

// bench targets are layer kinds; "groupnl" aliases the standard form
LayerKind bench_kind(const std::string& name) { return layer_kind_from_name(name); }

struct CommonModelArgs {
  std::string arch = "resnet18";
  std::string variant = "groupnl";
  std::string arch_dir = default_arch_dir();
  std::uint32_t r = 2, g = 4, t = 5, d = 3;
  std::string nlf = "";
  std::uint64_t seed = env_seed(0);
  std::uint64_t init_seed = 1;

  ZooOverrides overrides() const {
    ZooOverrides ov;
    ov.r = r;
    ov.g = g;
    ov.t = t;
    ov.d = d;
    if (!nlf.empty()) ov.nlf = nlf_kind_from_name(nlf);
    ov.seed = seed;
    ov.init_seed = init_seed;
    return ov;
  }
};

void add_model_flags(CLI::App* cmd, CommonModelArgs& a) {
  cmd->add_option("--arch", a.arch, "architecture config name");
  cmd->add_option("--variant", a.variant,
                  "conv family: vanilla|mono|ghost|sinefm|groupnl|groupnl_std|groupnl_sparse");
  cmd->add_option("--arch-dir", a.arch_dir, "directory with architecture configs");
  cmd->add_option("--r", a.r, "reduction ratio");
  cmd->add_option("--g", a.g, "split groups");
  cmd->add_option("--t", a.t, "sinefm expansion count");
  cmd->add_option("--d", a.d, "ghost cheap-kernel size");
  cmd->add_option("--nlf", a.nlf, "nlf kind: sinusoidal|monomial|gaussian|laplace");
  cmd->add_option("--seed", a.seed, "hyperparameter sampling seed");
  cmd->add_option("--init-seed", a.init_seed, "weight init seed");
}

int run(int argc, char** argv) {
  CLI::App app{"grouped-nonlinear convolution toolkit"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "worker thread cap")->capture_default_str();

  // ---- cost ----------------------------------------------------------------
  auto* cost = app.add_subcommand("cost", "analytic parameter/FLOP/communication accounting");
  cost->require_subcommand(1);

  auto* cost_layer = cost->add_subcommand("layer", "cost of a single layer spec");
  std::string spec_path, hw = "32x32", format = "table", out_path;
  cost_layer->add_option("--spec", spec_path, "layer spec JSON file")->required();
  cost_layer->add_option("--hw", hw, "input spatial size HxW");
  cost_layer->add_option("--format", format, "json|table|csv");
  cost_layer->add_option("--out", out_path, "write output to file");

  auto* cost_model_cmd = cost->add_subcommand("model", "cost of a whole model");
  CommonModelArgs cm;
  std::string cm_input = "";
  std::string cm_format = "table", cm_out;
  add_model_flags(cost_model_cmd, cm);
  cost_model_cmd->add_option("--input", cm_input, "input spatial size HxW (default: config)");
  cost_model_cmd->add_option("--format", cm_format, "json|table|csv");
  cost_model_cmd->add_option("--out", cm_out, "write output to file");

  auto* cost_comm = cost->add_subcommand("comm", "gradient communication volume");
  double grads = 0;
  std::uint32_t gpus = 8;
  std::string mode = "ddp", comm_format = "table", comm_out;
  cost_comm->add_option("--grads", grads, "gradient count G")->required();
  cost_comm->add_option("--gpus", gpus, "number of devices");
  cost_comm->add_option("--mode", mode, "dp|ddp");
  cost_comm->add_option("--format", comm_format, "json|table|csv");
  cost_comm->add_option("--out", comm_out, "write output to file");

  // ---- verify --------------------------------------------------------------
  auto* verify = app.add_subcommand("verify", "run the verification suites");
  std::string suite = "all";
  std::uint32_t instances = 25;
  double eps = 1e-5;
  std::uint64_t vseed = env_seed(12345);
  verify->add_option("--suite", suite, "all|oracle|decomposition|freeze|gradcheck|counts");
  verify->add_option("--instances", instances, "randomized instances per suite/kind");
  verify->add_option("--eps", eps, "finite-difference step");
  verify->add_option("--seed", vseed, "suite RNG seed");

  // ---- bench ---------------------------------------------------------------
  auto* bench = app.add_subcommand("bench", "wall-clock micro-benchmarks");
  bench->require_subcommand(1);

  auto* bench_module = bench->add_subcommand("module", "benchmark one layer");
  std::string preset = "module512", bvariant = "groupnl", bspec_path, bformat = "table";
  std::uint32_t br = 2, biters = 100, bwarmup = 10;
  std::uint64_t bseed = env_seed(0);
  bool fresh = false;
  bench_module->add_option("--preset", preset, "module512 (alias: table13)");
  bench_module->add_option("--variant", bvariant, "layer family to benchmark");
  bench_module->add_option("--spec", bspec_path, "explicit layer spec JSON (overrides preset)");
  bench_module->add_option("--r", br, "reduction ratio");
  bench_module->add_option("--iters", biters, "measured iterations");
  bench_module->add_option("--warmup", bwarmup, "warmup iterations");
  bench_module->add_option("--seed", bseed, "input stream seed");
  bench_module->add_flag("--fresh-input", fresh, "cycle distinct inputs instead of reusing one");
  bench_module->add_option("--format", bformat, "json|table");

  auto* bench_compare = bench->add_subcommand("compare", "benchmark several layer families");
  std::string cvariants = "vanilla,ghost,sinefm,groupnl";
  std::uint32_t cr = 2, citers = 100, cwarmup = 10;
  std::uint64_t cseed = env_seed(0);
  std::string cformat = "table";
  bench_compare->add_option("--preset", preset, "module512 (alias: table13)");
  bench_compare->add_option("--variants", cvariants, "comma-separated family list");
  bench_compare->add_option("--r", cr, "reduction ratio");
  bench_compare->add_option("--iters", citers, "measured iterations");
  bench_compare->add_option("--warmup", cwarmup, "warmup iterations");
  bench_compare->add_option("--seed", cseed, "input stream seed");
  bench_compare->add_option("--format", cformat, "json|table");

  auto* bench_model = bench->add_subcommand("model", "benchmark a whole model");
  CommonModelArgs bm;
  std::string bm_input = "", bm_format = "table";
  std::uint32_t bm_iters = 20, bm_warmup = 3;
  add_model_flags(bench_model, bm);
  bench_model->add_option("--input", bm_input, "input spatial size HxW");
  bench_model->add_option("--iters", bm_iters, "measured iterations");
  bench_model->add_option("--warmup", bm_warmup, "warmup iterations");
  bench_model->add_option("--format", bm_format, "json|table");

  // ---- train ---------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "toy training and robustness runs");
  train_cmd->require_subcommand(1);

  auto* train_toy = train_cmd->add_subcommand("toy", "train on the synthetic set");
  CommonModelArgs tm;
  tm.arch = "tinycnn";
  double lr = 0.05;
  std::uint32_t epochs = 20, batch = 32, samples = 500, classes = 10, data_hw = 16;
  std::uint64_t data_seed = env_seed(0);
  std::string log_path, cifar_path, cache_base;
  add_model_flags(train_toy, tm);
  train_toy->add_option("--lr", lr, "peak learning rate (cosine-annealed)");
  train_toy->add_option("--epochs", epochs, "training epochs");
  train_toy->add_option("--batch", batch, "batch size");
  train_toy->add_option("--samples", samples, "synthetic dataset size");
  train_toy->add_option("--classes", classes, "class count");
  train_toy->add_option("--hw", data_hw, "image side length");
  train_toy->add_option("--data-seed", data_seed, "dataset generator seed");
  train_toy->add_option("--cifar", cifar_path,
                        "train on an external CIFAR-format binary instead of synthetic data");
  train_toy->add_option("--cache", cache_base,
                        "write the dataset cache (<base>.nchw + <base>.labels.json)");
  train_toy->add_option("--out", log_path, "write the JSON-lines train log here");

  auto* train_robust = train_cmd->add_subcommand("robust", "accuracy vs corruption severity");
  CommonModelArgs rm;
  rm.arch = "tinycnn";
  std::string severity = "1..5";
  std::string kinds = "gaussian_noise,shot_noise,gaussian_blur,brightness,contrast";
  double rlr = 0.05;
  std::uint32_t repochs = 20, rbatch = 32, rsamples = 500, rclasses = 10, rhw = 16;
  std::uint64_t rdata_seed = env_seed(0);
  std::string rformat = "table";
  add_model_flags(train_robust, rm);
  train_robust->add_option("--severity", severity, "severity or range, e.g. 3 or 1..5");
  train_robust->add_option("--kinds", kinds, "comma-separated corruption kinds");
  train_robust->add_option("--lr", rlr, "peak learning rate");
  train_robust->add_option("--epochs", repochs, "training epochs");
  train_robust->add_option("--batch", rbatch, "batch size");
  train_robust->add_option("--samples", rsamples, "synthetic dataset size");
  train_robust->add_option("--classes", rclasses, "class count");
  train_robust->add_option("--hw", rhw, "image side length");
  train_robust->add_option("--data-seed", rdata_seed, "dataset generator seed");
  train_robust->add_option("--format", rformat, "json|table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;  // any flag/argument problem is a validation error
  }
  set_num_threads(threads);

  auto sink = [](const std::string& path) -> std::unique_ptr<std::ostream> {
    if (path.empty()) return nullptr;
    auto f = std::make_unique<std::ofstream>(path);
    if (!*f) throw IoError("cannot open output file: " + path);
    return f;
  };

  if (cost_layer->parsed()) {
    std::ifstream is(spec_path);
    if (!is) throw InvalidSpec("spec: cannot open file '" + spec_path + "'");
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw InvalidSpec("spec: invalid JSON in '" + spec_path + "': " + e.what());
    }
    LayerSpec spec = layer_spec_from_json(j);
    auto [h, w] = parse_hw(hw);
    CostReport rep = layer_cost(spec, h, w);
    auto f = sink(out_path);
    render_cost(rep, format, f ? *f : std::cout);
    return 0;
  }

  if (cost_model_cmd->parsed()) {
    Model m = build_model(cm.arch, variant_or_throw(cm.variant), cm.overrides(), cm.arch_dir);
    std::uint32_t h = 0, w = 0;
    if (!cm_input.empty()) std::tie(h, w) = parse_hw(cm_input);
    CostReport rep = model_cost(m, h, w);
    auto f = sink(cm_out);
    render_cost(rep, cm_format, f ? *f : std::cout);
    return 0;
  }

  if (cost_comm->parsed()) {
    CommMode cmode;
    if (mode == "dp")
      cmode = CommMode::DP;
    else if (mode == "ddp")
      cmode = CommMode::DDP;
    else
      throw InvalidSpec("mode: expected dp or ddp, got '" + mode + "'");
    CommReport rep = comm_cost(grads, gpus, cmode);
    auto f = sink(comm_out);
    std::ostream& os = f ? *f : std::cout;
    if (comm_format == "json") {
      os << to_json(rep).dump(2) << "\n";
    } else if (comm_format == "csv") {
      os << "mode,gpus,grads,per_gpu,total\n"
         << mode << "," << gpus << "," << grads << "," << rep.per_gpu << "," << rep.total << "\n";
    } else {
      os << "mode: " << mode << "  gpus: " << gpus << "  G: " << fmt_count(grads) << "\n"
         << "per-gpu volume: " << fmt_count(rep.per_gpu) << "  (" << rep.per_gpu << ")\n"
         << "total volume:   " << fmt_count(rep.total) << "  (" << rep.total << ")\n";
    }
    return 0;
  }

  if (verify->parsed()) {
    std::vector<SuiteResult> results;
    if (suite == "all" || suite == "oracle")
      results.push_back(verify_oracle_equivalence(instances, vseed));
    if (suite == "all" || suite == "decomposition")
      results.push_back(verify_decomposition(instances, vseed + 1));
    if (suite == "all" || suite == "freeze") results.push_back(verify_freeze(instances, vseed + 2));
    if (suite == "all" || suite == "gradcheck")
      results.push_back(verify_gradcheck(vseed + 3, eps));
    if (suite == "all" || suite == "counts") results.push_back(verify_counts(instances, vseed + 4));
    if (results.empty()) throw InvalidSpec("unknown suite '" + suite + "'");
    bool all_ok = true;
    for (const auto& r : results) {
      std::cout << std::left << std::setw(16) << r.name << (r.ok() ? "PASS" : "FAIL") << "  ("
                << r.passed << "/" << (r.passed + r.failed) << ")"
                << (r.detail.empty() ? "" : "  " + r.detail) << "\n";
      all_ok = all_ok && r.ok();
    }
    return all_ok ? 0 : 1;
  }

  auto preset_cfg = [&](std::uint64_t seed_val, std::uint32_t iters_val,
                        std::uint32_t warmup_val) {
    if (preset != "module512" && preset != "table13")
      throw InvalidSpec("unknown preset '" + preset + "'");
    BenchConfig cfg;
    cfg.in_n = 1;
    cfg.in_c = 512;
    cfg.in_h = 32;
    cfg.in_w = 32;
    cfg.iters = iters_val;
    cfg.warmup = warmup_val;
    cfg.threads = threads;
    cfg.seed = seed_val;
    return cfg;
  };

  if (bench_module->parsed()) {
    BenchConfig cfg = preset_cfg(bseed, biters, bwarmup);
    cfg.fresh_input = fresh;
    LayerSpec spec;
    if (!bspec_path.empty()) {
      std::ifstream is(bspec_path);
      if (!is) throw InvalidSpec("spec: cannot open file '" + bspec_path + "'");
      json j;
      is >> j;
      spec = layer_spec_from_json(j);
      cfg.in_c = spec.geom.c_in;
    } else {
      spec = profiling_preset_spec(bench_kind(bvariant), br);
    }
    BenchReport rep = profile_layer(spec, cfg);
    if (bformat != "json") bench_table_header(std::cout);
    render_bench(rep, bformat, std::cout);
    return 0;
  }

  if (bench_compare->parsed()) {
    BenchConfig cfg = preset_cfg(cseed, citers, cwarmup);
    std::vector<std::string> names;
    std::stringstream ss(cvariants);
    std::string item;
    while (std::getline(ss, item, ',')) names.push_back(item);
    json jall = json::array();
    if (cformat != "json") bench_table_header(std::cout);
    for (const auto& nm : names) {
      LayerSpec spec = profiling_preset_spec(bench_kind(nm), cr);
      BenchReport rep = profile_layer(spec, cfg);
      rep.target = nm + " r=" + std::to_string(cr);
      if (cformat == "json") {
        json j;
        j["target"] = rep.target;
        j["mean_ms"] = rep.mean_ms;
        j["median_ms"] = rep.median_ms;
        j["p95_ms"] = rep.p95_ms;
        j["fps"] = rep.fps;
        jall.push_back(j);
      } else {
        render_bench(rep, cformat, std::cout);
      }
    }
    if (cformat == "json") std::cout << jall.dump(2) << "\n";
    return 0;
  }

  if (bench_model->parsed()) {
    Model m = build_model(bm.arch, variant_or_throw(bm.variant), bm.overrides(), bm.arch_dir);
    BenchConfig cfg;
    cfg.in_n = 1;
    cfg.in_c = m.in_c;
    cfg.in_h = m.in_h;
    cfg.in_w = m.in_w;
    if (!bm_input.empty()) std::tie(cfg.in_h, cfg.in_w) = parse_hw(bm_input);
    cfg.iters = bm_iters;
    cfg.warmup = bm_warmup;
    cfg.threads = threads;
    BenchReport rep = profile_model(m, cfg);
    if (bm_format != "json") bench_table_header(std::cout);
    render_bench(rep, bm_format, std::cout);
    return 0;
  }

  if (train_toy->parsed()) {
    SyntheticDataset ds = cifar_path.empty()
                              ? generate_dataset(data_seed, samples, classes, data_hw)
                              : load_cifar_binary(cifar_path, samples, classes);
    if (!cache_base.empty()) save_dataset(cache_base, ds);
    ZooOverrides ov = tm.overrides();
    ov.classes = ds.classes;
    Model m = build_model(tm.arch, variant_or_throw(tm.variant), ov, tm.arch_dir);
    TrainHyper hyper;
    hyper.lr = lr;
    hyper.epochs = epochs;
    hyper.batch = batch;
    hyper.seed = tm.seed;
    TrainLog log = train(m, ds, hyper);
    auto f = sink(log_path);
    std::ostream& os = f ? *f : std::cout;
    for (const auto& e : log.epochs) {
      json j;
      j["epoch"] = e.epoch;
      j["lr"] = e.lr;
      j["train_loss"] = e.train_loss;
      j["train_acc"] = e.train_acc;
      j["test_acc"] = e.test_acc;
      os << j.dump() << "\n";
    }
    return 0;
  }

  if (train_robust->parsed()) {
    auto [sev_lo, sev_hi] = parse_range(severity);
    if (sev_hi > 5) throw InvalidSpec("severity must be within 1..5");
    std::vector<CorruptionKind> ckinds;
    std::stringstream ss(kinds);
    std::string item;
    while (std::getline(ss, item, ',')) ckinds.push_back(corruption_from_name(item));

    SyntheticDataset ds = generate_dataset(rdata_seed, rsamples, rclasses, rhw);
    ZooOverrides ov = rm.overrides();
    ov.classes = rclasses;
    Model m = build_model(rm.arch, variant_or_throw(rm.variant), ov, rm.arch_dir);
    TrainHyper hyper;
    hyper.lr = rlr;
    hyper.epochs = repochs;
    hyper.batch = rbatch;
    hyper.seed = rm.seed;
    train(m, ds, hyper);

    json jout = json::array();
    if (rformat != "json") {
      std::cout << std::left << std::setw(16) << "corruption";
      for (std::uint32_t s = sev_lo; s <= sev_hi; ++s)
        std::cout << std::right << std::setw(10) << ("sev" + std::to_string(s));
      std::cout << "\n";
    }
    double clean = evaluate_accuracy(m, ds.images, ds.labels, ds.train_count, ds.size());
    for (CorruptionKind kind : ckinds) {
      json row;
      row["kind"] = corruption_name(kind);
      row["clean_acc"] = clean;
      if (rformat != "json") std::cout << std::left << std::setw(16) << corruption_name(kind);
      for (std::uint32_t s = sev_lo; s <= sev_hi; ++s) {
        SyntheticDataset cds = corrupt(ds, CorruptionSpec{kind, s});
        double acc = evaluate_accuracy(m, cds.images, cds.labels, cds.train_count, cds.size());
        row["sev" + std::to_string(s)] = acc;
        if (rformat != "json")
          std::cout << std::right << std::fixed << std::setprecision(1) << std::setw(10) << acc;
      }
      if (rformat != "json") std::cout << "\n";
      jout.push_back(row);
    }
    if (rformat == "json") std::cout << jout.dump(2) << "\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const groupnl::InvalidSpec& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const groupnl::UnknownArch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const groupnl::ShapeMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const groupnl::NonDivisibleChannels& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const groupnl::GroupMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const groupnl::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
}
