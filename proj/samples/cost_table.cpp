// Prints the analytic cost comparison of the layer families on the
// module-profiling geometry (512 -> 512 channels, 3x3, stride 2, 32x32 in).

#include <cstdio>

#include "groupnl/bench.hpp"
#include "groupnl/cost_model.hpp"

using namespace groupnl;

int main() {
  std::printf("%-18s %4s %12s %14s %6s\n", "module", "r", "params", "flops", "#ops");
  auto row = [](const char* name, const LayerSpec& s) {
    CostReport c = layer_cost(s, 32, 32);
    std::printf("%-18s %4u %12llu %14llu %6llu\n", name, s.r,
                (unsigned long long)c.params, (unsigned long long)c.flops,
                (unsigned long long)c.ops_modules);
  };

  row("vanilla", profiling_preset_spec(LayerKind::Vanilla, 1));
  for (std::uint32_t r : {2u, 4u, 8u}) row("sinefm", profiling_preset_spec(LayerKind::SineFM, r));
  for (std::uint32_t r : {2u, 4u, 8u}) row("ghost", profiling_preset_spec(LayerKind::Ghost, r));
  for (std::uint32_t r : {2u, 4u, 8u})
    row("groupnl", profiling_preset_spec(LayerKind::GroupNLStd, r));
  row("depthwise", profiling_preset_spec(LayerKind::Depthwise, 1));
  for (std::uint32_t r : {2u, 4u, 8u})
    row("groupnl (sparse)", profiling_preset_spec(LayerKind::GroupNLSparse, r));
  return 0;
}
