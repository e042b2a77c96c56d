#include <gtest/gtest.h>

#include <json.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

CliResult run_cli(const std::string& args) {
  std::string cmd = std::string(GROUPNL_CLI_BIN) + " " + args + " 2>&1";
  std::array<char, 4096> buf{};
  CliResult res;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return res;
  while (fgets(buf.data(), int(buf.size()), pipe)) res.output += buf.data();
  int status = pclose(pipe);
  res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return res;
}

fs::path temp_file(const std::string& name, const std::string& content) {
  fs::path p = fs::temp_directory_path() / name;
  std::ofstream os(p);
  os << content;
  return p;
}

// minimal structural validation against the shipped draft-07 subset:
// type / required / properties / enum / items / minimum
bool validate_against(const json& schema, const json& value, std::string* why) {
  if (schema.contains("type")) {
    std::string t = schema["type"];
    bool ok = (t == "object" && value.is_object()) || (t == "array" && value.is_array()) ||
              (t == "string" && value.is_string()) ||
              (t == "integer" && value.is_number_integer()) ||
              (t == "number" && value.is_number()) || (t == "boolean" && value.is_boolean());
    if (!ok) {
      *why = "expected type " + t + ", got " + value.dump().substr(0, 40);
      return false;
    }
  }
  if (schema.contains("enum")) {
    bool found = false;
    for (const auto& e : schema["enum"]) found |= e == value;
    if (!found) {
      *why = "value " + value.dump() + " not in enum";
      return false;
    }
  }
  if (schema.contains("minimum") && value.is_number() &&
      value.get<double>() < schema["minimum"].get<double>()) {
    *why = "value below minimum";
    return false;
  }
  if (value.is_object()) {
    if (schema.contains("required"))
      for (const auto& key : schema["required"])
        if (!value.contains(key.get<std::string>())) {
          *why = "missing required key " + key.get<std::string>();
          return false;
        }
    if (schema.contains("properties"))
      for (auto& [key, sub] : schema["properties"].items())
        if (value.contains(key) && !validate_against(sub, value[key], why)) {
          *why = key + ": " + *why;
          return false;
        }
  }
  if (value.is_array() && schema.contains("items"))
    for (const auto& item : value)
      if (!validate_against(schema["items"], item, why)) return false;
  return true;
}

json load_schema(const std::string& name) {
  std::ifstream is(std::string(GROUPNL_SOURCE_DIR) + "/docs/schemas/" + name);
  json j;
  is >> j;
  return j;
}

}  // namespace

TEST(Cli, CostModelJsonValidatesAndMatches) {
  CliResult r = run_cli("cost model --arch resnet18 --variant groupnl --r 2 --g 4 --format json");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  json j = json::parse(r.output);
  std::string why;
  EXPECT_TRUE(validate_against(load_schema("cost-report.schema.json"), j, &why)) << why;
  double params = j["params"].get<double>();
  EXPECT_NEAR(params, 5.60e6, 0.03 * 5.60e6);
  EXPECT_EQ(j["grads"], j["params"]);
}

TEST(Cli, CostLayerFromSpecFile) {
  fs::path spec = temp_file("groupnl_cli_spec.json", R"({
    "kind": "groupnl_std", "c_in": 512, "c_out": 512, "k": 3,
    "stride": 2, "pad": 1, "bias": true, "r": 2, "g": 4
  })");
  CliResult r = run_cli("cost layer --spec " + spec.string() + " --hw 32x32 --format json");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  json j = json::parse(r.output);
  EXPECT_EQ(j["flops"].get<std::uint64_t>(), 302055424u);
  fs::remove(spec);
}

TEST(Cli, CostCommMatchesReferenceNumbers) {
  CliResult r = run_cli("cost comm --grads 44.55e6 --gpus 8 --mode ddp --format json");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  json j = json::parse(r.output);
  std::string why;
  EXPECT_TRUE(validate_against(load_schema("comm-report.schema.json"), j, &why)) << why;
  EXPECT_NEAR(j["per_gpu"].get<double>(), 77.96e6, 5e-4 * 77.96e6);
  EXPECT_NEAR(j["total"].get<double>(), 623.69e6, 5e-4 * 623.69e6);
}

TEST(Cli, CostCommSingleGpuIsZero) {
  CliResult r = run_cli("cost comm --grads 44.55e6 --gpus 1 --mode dp --format json");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  json j = json::parse(r.output);
  EXPECT_EQ(j["per_gpu"].get<double>(), 0.0);
  EXPECT_EQ(j["total"].get<double>(), 0.0);
}

TEST(Cli, MalformedSpecGivesExitOneWithFieldDiagnostic) {
  fs::path spec = temp_file("groupnl_cli_bad.json", R"({ "kind": "groupnl_std", "c_in": 8 })");
  CliResult r = run_cli("cost layer --spec " + spec.string());
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.output.find("c_out"), std::string::npos) << r.output;
  fs::remove(spec);
}

TEST(Cli, InvalidJsonGivesExitOne) {
  fs::path spec = temp_file("groupnl_cli_nojson.json", "{ not json !");
  CliResult r = run_cli("cost layer --spec " + spec.string());
  EXPECT_EQ(r.exit_code, 1);
  fs::remove(spec);
}

TEST(Cli, UnknownFlagRejectedWithExitOne) {
  CliResult r = run_cli("cost comm --grads 1 --no-such-flag");
  EXPECT_EQ(r.exit_code, 1);
}

TEST(Cli, UnknownArchGivesExitOne) {
  CliResult r = run_cli("cost model --arch doesnotexist");
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.output.find("doesnotexist"), std::string::npos);
}

TEST(Cli, VerifySuitePasses) {
  CliResult r = run_cli("verify --suite counts --instances 5 --seed 99");
  EXPECT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(r.output.find("PASS"), std::string::npos);
}

TEST(Cli, VerifyUnknownSuiteRejected) {
  CliResult r = run_cli("verify --suite bogus");
  EXPECT_EQ(r.exit_code, 1);
}

TEST(Cli, BenchModuleMinimalRun) {
  CliResult r = run_cli(
      "bench module --preset table13 --variant groupnl --r 8 --iters 1 --warmup 0 --format json");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  json j = json::parse(r.output);
  std::string why;
  EXPECT_TRUE(validate_against(load_schema("bench-report.schema.json"), j, &why)) << why;
  EXPECT_EQ(j["iters"].get<int>(), 1);
  EXPECT_DOUBLE_EQ(j["mean_ms"].get<double>(), j["median_ms"].get<double>());
}

TEST(Cli, BenchPresetAliasesAgree) {
  CliResult a = run_cli("bench module --preset module512 --variant depthwise --iters 1 --warmup 0 --format json");
  ASSERT_EQ(a.exit_code, 0) << a.output;
  CliResult b = run_cli("bench module --preset table13 --variant depthwise --iters 1 --warmup 0 --format json");
  ASSERT_EQ(b.exit_code, 0) << b.output;
  EXPECT_EQ(json::parse(a.output)["input"], json::parse(b.output)["input"]);
}

TEST(Cli, TrainToyEmitsJsonLines) {
  CliResult r = run_cli(
      "train toy --arch tinycnn --variant vanilla --epochs 2 --lr 0 --samples 30 --classes 3 "
      "--hw 8 --batch 12");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  json schema = load_schema("trainlog-record.schema.json");
  int lines = 0;
  std::istringstream is(r.output);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line);
    std::string why;
    EXPECT_TRUE(validate_against(schema, rec, &why)) << why;
    ++lines;
  }
  EXPECT_EQ(lines, 2);
}

TEST(Cli, TrainRobustEmitsSeverityTable) {
  CliResult r = run_cli(
      "train robust --arch tinycnn --variant groupnl --severity 1..2 --kinds gaussian_noise "
      "--epochs 1 --samples 30 --classes 3 --hw 8 --batch 12 --format json");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  json j = json::parse(r.output);
  ASSERT_TRUE(j.is_array());
  ASSERT_EQ(j.size(), 1u);
  EXPECT_TRUE(j[0].contains("sev1"));
  EXPECT_TRUE(j[0].contains("sev2"));
}

TEST(Cli, EnvSeedFallbackIsDeterministic) {
  std::string cmd = "GROUPNL_SEED=4242 " + std::string(GROUPNL_CLI_BIN) +
                    " cost model --arch tinycnn --variant groupnl --format json 2>&1";
  auto run_env = [&]() {
    std::array<char, 4096> buf{};
    std::string out;
    FILE* pipe = popen(cmd.c_str(), "r");
    while (fgets(buf.data(), int(buf.size()), pipe)) out += buf.data();
    pclose(pipe);
    return out;
  };
  EXPECT_EQ(run_env(), run_env());
}

TEST(Cli, ShippedConfigsValidateAgainstSchema) {
  json schema = load_schema("arch-config.schema.json");
  for (const char* name : {"resnet18", "resnet34", "resnet101", "vgg11", "tinycnn"}) {
    std::ifstream is(std::string(GROUPNL_SOURCE_DIR) + "/configs/" + name + ".json");
    ASSERT_TRUE(bool(is)) << name;
    json cfg;
    is >> cfg;
    std::string why;
    EXPECT_TRUE(validate_against(schema, cfg, &why)) << name << ": " << why;
  }
}
