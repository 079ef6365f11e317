#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cubevit/cli.hpp"
#include "cubevit/errors.hpp"
#include "cubevit/io.hpp"
#include "cubevit/mae3d.hpp"

using namespace cubevit;
namespace fs = std::filesystem;
using cli::json;

namespace {

int run_args(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  args.insert(args.begin(), "cubevit");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cubevit_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json config(const std::string& cmd, const std::vector<std::string>& overrides) {
  return cli::merge_config(cli::default_config(cmd), json(), overrides);
}

}  // namespace

TEST(CliConfig, EveryCommandHasDefaults) {
  for (const auto& c : cli::commands()) {
    const json d = cli::default_config(c);
    EXPECT_TRUE(d.contains("out")) << c;
    EXPECT_TRUE(d.contains("threads")) << c;
  }
  EXPECT_THROW(cli::default_config("train"), UsageError);
}

TEST(CliConfig, OverridesWinAndAreTyped) {
  const json file = {{"steps", 7}, {"encoder", {{"depth", 3}}}};
  const json c = cli::merge_config(cli::default_config("align"), file,
                                   {"--steps", "9", "--encoder.dim", "16", "--data", "x/y"});
  EXPECT_EQ(c["steps"], 9);
  EXPECT_EQ(c["encoder"]["depth"], 3);
  EXPECT_EQ(c["encoder"]["dim"], 16);
  EXPECT_EQ(c["data"], "x/y");
  EXPECT_THROW(cli::merge_config(cli::default_config("align"), json(), {"--stepz", "9"}), UsageError);
  EXPECT_THROW(cli::merge_config(cli::default_config("align"), json(), {"--steps", "\"many\""}), UsageError);
  EXPECT_THROW(cli::merge_config(cli::default_config("align"), json{{"bogus", 1}}, {}), UsageError);
}

TEST(CliRun, UsageErrorsExitTwoAndNameTheKey) {
  std::string err;
  EXPECT_EQ(run_args({"essi", "--no_such_key", "1"}, nullptr, &err), cli::kExitUsage);
  EXPECT_NE(err.find("no_such_key"), std::string::npos);
  EXPECT_EQ(run_args({"essi", "--n", "abc"}), cli::kExitUsage);
  EXPECT_EQ(run_args({"nonsense"}), cli::kExitUsage);
  EXPECT_EQ(run_args({"essi", "--config", "/nonexistent/cfg.json"}), cli::kExitUsage);
  EXPECT_EQ(run_args({"pretrain", "--data", "/nonexistent/cohort", "--out", scratch("nodata").string()}),
            cli::kExitUsage);
}

TEST(CliRun, EssiPrintsReferenceNumbers) {
  std::string out;
  const fs::path dir = scratch("essi");
  ASSERT_EQ(run_args({"essi", "--out", dir.string()}, &out), cli::kExitOk);
  EXPECT_NE(out.find("model_a 0.6162 61.2 709 269"), std::string::npos) << out;
  EXPECT_NE(out.find("model_b"), std::string::npos);
  EXPECT_NE(out.find(" 44.9 637 "), std::string::npos) << out;
  EXPECT_NE(out.find("model_a vs model_b 72"), std::string::npos) << out;
  EXPECT_TRUE(fs::exists(dir / "config.json"));
  EXPECT_TRUE(fs::exists(dir / "metrics.json"));
}

TEST(CliRun, CorruptCheckpointExitsThree) {
  const fs::path dir = scratch("corrupt");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.ckpt", std::ios::binary) << "OCTK";
  const fs::path synth = dir / "synth";
  ASSERT_EQ(run_args({"synth", "--count", "4", "--out", synth.string()}), cli::kExitOk);
  EXPECT_EQ(run_args({"retrieve", "--data", (synth / "cohort").string(), "--checkpoint", (dir / "bad.ckpt").string(),
                      "--out", (dir / "r").string()}),
            cli::kExitData);
}

TEST(CliPipeline, SynthIsByteIdenticalAcrossRuns) {
  std::ostringstream sink;
  const fs::path a = scratch("synth_a"), b = scratch("synth_b");
  cli::run_command("synth", config("synth", {"--count", "6", "--seed", "3", "--out", a.string()}), sink);
  cli::run_command("synth", config("synth", {"--count", "6", "--seed", "3", "--out", b.string()}), sink);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a / "cohort")) {
    ++files;
    EXPECT_EQ(bytes_of(e.path()), bytes_of(b / "cohort" / e.path().filename())) << e.path();
  }
  EXPECT_EQ(files, 1u + 6u * 3u + 6u * 3u);
}

TEST(CliPipeline, PretrainCheckpointReproducesLoggedLoss) {
  std::ostringstream sink;
  const fs::path root = scratch("pretrain");
  cli::run_command("synth", config("synth", {"--count", "8", "--out", (root / "synth").string()}), sink);
  const json cfg = config("pretrain", {"--data", (root / "synth" / "cohort").string(), "--out",
                                       (root / "pt").string(), "--max_steps", "3", "--seed", "5"});
  const json metrics = cli::run_command("pretrain", cfg, sink);

  std::ifstream log(root / "pt" / "pretrain.log");
  std::string line, last;
  while (std::getline(log, line))
    if (line.rfind("eval loss ", 0) == 0) last = line;
  ASSERT_FALSE(last.empty());
  const double logged = std::stod(last.substr(10));
  EXPECT_EQ(logged, metrics["final_eval_loss"].get<double>());

  MAEConfig mc;
  mc.cube = {{3, 8, 8}, {6, 32, 32}};
  mc.encoder = {2, 4, 32, 4, VitRole::kEncoder};
  mc.decoder = {1, 4, 32, 4, VitRole::kDecoder};
  const MaskedAutoencoder model(mc);
  ParamStore store;
  Rng rng(0);
  model.init(store, rng);
  load_into(root / "pt" / "pretrain.ckpt", store, true);
  std::vector<Volume> data;
  for (auto& it : read_cohort(root / "synth" / "cohort")) data.push_back(std::move(it.volume));
  EXPECT_EQ(evaluate_mae(model, store, data, derive_seed(5, 0xE7A1)), logged);
}
