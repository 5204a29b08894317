#include <gtest/gtest.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dno/cli.hpp"

namespace {

using namespace dno;
namespace fs = std::filesystem;
using nlohmann::json;

struct Outcome {
  int code;
  std::string out, err;
};

Outcome cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_command(args, out, err);
  return {code, out.str(), err.str()};
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class Cli : public ::testing::Test {
 protected:
  static fs::path root() { return fs::temp_directory_path() / ("dno_cli_" + std::to_string(::getpid())); }
  static std::string path(const std::string& rel) { return (root() / rel).string(); }

  // A 64-motion dataset and a one-epoch narrow model shared by the suite.
  static void SetUpTestSuite() {
    fs::remove_all(root());
    fs::create_directories(root());
    ASSERT_EQ(cli({"gen-data", "--count", "64", "--seed", "3", "--out", path("data")}).code, 0);
    const auto t = cli({"train", "--data", path("data/dataset.mbin"), "--out", path("model"), "--epochs", "1",
                        "--width", "32", "--blocks", "1", "--diffusion-steps", "100", "--batch", "16"});
    ASSERT_EQ(t.code, 0) << t.err;
  }
  static void TearDownTestSuite() { fs::remove_all(root()); }

  static std::vector<std::string> quick() { return {"--steps", "3", "--warmup", "1"}; }
  static std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }
};

TEST_F(Cli, GenDataWritesDatasetAndConfig) {
  EXPECT_TRUE(fs::exists(path("data/dataset.mbin")));
  EXPECT_EQ(load_mbin(path("data/dataset.mbin")).motions.size(), 64u);
  const json c = read_json(path("data/config.json"));
  EXPECT_EQ(c.at("command"), "gen-data");
  EXPECT_EQ(c.at("options").at("count"), 64);
  EXPECT_EQ(c.at("options").at("seed"), 3);
  EXPECT_TRUE(fs::exists(path("data/stats.json")));
}

TEST_F(Cli, TrainWritesModelAndCurve) {
  const Denoiser m = load_params(path("model/model.dnow"));
  EXPECT_EQ(m.config.width, 32u);
  EXPECT_EQ(m.config.diffusion_steps, 100u);
  const json s = read_json(path("model/summary.json"));
  EXPECT_EQ(s.at("heldout_count"), 4);
  EXPECT_EQ(s.at("train_count"), 60);
  EXPECT_NE(read_text(path("model/loss.csv")).find("epoch,train_loss,heldout_loss\n1,"), std::string::npos);
}

TEST_F(Cli, HelpExitsZero) {
  EXPECT_EQ(cli({"--help"}).code, 0);
  const auto h = cli({"edit", "--help"});
  EXPECT_EQ(h.code, 0);
  EXPECT_NE(h.out.find("--candidates"), std::string::npos);
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"no-such-command"}).code, 2);
  EXPECT_EQ(cli({"gen-data"}).code, 2);
  EXPECT_EQ(cli({"gen-data", "--out", path("bad"), "--count", "abc"}).code, 2);
  EXPECT_EQ(cli({"gen-data", "--out", path("bad"), "--frames", "10"}).code, 2);
  EXPECT_EQ(cli({"sample", "--model", path("model/model.dnow"), "--out", path("bad"), "--steps", "0"}).code, 2);
  // Warmup must be shorter than the step count.
  EXPECT_EQ(cli(with({"edit", "--model", path("model/model.dnow"), "--input", path("data/dataset.mbin"), "--out",
                      path("bad")},
                     {"--steps", "5"}))
                .code,
            2);
}

TEST_F(Cli, TaskErrorsExitTwo) {
  const auto task = root() / "bad_task.json";
  std::ofstream(task) << R"({"targets": [{"joint": "pelvis", "frame": 99, "x": 0, "y": 0}]})";
  const auto r = cli(with({"edit", "--model", path("model/model.dnow"), "--input", path("data/dataset.mbin"), "--task",
                           task.string(), "--out", path("bad_task")},
                          quick()));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("99"), std::string::npos);
}

TEST_F(Cli, IoAndFormatErrorsExitThree) {
  EXPECT_EQ(cli({"sample", "--model", path("absent.dnow"), "--out", path("io")}).code, 3);
  const auto junk = root() / "junk.dnow";
  std::ofstream(junk) << "not a model";
  EXPECT_EQ(cli({"sample", "--model", junk.string(), "--out", path("io")}).code, 3);
  EXPECT_EQ(cli({"eval", "--result", path("absent.mbin")}).code, 3);
}

TEST_F(Cli, NonFiniteModelExitsFour) {
  Denoiser m = load_params(path("model/model.dnow"));
  auto v = m.weights.back().to_vector();
  v[0] = std::numeric_limits<double>::quiet_NaN();
  m.weights.back() = Tensor(m.weights.back().shape(), std::move(v));
  save_params(root() / "nan.dnow", m);
  const auto r = cli(with({"edit", "--model", path("nan.dnow"), "--input", path("data/dataset.mbin"), "--inputs", "1",
                           "--candidates", "1", "--out", path("nan")},
                          quick()));
  EXPECT_EQ(r.code, 4) << r.err;
}

TEST_F(Cli, EditIsDeterministic) {
  auto args = [&](const std::string& out) {
    return with({"edit", "--model", path("model/model.dnow"), "--input", path("data/dataset.mbin"), "--inputs", "2",
                 "--candidates", "2", "--batch", "3", "--inversion-steps", "10", "--out", path(out)},
                quick());
  };
  ASSERT_EQ(cli(args("edit_a")).code, 0);
  ASSERT_EQ(cli(args("edit_b")).code, 0);
  EXPECT_EQ(read_text(path("edit_a/result.mbin")), read_text(path("edit_b/result.mbin")));
  EXPECT_EQ(read_text(path("edit_a/trace.csv")), read_text(path("edit_b/trace.csv")));
  EXPECT_EQ(load_mbin(path("edit_a/result.mbin")).motions.size(), 4u);
  const json s = read_json(path("edit_a/summary.json"));
  EXPECT_EQ(s.at("count"), 4);
  EXPECT_TRUE(s.contains("median_objective_error"));
  EXPECT_TRUE(fs::exists(path("edit_a/plots")));
}

TEST_F(Cli, ConfigReplayReproducesTheRun) {
  ASSERT_EQ(cli({"sample", "--model", path("model/model.dnow"), "--count", "2", "--seed", "5", "--out", path("s1")}).code, 0);
  const json c = read_json(path("s1/config.json"));
  EXPECT_EQ(c.at("options").at("seed"), 5);
  ASSERT_EQ(cli({"sample", "--config", path("s1/config.json"), "--out", path("s2")}).code, 0);
  EXPECT_EQ(read_text(path("s1/result.mbin")), read_text(path("s2/result.mbin")));
  ASSERT_EQ(cli({"sample", "--config", path("s1/config.json"), "--seed", "6", "--out", path("s3")}).code, 0);
  EXPECT_NE(read_text(path("s1/result.mbin")), read_text(path("s3/result.mbin")));
  EXPECT_EQ(cli({"edit", "--config", path("s1/config.json"), "--out", path("s4")}).code, 2);
}

TEST_F(Cli, RefineThenEvalAppendsRows) {
  const auto r = cli(with({"refine", "--model", path("model/model.dnow"), "--input", path("data/dataset.mbin"),
                           "--count", "2", "--noise-std", "0.05", "--out", path("runs/refine")},
                          quick()));
  ASSERT_EQ(r.code, 0) << r.err;
  const json s = read_json(path("runs/refine/summary.json"));
  EXPECT_TRUE(s.contains("input_mpjpe"));
  EXPECT_TRUE(s.contains("output_mpjpe"));
  EXPECT_EQ(load_mbin(path("runs/refine/noisy.mbin")).motions.size(), 2u);

  const auto e1 = cli({"eval", "--result", path("runs/refine"), "--reference", path("data/dataset.mbin")});
  ASSERT_EQ(e1.code, 0) << e1.err;
  const json m = read_json(path("runs/refine/metrics.json"));
  EXPECT_EQ(m.at("count"), 2);
  EXPECT_FALSE(m.at("mpjpe").is_null());
  EXPECT_TRUE(m.at("fmd").is_null());
  ASSERT_EQ(cli({"eval", "--result", path("runs/refine/result.mbin"), "--reference", path("data/dataset.mbin")}).code, 0);
  const std::string table = read_text(path("runs/results.csv"));
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
  EXPECT_EQ(table.rfind("result,count,jitter", 0), 0u);
}

TEST_F(Cli, GuidedEngineRecordsBudget) {
  const auto r = cli({"edit", "--model", path("model/model.dnow"), "--input", path("data/dataset.mbin"), "--inputs", "1",
                      "--candidates", "2", "--engine", "guided", "--guidance-scale", "0.1", "--guidance-iters", "2",
                      "--out", path("guided")});
  ASSERT_EQ(r.code, 0) << r.err;
  const json c = read_json(path("guided/config.json"));
  EXPECT_EQ(c.at("resolved").at("engine").at("evaluations"), 30);
}

TEST_F(Cli, GradCheckPasses) {
  const auto r = cli({"gradcheck", "--instances", "3", "--out", path("gc")});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_TRUE(read_json(path("gc/report.json")).at("passed").get<bool>());
}

TEST_F(Cli, OtherSubcommandsRun) {
  const std::string model = path("model/model.dnow"), data = path("data/dataset.mbin");
  EXPECT_EQ(cli({"invert", "--model", model, "--input", data, "--count", "2", "--steps", "10", "--decode-steps", "10",
                 "--out", path("inv")})
                .code,
            0);
  EXPECT_EQ(read_json(path("inv/summary.json")).at("mpjpe").size(), 2u);
  EXPECT_EQ(cli(with({"complete", "--model", model, "--input", data, "--count", "1", "--out", path("comp")}, quick())).code, 0);
  EXPECT_EQ(cli(with({"blend", "--model", model, "--first", data, "--second-index", "1", "--out", path("blend")}, quick())).code, 0);
  EXPECT_TRUE(fs::exists(path("blend/joined.mbin")));
  EXPECT_EQ(cli(with({"inbetween", "--model", model, "--start", data, "--end-index", "2", "--out", path("inb")}, quick())).code, 0);
}

}  // namespace
