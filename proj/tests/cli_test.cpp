#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "cli.hpp"

namespace bayes_layers::cli {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) rows.push_back(detail::split_csv_line(line));
  return rows;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("bayes_layers_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

TEST_F(CliTest, ZeroStepsWritesInitialCheckpoint) {
  const auto r = invoke({"train-bnn", "--steps", "0", "--checkpoint", path("m.ckpt"), "--seed", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "");
  const Checkpoint c = load_checkpoint(path("m.ckpt"));
  EXPECT_EQ(meta_scalar(c, "task"), static_cast<double>(Task::kBnn));

  // the saved parameters are the ones the first training step would start from
  auto model = models::bnn_regression();
  const Dataset d = toy::regression_1d(128, 4);
  (*model)(BatchSampler(d, 32, 4).at(0).x, Seed::for_step(4, 0).derive(0));
  for (const auto& [name, p] : model->named_parameters()) {
    const CheckpointEntry* e = find_entry(c, name);
    ASSERT_NE(e, nullptr) << name;
    EXPECT_EQ(e->value.values(), p.value().values()) << name;
  }
}

TEST_F(CliTest, LossLinesHaveFixedFormat) {
  const auto r = invoke({"train-bnn", "--steps", "5", "--checkpoint", path("m.ckpt"), "--hidden-units", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::regex line(R"(step=(\d+) loss=(-?[0-9.e+-]+|nan|inf) kl=([0-9.e+-]+))");
  std::istringstream in(r.out);
  std::size_t expected = 0;
  for (std::string l; std::getline(in, l); ++expected) {
    std::smatch m;
    ASSERT_TRUE(std::regex_match(l, m, line)) << l;
    EXPECT_EQ(std::stoul(m[1]), expected);
  }
  EXPECT_EQ(expected, 5u);

  const auto sparse = invoke({"train-bnn", "--steps", "7", "--log-every", "3", "--checkpoint", path("n.ckpt"),
                              "--hidden-units", "4"});
  EXPECT_NE(sparse.out.find("step=6 "), std::string::npos);
  EXPECT_EQ(sparse.out.find("step=1 "), std::string::npos);
  EXPECT_NE(sparse.out.find("step=3 "), std::string::npos);
}

TEST_F(CliTest, RepeatedRunsAreByteIdentical) {
  const std::vector<std::string> base{"train-bnn", "--steps", "20", "--hidden-units", "6", "--seed", "3"};
  auto a_args = base, b_args = base;
  a_args.insert(a_args.end(), {"--checkpoint", path("a.ckpt")});
  b_args.insert(b_args.end(), {"--checkpoint", path("b.ckpt"), "--prefetch-capacity", "0"});
  const auto a = invoke(a_args), b = invoke(b_args);
  ASSERT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(slurp(path("a.ckpt")), slurp(path("b.ckpt")));
}

TEST_F(CliTest, ConfigFileAndFlagsCombine) {
  {
    std::ofstream cfg(path("run.cfg"));
    cfg << "# short run\nsteps = 3\nhidden_units = 5\nlearning_rate = 0.05\n";
  }
  const auto r = invoke({"train-bnn", "--config", path("run.cfg"), "--steps", "2", "--checkpoint", path("m.ckpt")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 2);
  EXPECT_EQ(meta_scalar(load_checkpoint(path("m.ckpt")), "hidden_units"), 5.0);
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  auto r = invoke({"frobnicate"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("unknown subcommand 'frobnicate'"), std::string::npos);
  EXPECT_NE(r.err.find("train-bnn"), std::string::npos);  // usage lists the subcommands

  EXPECT_EQ(invoke({}).code, 2);
  EXPECT_EQ(invoke({"train-bnn", "--steps", "abc", "--checkpoint", path("m.ckpt")}).code, 2);
  EXPECT_EQ(invoke({"train-bnn", "--steps", "-3", "--checkpoint", path("m.ckpt")}).code, 2);
  EXPECT_EQ(invoke({"train-bnn", "--estimator", "magic", "--checkpoint", path("m.ckpt")}).code, 2);
  EXPECT_EQ(invoke({"train-bnn", "--no-such-flag"}).code, 2);
  EXPECT_EQ(invoke({"train-flow", "--num-inducing", "3"}).code, 2);  // not a flow option
  EXPECT_EQ(invoke({"predict", "--points", "many"}).code, 2);
  EXPECT_FALSE(fs::exists(path("m.ckpt")));
}

TEST_F(CliTest, HelpExitsZero) {
  const auto r = invoke({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("predict"), std::string::npos);
  EXPECT_EQ(invoke({"train-lstm", "--help"}).code, 0);
}

TEST_F(CliTest, RuntimeFailuresExitOne) {
  auto r = invoke({"predict", "--checkpoint", path("missing.ckpt")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("missing.ckpt"), std::string::npos);

  {
    std::ofstream bad(path("bad.ckpt"));
    bad << "not a checkpoint";
  }
  EXPECT_EQ(invoke({"sample", "--checkpoint", path("bad.ckpt")}).code, 1);

  {
    std::ofstream csv(path("d.csv"));
    csv << "x,y\n1,2\n3,oops\n";
  }
  r = invoke({"train-bnn", "--data", path("d.csv"), "--checkpoint", path("m.ckpt")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find(":3:"), std::string::npos) << r.err;
}

TEST_F(CliTest, PredictWritesMomentsThatWidenAwayFromData) {
  ASSERT_EQ(invoke({"train-bnn", "--checkpoint", path("m.ckpt"), "--seed", "1"}).code, 0);
  const auto r = invoke({"predict", "--checkpoint", path("m.ckpt"), "--points", "7"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(r.out);
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"x", "mean", "stddev"}));
  EXPECT_EQ(rows[1][0], "-3");
  EXPECT_EQ(rows[4][0], "0");
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_GT(std::stod(rows[i][2]), 0.0);
  EXPECT_GT(std::stod(rows[1][2]), std::stod(rows[4][2]));
  EXPECT_GT(std::stod(rows[7][2]), std::stod(rows[4][2]));
  // inside the training range the mean follows the target
  EXPECT_NEAR(std::stod(rows[4][1]), 0.0, 0.3);

  EXPECT_EQ(invoke({"predict", "--checkpoint", path("m.ckpt"), "--points", "7"}).out, r.out);
}

TEST_F(CliTest, PredictUndoesNormalization) {
  {
    std::ofstream csv(path("d.csv"));
    csv << "x,y\n";
    for (int i = 0; i < 64; ++i) {
      const double x = 10 + i * 0.1;
      csv << x << "," << 50 + 2 * x << "\n";
    }
  }
  ASSERT_EQ(invoke({"train-bnn", "--data", path("d.csv"), "--normalize", "--steps", "800", "--checkpoint",
                    path("m.ckpt")})
                .code,
            0);
  const auto r = invoke({"predict", "--checkpoint", path("m.ckpt"), "--data", path("d.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(r.out);
  ASSERT_EQ(rows.size(), 65u);
  for (std::size_t i = 1; i < rows.size(); i += 9) {
    EXPECT_NEAR(std::stod(rows[i][1]), 50 + 2 * std::stod(rows[i][0]), 1.0) << r.out;
  }
}

TEST_F(CliTest, SampleOutputsPerTask) {
  ASSERT_EQ(invoke({"train-flow", "--steps", "2", "--checkpoint", path("f.ckpt"), "--num-examples", "64"}).code, 0);
  auto r = invoke({"sample", "--checkpoint", path("f.ckpt"), "--count", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = csv_rows(r.out);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"x1", "x2"}));
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_TRUE(std::isfinite(std::stod(rows[i][1])));

  ASSERT_EQ(invoke({"train-lstm", "--steps", "2", "--checkpoint", path("l.ckpt"), "--vocab", "3"}).code, 0);
  r = invoke({"sample", "--checkpoint", path("l.ckpt"), "--count", "3", "--length", "6"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream lines(r.out);
  std::size_t n = 0;
  for (std::string l; std::getline(lines, l); ++n) {
    std::istringstream toks(l);
    std::size_t len = 0;
    for (int t; toks >> t; ++len) EXPECT_TRUE(t >= 0 && t < 3);
    EXPECT_EQ(len, 6u);
  }
  EXPECT_EQ(n, 3u);

  ASSERT_EQ(invoke({"train-deep-gp", "--steps", "2", "--checkpoint", path("g.ckpt")}).code, 0);
  r = invoke({"sample", "--checkpoint", path("g.ckpt"), "--count", "2", "--points", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  rows = csv_rows(r.out);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"x", "draw_0", "draw_1"}));
  EXPECT_NE(rows[1][1], rows[1][2]);

  EXPECT_EQ(invoke({"predict", "--checkpoint", path("f.ckpt")}).code, 1);
}

}  // namespace
}  // namespace bayes_layers::cli
