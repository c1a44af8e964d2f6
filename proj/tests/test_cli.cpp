#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "dualenc/cli.hpp"
#include "dualenc/errors.hpp"

using namespace dualenc;
using namespace dualenc::cli;
namespace fs = std::filesystem;

namespace {

struct ToolResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "dualenc_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ToolResult run_tool(const std::string& args) {
  static int counter = 0;
  const auto base = fs::temp_directory_path() / "dualenc_cli_test";
  fs::create_directories(base);
  const auto out = base / ("stdout_" + std::to_string(counter) + ".txt");
  const auto err = base / ("stderr_" + std::to_string(counter++) + ".txt");
  const std::string cmd = std::string(DUALENC_TOOL_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  ToolResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// Small, fast synthetic settings shared by the end-to-end cases.
const std::string kFastNoSteps =
    " --size small --batch_size 16 --synthetic_n_train 200 --synthetic_n_eval 60"
    " --sample_per_side 30 --tsne_iterations 60 --tsne_perplexity 8 --kmeans_restarts 3";
const std::string kFast = kFastNoSteps + " --steps 12";

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

}  // namespace

// ---- RunConfig ------------------------------------------------------------------

TEST(RunConfig, TextRoundTrip) {
  RunConfig c;
  c.set("variant", "SDE");
  c.set("peak_lr", "0.0025");
  c.set("dedup_batch", "true");
  const auto dir = scratch("roundtrip");
  std::ofstream(dir / "c.txt") << c.to_text();
  RunConfig back;
  back.load_file(dir / "c.txt");
  EXPECT_EQ(back.to_text(), c.to_text());
}

TEST(RunConfig, UnknownKeyAndBadValueRejected) {
  RunConfig c;
  EXPECT_THROW(c.set("no_such_key", "1"), ConfigError);
  EXPECT_THROW(c.set("steps", "-3"), ConfigError);
  EXPECT_THROW(c.set("peak_lr", "fast"), ConfigError);
  EXPECT_THROW(c.set("dedup_batch", "maybe"), ConfigError);
}

TEST(RunConfig, FileErrorsCiteLine) {
  const auto dir = scratch("badfile");
  std::ofstream(dir / "c.txt") << "# comment\nsteps = 10\nbogus = 1\n";
  RunConfig c;
  try {
    c.load_file(dir / "c.txt");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
}

TEST(RunConfig, ValidateRejectsBadVariantsAndSizes) {
  RunConfig c;
  c.set("variant", "XDE");
  EXPECT_THROW(c.validate(), ConfigError);
  RunConfig d;
  d.set("sizes", "small,giant");
  EXPECT_THROW(d.validate(), ConfigError);
  RunConfig e;
  e.set("temperature", "0");
  EXPECT_THROW(e.validate(), ConfigError);
}

TEST(ExitCodes, MapErrorTypes) {
  EXPECT_EQ(exit_code_for(ConfigError("x")), 2);
  EXPECT_EQ(exit_code_for(DataError("x")), 3);
  EXPECT_EQ(exit_code_for(NumericError("x")), 4);
  EXPECT_EQ(exit_code_for(InvariantViolation("x")), 1);
}

// ---- end to end -----------------------------------------------------------------

TEST(Cli, HelpAndVersion) {
  EXPECT_EQ(run_tool("--help").code, 0);
  const auto v = run_tool("--version");
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.out.find("dualenc"), std::string::npos);
  EXPECT_EQ(run_tool("").code, 2);
  EXPECT_EQ(run_tool("train --no-such-flag 1").code, 2);
}

TEST(Cli, TrainWritesArtifacts) {
  const auto dir = scratch("train");
  const auto r = run_tool("train --variant SDE" + kFast + " --output_dir " + dir.string());
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"model.ckpt", "metrics.csv", "config.txt", "version.txt", "vocab.txt", "sharing_report.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_EQ(lines_of(slurp(dir / "metrics.csv")).size(), 13u);
  EXPECT_NE(slurp(dir / "config.txt").find("variant = SDE"), std::string::npos);
  EXPECT_NE(slurp(dir / "version.txt").find("dualenc "), std::string::npos);
}

TEST(Cli, InvalidVariantExitsTwoListingVariants) {
  const auto r = run_tool("train --variant TDE --output_dir " + scratch("badvariant").string());
  EXPECT_EQ(r.code, 2);
  for (const char* name : {"SDE", "ADE", "ADE-STE", "ADE-FTE", "ADE-SPL"}) {
    EXPECT_NE(r.err.find(name), std::string::npos) << name;
  }
}

TEST(Cli, DivergenceExitsFourWithStep) {
  const auto r = run_tool("train" + kFast + " --peak_lr 1e300 --output_dir " + scratch("nan").string());
  EXPECT_EQ(r.code, 4) << r.err;
  EXPECT_NE(r.err.find("step"), std::string::npos);
}

TEST(Cli, MissingDataFileExitsThree) {
  const auto r = run_tool("train --train_path /nonexistent/train.jsonl --output_dir " + scratch("nodata").string());
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST(Cli, ConfigFileWithFlagOverride) {
  const auto dir = scratch("configfile");
  std::ofstream(dir / "run.txt") << "variant = ADE-SPL\nsteps = 5\n";
  const auto r = run_tool("train --config " + (dir / "run.txt").string() + kFast + " --output_dir " + dir.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto cfg = slurp(dir / "config.txt");
  EXPECT_NE(cfg.find("variant = ADE-SPL"), std::string::npos);
  EXPECT_NE(cfg.find("steps = 12"), std::string::npos);
}

class CliWithCheckpoint : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(scratch("ckpt"));
    const auto r = run_tool("train --variant ADE" + kFast + " --output_dir " + dir_->string());
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() { delete dir_; }
  static std::string ckpt() { return (*dir_ / "model.ckpt").string(); }
  static fs::path* dir_;
};
fs::path* CliWithCheckpoint::dir_ = nullptr;

TEST_F(CliWithCheckpoint, EvalPrintsBoundedSummaryAndIsRepeatable) {
  const auto a = scratch("eval_a"), b = scratch("eval_b");
  const auto ra = run_tool("eval --checkpoint " + ckpt() + kFast + " --output_dir " + a.string());
  const auto rb = run_tool("eval --checkpoint " + ckpt() + kFast + " --output_dir " + b.string());
  ASSERT_EQ(ra.code, 0) << ra.err;
  EXPECT_EQ(ra.out, rb.out);
  EXPECT_EQ(ra.out.rfind("p_at_1=", 0), 0u);
  double p1 = -1, mrr = -1;
  std::size_t n = 0;
  ASSERT_EQ(std::sscanf(ra.out.c_str(), "p_at_1=%lf mrr=%lf n=%zu", &p1, &mrr, &n), 3);
  EXPECT_GE(p1, 0.0);
  EXPECT_LE(mrr, 1.0);
  EXPECT_LE(p1, mrr);
  EXPECT_EQ(n, 60u);
  EXPECT_EQ(slurp(a / "ranks.csv"), slurp(b / "ranks.csv"));
  EXPECT_EQ(slurp(a / "report.txt"), slurp(b / "report.txt"));
}

TEST_F(CliWithCheckpoint, MissingGoldIsReported) {
  const auto dir = scratch("eval_missing");
  std::ofstream(dir / "corpus.txt") << "y1 y2 y3\nnot an answer\n";
  const auto r = run_tool("eval --checkpoint " + ckpt() + kFast + " --corpus_path " + (dir / "corpus.txt").string() +
                          " --output_dir " + dir.string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("warning"), std::string::npos);
  EXPECT_NE(slurp(dir / "report.txt").find("missing_gold = 60"), std::string::npos);
}

TEST_F(CliWithCheckpoint, MismatchedConfigExitsTwo) {
  const auto r = run_tool("eval --checkpoint " + ckpt() + kFast + " --variant SDE --output_dir " +
                          scratch("eval_mismatch").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("mismatch"), std::string::npos);
}

TEST_F(CliWithCheckpoint, AnalyzeReportsAndRendersDeterministically) {
  const auto a = scratch("analyze_a"), b = scratch("analyze_b");
  const auto ra = run_tool("analyze --checkpoint " + ckpt() + kFast + " --output_dir " + a.string());
  ASSERT_EQ(ra.code, 0) << ra.err;
  ASSERT_EQ(run_tool("analyze --checkpoint " + ckpt() + kFast + " --output_dir " + b.string()).code, 0);
  EXPECT_NE(ra.out.find("kmeans2_agreement"), std::string::npos);
  EXPECT_EQ(slurp(a / "tsne.svg"), slurp(b / "tsne.svg"));
  EXPECT_EQ(slurp(a / "tsne_coords.csv"), slurp(b / "tsne_coords.csv"));
  EXPECT_EQ(lines_of(slurp(a / "tsne_coords.csv")).size(), 61u);
}

TEST_F(CliWithCheckpoint, AnalyzeNeedsEnoughEvalPairs) {
  const auto r = run_tool("analyze --checkpoint " + ckpt() + kFast + " --sample_per_side 400 --output_dir " +
                          scratch("analyze_small").string());
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, CompareNeedsAde) {
  const auto r = run_tool("compare --variants SDE,ADE-SPL" + kFast + " --output_dir " + scratch("cmp_noade").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("ADE"), std::string::npos);
}

TEST(Cli, CompareTableShapeAndDeterminism) {
  const auto a = scratch("cmp_a"), b = scratch("cmp_b");
  const std::string args = "compare --variants SDE,ADE --seeds 2" + kFast;
  const auto ra = run_tool(args + " --output_dir " + a.string());
  ASSERT_EQ(ra.code, 0) << ra.err;
  ASSERT_EQ(run_tool(args + " --jobs 2 --output_dir " + b.string()).code, 0);
  const auto delta = lines_of(slurp(a / "delta_mrr.csv"));
  ASSERT_EQ(delta.size(), 3u);
  EXPECT_EQ(delta[0], "variant,seed_0,seed_1,median");
  EXPECT_EQ(delta[2], "ADE,0,0,0");
  EXPECT_EQ(lines_of(slurp(a / "runs.csv")).size(), 5u);
  for (const char* f : {"runs.csv", "delta_mrr.csv", "mrr.csv", "separation.csv", "summary.csv", "delta_mrr.svg"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
}

TEST(Cli, SweepFourCells) {
  const auto dir = scratch("sweep");
  const auto r = run_tool("sweep --sizes small,base --variants SDE,ADE --seeds 1" + kFastNoSteps + " --steps 4 --output_dir " +
                          dir.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines_of(slurp(dir / "sweep.csv"));
  EXPECT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], "size,variant,seed,p_at_1,mrr,final_loss");
  const auto table = lines_of(slurp(dir / "sweep_table.csv"));
  EXPECT_EQ(table[0], "variant,small,base");
  EXPECT_TRUE(fs::exists(dir / "sweep.svg"));
}

TEST(Cli, TrainTwiceIsBitwiseIdentical) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  ASSERT_EQ(run_tool("train --variant ADE-STE" + kFast + " --output_dir " + a.string()).code, 0);
  ASSERT_EQ(run_tool("train --variant ADE-STE" + kFast + " --output_dir " + b.string()).code, 0);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "model.ckpt"), slurp(b / "model.ckpt"));
}
