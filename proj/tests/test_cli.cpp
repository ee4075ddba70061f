#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "sgi/image_io.hpp"
#include "test_util.hpp"

using sgi::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string err;
};

Run sgi_run(const std::string& args, const fs::path& scratch) {
  const fs::path err = scratch / "stderr.txt";
  const std::string cmd = std::string("\"") + SGI_CLI + "\" " + args + " >/dev/null 2>\"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(err);
  std::stringstream s;
  s << in.rdbuf();
  r.err = s.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string data_dir() { return (sgi::testing::source_dir() / "data/fixture/processed").string(); }

const char* kTinySets =
    " --set width_divisor=16 --set shape_width_divisor=8 --set canonical_size=16 --set latent_dim=8"
    " --set batch_size=2 --set d_scales=1 --set checkpoint_every=0";

}  // namespace

TEST(Cli, UnknownFlagIsUsageError) {
  TempDir t("cli_flag");
  const auto r = sgi_run("gen-masks --no-such-flag 1", t.path());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--no-such-flag"), std::string::npos) << r.err;
  EXPECT_EQ(sgi_run("", t.path()).code, 2);
  EXPECT_EQ(sgi_run("--profile mars gen-masks --data x --out y", t.path()).code, 2);
  EXPECT_EQ(sgi_run("--help", t.path()).code, 0);
}

TEST(Cli, RuntimeFailureIsExitOne) {
  TempDir t("cli_rt");
  EXPECT_EQ(sgi_run("gen-masks --data " + (t.path() / "missing").string() + " --out " + (t.path() / "m.txt").string(),
                    t.path())
                .code,
            1);
}

TEST(Cli, GenMasksIsByteDeterministic) {
  TempDir t("cli_gm");
  for (const char* name : {"a.txt", "b.txt"}) {
    const auto r = sgi_run("--seed 7 gen-masks --data " + data_dir() + " --split val --mode place --out " +
                               (t.path() / name).string(),
                           t.path());
    ASSERT_EQ(r.code, 0) << r.err;
  }
  const auto a = slurp(t.path() / "a.txt");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(t.path() / "b.txt"));
  ASSERT_EQ(sgi_run("--seed 8 gen-masks --data " + data_dir() + " --split val --mode place --out " +
                        (t.path() / "c.txt").string(),
                    t.path())
                .code,
            0);
  EXPECT_NE(a, slurp(t.path() / "c.txt"));
}

TEST(Cli, TrainEvalInferHappyPath) {
  TempDir t("cli_e2e");
  const fs::path run = t.path() / "run";
  auto r = sgi_run("--profile fixture --seed 3 train --overfit --run-dir " + run.string() + " --set data_dir=" +
                       data_dir() + " --set steps=3" + kTinySets,
                   t.path());
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_TRUE(fs::exists(run / "final.bin"));
  ASSERT_TRUE(fs::exists(run / "metrics.log"));

  const fs::path manifest = t.path() / "m.txt";
  ASSERT_EQ(sgi_run("--seed 7 gen-masks --data " + data_dir() + " --split val --out " + manifest.string(), t.path()).code,
            0);
  r = sgi_run("eval --checkpoint " + (run / "final.bin").string() + " --split val --task restore --manifest " +
                  manifest.string() + " --out " + (t.path() / "eval").string(),
              t.path());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(t.path() / "eval/report.txt"));
  EXPECT_TRUE(fs::exists(t.path() / "eval/rows.tsv"));

  // infer with three seeded variants, then one of them again by seed
  const fs::path img = sgi::testing::source_dir() / "data/fixture/processed/images/val/val_00.png";
  sgi::PngImage mask = sgi::make_png(64, 64, 1, 8);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) mask.at(y, x) = (x >= 16 && x < 48 && y >= 16 && y < 48) ? 0 : 255;
  sgi::write_png(t.path() / "mask.png", mask);
  const std::string common = "infer --checkpoint " + (run / "final.bin").string() + " --image " + img.string() +
                             " --mask " + (t.path() / "mask.png").string() + " --mode place --class car";
  ASSERT_EQ(sgi_run("--seed 5 " + common + " --variants 3 --out " + (t.path() / "v").string(), t.path()).code, 0);
  ASSERT_EQ(sgi_run("--seed 6 " + common + " --out " + (t.path() / "w").string(), t.path()).code, 0);
  EXPECT_TRUE(fs::exists(t.path() / "v_5.png"));
  EXPECT_TRUE(fs::exists(t.path() / "v_7_seg.png"));
  EXPECT_EQ(slurp(t.path() / "v_6.png"), slurp(t.path() / "w_6.png"));

  // bad class for place is a usage error
  EXPECT_EQ(sgi_run(common + " --class bicycle", t.path()).code, 2);
}

TEST(Cli, NonCpuDeviceIsRejected) {
  TempDir t("cli_dev");
  const auto r = sgi_run("--seed 1 train --overfit --run-dir " + (t.path() / "r").string() + " --set device=cuda",
                         t.path());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("device"), std::string::npos) << r.err;
}
