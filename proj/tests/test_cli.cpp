#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include "sgmm/binary_io.hpp"
#include "sgmm/stats_pool.hpp"

namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("sgmm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  // Exit status of the CLI with stdout captured into `out` when given.
  int run(const std::string& args, std::string* out = nullptr) const {
    const std::string capture = path("stdout.txt");
    const std::string cmd = std::string(SGMM_CLI_PATH) + " " + args + " > " + capture + " 2> " + path("stderr.txt");
    const int status = std::system(cmd.c_str());
    if (out) {
      const auto bytes = sgmm::read_file_bytes(capture);
      out->assign(bytes.begin(), bytes.end());
    }
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  void small_data() {
    ASSERT_EQ(run("gen-synth --out " + path("d.vseq") +
                  " --classes 3 --clusters 4 --dim 4 --videos-per-class 10 --train-frac 0.6 --val-frac 0.2"),
              0);
    ASSERT_EQ(run("train-ubm --data " + path("d.train.vseq") + " --out " + path("u.gmm") +
                  " --k 4 --cov shared-spherical"),
              0);
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, NoArgumentsIsUsageError) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("train --bogus"), 1);
  EXPECT_EQ(run("gradcheck --variant nonsense"), 1);
}

TEST_F(Cli, GradcheckPasses) {
  std::string out;
  EXPECT_EQ(run("gradcheck --variant diagonal --pool dsgmm", &out), 0);
  EXPECT_NE(out.find("max rel err"), std::string::npos);
}

TEST_F(Cli, MissingInputIsDataError) {
  EXPECT_EQ(run("eval --ckpt " + path("none.ckpt") + " --data " + path("none.vseq")), 2);
}

TEST_F(Cli, ExtractSgmmAndVladDiffer) {
  small_data();
  ASSERT_EQ(run("extract --data " + path("d.vseq") + " --ubm " + path("u.gmm") + " --out " + path("s.vcod") +
                " --pool sgmm --gamma 0"),
            0);
  ASSERT_EQ(run("extract --data " + path("d.vseq") + " --ubm " + path("u.gmm") + " --out " + path("v.vcod") +
                " --pool vlad"),
            0);
  const auto s = sgmm::read_vcod(path("s.vcod"));
  const auto v = sgmm::read_vcod(path("v.vcod"));
  ASSERT_EQ(s.size(), 30u);
  ASSERT_EQ(v.size(), 30u);
  EXPECT_NE(sgmm::read_file_bytes(path("s.vcod")), sgmm::read_file_bytes(path("v.vcod")));
}

TEST_F(Cli, TrainEvalDeterministicWithConfigFile) {
  small_data();
  {
    std::FILE* f = std::fopen(path("run.cfg").c_str(), "w");
    std::fputs("# desk run\nk = 4\nsteps = 30\neval-every = 10\nbatch = 8\nlr = 1e-3\n", f);
    std::fclose(f);
  }
  const std::string common = "train --config " + path("run.cfg") + " --train " + path("d.train.vseq") +
                             " --val " + path("d.val.vseq") + " --ubm " + path("u.gmm");
  ASSERT_EQ(run(common + " --out " + path("a.ckpt") + " --log " + path("a.csv")), 0);
  ASSERT_EQ(run(common + " --out " + path("b.ckpt") + " --log " + path("b.csv")), 0);
  EXPECT_EQ(sgmm::read_file_bytes(path("a.ckpt")), sgmm::read_file_bytes(path("b.ckpt")));
  EXPECT_EQ(sgmm::read_file_bytes(path("a.csv")), sgmm::read_file_bytes(path("b.csv")));
  const auto log = sgmm::read_file_bytes(path("a.csv"));
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 4);  // header + steps 10, 20, 30

  // A flag on the command line wins over the file.
  ASSERT_EQ(run(common + " --steps 20 --out " + path("c.ckpt") + " --log " + path("c.csv")), 0);
  const auto log_c = sgmm::read_file_bytes(path("c.csv"));
  EXPECT_EQ(std::count(log_c.begin(), log_c.end(), '\n'), 3);

  std::string out;
  ASSERT_EQ(run("eval --ckpt " + path("a.ckpt") + " --data " + path("d.test.vseq"), &out), 0);
  EXPECT_EQ(out.rfind("{\"gap\":", 0), 0u);
  EXPECT_NE(out.find("\"hit1\":"), std::string::npos);
  EXPECT_NE(out.find("\"n_videos\":6"), std::string::npos);
}

TEST_F(Cli, RecoRoundTrip) {
  small_data();
  ASSERT_EQ(run("gen-cowatch --videos " + path("d.vseq") + " --out " + path("cw") + " --users 12"), 0);
  ASSERT_EQ(run("reco-train --videos " + path("d.vseq") + " --cowatch " + path("cw") + " --out " + path("r.ckpt") +
                " --k 4 --ubm " + path("u.gmm") + " --hidden 8 --embed-dim 4 --steps 20"),
            0);
  std::string out;
  ASSERT_EQ(run("reco-eval --ckpt " + path("r.ckpt") + " --videos " + path("d.vseq") + " --cowatch " + path("cw"), &out),
            0);
  for (const char* key : {"auc_avg_sim", "auc_max_sim", "auc_glmix", "auc_glmix_coldstart"}) {
    EXPECT_NE(out.find(std::string("\"") + key + "\":"), std::string::npos) << key;
  }
}
