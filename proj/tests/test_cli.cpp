#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Small enough that each stage-1 run takes well under a second.
const std::string kTiny =
    " --set stage1.steps=3 --set stage1.n_pos=8 --set stage1.n_ctf=4 --set stage1.n_gen=32 --set stage1.n_reg=16";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("cfair_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(const std::string& args) const {
    const std::string cmd = std::string("env -u CFAIR_OUTPUT_DIR ") + CFAIR_CLI_PATH + " -q " + args +
                            " --set output_dir=\\\"" + dir_.string() + "\\\" >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  int run_raw(const std::string& args) const {
    const int status = std::system((std::string(CFAIR_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
  // Data rows: non-comment lines minus the header.
  static long rows(const fs::path& p) {
    std::istringstream in(slurp(p));
    long n = 0;
    for (std::string line; std::getline(in, line);)
      if (!line.empty() && line[0] != '#') ++n;
    return n - 1;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, GenDataSyntheticSplit) {
  ASSERT_EQ(run("gen-data --set data.n=5000"), 0);
  EXPECT_EQ(rows(dir_ / "data/train.csv"), 4000);
  EXPECT_EQ(rows(dir_ / "data/test.csv"), 1000);
  EXPECT_TRUE(fs::exists(dir_ / "data/normalization.json"));
  EXPECT_TRUE(fs::exists(dir_ / "data/scm.json"));
}

TEST_F(Cli, GenDataCrimesSplit) {
  const fs::path csv = dir_ / "crimes.csv";
  {
    std::ofstream out(csv);
    std::mt19937_64 gen(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    out << "state,communityname,f1,f2,f3,fmiss,fconst,racepctblack,ViolentCrimesPerPop\n";
    for (int i = 0; i < 1994; ++i)
      out << i % 50 << ",town" << i << "," << u(gen) << "," << u(gen) << "," << u(gen) << ","
          << (i % 7 == 0 ? "?" : "0.5") << ",0.3," << u(gen) << "," << u(gen) << "\n";
  }
  ASSERT_EQ(run("gen-data --set data.kind=crimes --set data.n_train=1794 --set data.path=\\\"" +
                csv.string() + "\\\""),
            0);
  EXPECT_EQ(rows(dir_ / "data/train.csv"), 1794);
  EXPECT_EQ(rows(dir_ / "data/test.csv"), 200);
  EXPECT_FALSE(fs::exists(dir_ / "data/scm.json"));
}

TEST_F(Cli, RerunIsByteIdentical) {
  ASSERT_EQ(run("gen-data --set data.n=400"), 0);
  ASSERT_EQ(run("train-ncm --set data.n=400" + kTiny), 0);
  const std::string train = slurp(dir_ / "data/train.csv");
  const std::string mech = slurp(dir_ / "stage1/mechanism.json");
  const std::string hist = slurp(dir_ / "stage1/loss_history.csv");
  ASSERT_EQ(run("gen-data --set data.n=400"), 0);
  ASSERT_EQ(run("train-ncm --set data.n=400" + kTiny), 0);
  EXPECT_EQ(slurp(dir_ / "data/train.csv"), train);
  EXPECT_EQ(slurp(dir_ / "stage1/mechanism.json"), mech);
  EXPECT_EQ(slurp(dir_ / "stage1/loss_history.csv"), hist);
}

TEST_F(Cli, TrainNcmModesAndNoCtf) {
  ASSERT_EQ(run("gen-data --set data.n=400"), 0);
  ASSERT_EQ(run("train-ncm --set data.n=400 --mode phased --stage1-dir phased" + kTiny), 0);
  ASSERT_EQ(run("train-ncm --set data.n=400 --mode joint --stage1-dir joint" + kTiny), 0);
  ASSERT_EQ(run("train-ncm --set data.n=400 --no-ctf --stage1-dir noctf" + kTiny), 0);
  const json phased = json::parse(slurp(dir_ / "phased/ncm_manifest.json"));
  const json joint = json::parse(slurp(dir_ / "joint/ncm_manifest.json"));
  const json noctf = json::parse(slurp(dir_ / "noctf/ncm_manifest.json"));
  EXPECT_EQ(phased.at("mode"), "phased");
  EXPECT_EQ(joint.at("mode"), "joint");
  EXPECT_EQ(noctf.at("lambda_ctf"), 0.0);
  EXPECT_GT(phased.at("lambda_ctf").get<double>(), 0.0);
  EXPECT_FALSE(noctf.at("losses").at("l_ctf").contains("final"));
}

TEST_F(Cli, VerifyDetectsTampering) {
  ASSERT_EQ(run("gen-data --set data.n=400"), 0);
  EXPECT_EQ(run("verify --set data.n=400"), 0);
  EXPECT_EQ(run("verify --set data.n=401"), 7) << "artifacts belong to a different config";
  const fs::path manifest = dir_ / "data/manifest.json";
  json j = json::parse(slurp(manifest));
  j["config_digest"] = std::string(64, '0');
  std::ofstream(manifest) << j.dump();
  EXPECT_EQ(run("verify --set data.n=400"), 7);
  EXPECT_EQ(run("verify " + (dir_ / "data/train.csv").string() + " --set data.n=400"), 0);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run_raw("no-such-command"), 2);
  EXPECT_EQ(run_raw("gen-data --no-such-flag"), 2);
  EXPECT_EQ(run_raw("gen-data -c /nonexistent/run.toml"), 3);
  EXPECT_EQ(run("gen-data --set stage9.x=1"), 2);
  EXPECT_EQ(run("gen-data --set data.kind=crimes --set data.path=/nonexistent.csv"), 3);
  EXPECT_EQ(run("train-ncm" + kTiny), 3) << "no dataset yet";
  ASSERT_EQ(run("gen-data --set data.n=400"), 0);
  EXPECT_EQ(run("train-ncm --set data.n=400 --set stage1.lr=1e300" + kTiny), 5);
  EXPECT_EQ(run("train-fair --set data.n=400"), 3) << "no stage-1 checkpoints";
  {
    std::ofstream out(dir_ / "data/normalization.json");
    out << "{\"not\": \"a sidecar\"}";
  }
  EXPECT_EQ(run("train-ncm --set data.n=400" + kTiny), 4);
}
