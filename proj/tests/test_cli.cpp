#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "cli.hpp"

using namespace protokd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// Exit status of the real binary, stdout and stderr discarded.
int run_binary(const std::string& args) {
  const std::string cmd = std::string(PROTOKD_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("protokd_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

const std::vector<std::string> kSmallData{"--n-base",     "8", "--n-val",       "5", "--n-novel",    "5",
                                          "--samples-per-class", "20", "--ambient-dim", "12", "--signal-dim", "4",
                                          "--shared-dim", "2"};

fs::path small_dataset(const fs::path& dir, const std::string& seed = "3") {
  std::vector<std::string> args{"datagen", "--seed", seed, "--out", dir.string()};
  args.insert(args.end(), kSmallData.begin(), kSmallData.end());
  const auto r = run_cli(args);
  EXPECT_EQ(r.code, 0) << r.err;
  return dir;
}

std::vector<std::string> csv_column(const fs::path& p, const std::string& name) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  std::stringstream hs(line);
  for (std::string f; std::getline(hs, f, ',');) header.push_back(f);
  const auto col = static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  std::vector<std::string> values;
  while (std::getline(in, line)) {
    std::vector<std::string> fields;
    std::stringstream ls(line);
    for (std::string f; std::getline(ls, f, ',');) fields.push_back(f);
    values.push_back(fields.at(col));
  }
  return values;
}

std::string meta_value(const fs::path& meta, const std::string& key) {
  std::ifstream in(meta);
  for (std::string line; std::getline(in, line);)
    if (line.rfind(key + " = ", 0) == 0) return line.substr(key.size() + 3);
  return {};
}

}  // namespace

TEST(CliDatagen, SameSeedIdenticalFiles) {
  const auto root = fresh_dir("datagen_twice");
  for (const char* sub : {"a", "b"}) {
    const auto r = run_cli({"datagen", "--seed", "7", "--out", (root / sub).string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("datagen: 10000 samples"), std::string::npos) << r.out;
  }
  for (const char* f : {"dataset.csv", "splits.csv", "metadata.txt"}) {
    ASSERT_TRUE(fs::exists(root / "a" / f)) << f;
    EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f)) << f;
  }
  EXPECT_NO_THROW(load_dataset(root / "a" / "dataset.csv", root / "a" / "splits.csv"));
}

TEST(CliDatagen, MissingOutIsUsageError) {
  EXPECT_EQ(run_cli({"datagen", "--seed", "7"}).code, 2);
  EXPECT_EQ(run_binary("datagen --seed 7"), 2);
  EXPECT_EQ(run_binary(""), 2);
  EXPECT_EQ(run_binary("frobnicate"), 2);
  EXPECT_EQ(run_binary("--help"), 0);
}

TEST(CliDatagen, InfeasibleSpecIsUsageError) {
  const auto dir = fresh_dir("infeasible");
  EXPECT_EQ(run_cli({"datagen", "--out", dir.string(), "--signal-dim", "30", "--shared-dim", "10"}).code, 2);
}

TEST(CliPretrain, ZeroEpochsEqualsFreshInit) {
  const auto data = small_dataset(fresh_dir("pre0_data"));
  const auto out = fresh_dir("pre0_out");
  const auto r = run_cli({"pretrain", "--data", data.string(), "--out", out.string(), "--epochs", "0", "--seed", "11",
                          "--hidden", "16,8"});
  ASSERT_EQ(r.code, 0) << r.err;
  const ModelParams expected = init_params({12, 16, 8}, 8, init_seed_for(11));
  EXPECT_EQ(load_checkpoint(out / "pretrain.ckpt"), expected);
  EXPECT_EQ(csv_column(out / "pretrain_log.csv", "epoch").size(), 0u);
}

TEST(CliPretrain, DefaultDatasetReachesHighTrainAccuracy) {
  const auto data = fresh_dir("pre_default_data");
  ASSERT_EQ(run_cli({"datagen", "--out", data.string()}).code, 0);
  const auto out = fresh_dir("pre_default_out");
  const auto r = run_cli({"pretrain", "--data", data.string(), "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto acc = csv_column(out / "pretrain_log.csv", "train_acc");
  ASSERT_EQ(acc.size(), 10u);
  EXPECT_GT(std::stod(acc.back()), 0.95);
}

TEST(CliPretrain, CorruptDatasetFailsWithLine) {
  const auto data = small_dataset(fresh_dir("corrupt"));
  {
    std::ofstream f(data / "dataset.csv", std::ios::app);
    f << "0,1.0,2.0\n";  // too few columns
  }
  const auto out = fresh_dir("corrupt_out");
  const auto r = run_cli({"pretrain", "--data", data.string(), "--out", out.string()});
  EXPECT_EQ(r.code, 1);
  // header + 18 classes * 20 samples, then the bad row
  EXPECT_NE(r.err.find("dataset.csv:362"), std::string::npos) << r.err;
  EXPECT_EQ(run_binary("pretrain --data " + data.string() + " --out " + out.string()), 1);
}

TEST(CliPretrain, MissingDataDirIsUsageError) {
  EXPECT_EQ(run_cli({"pretrain", "--data", "/nonexistent/protokd", "--out", "/tmp/x"}).code, 2);
  const auto empty = fresh_dir("empty_data");
  EXPECT_EQ(run_cli({"pretrain", "--data", empty.string(), "--out", "/tmp/x"}).code, 2);
}

class CliTrained : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new fs::path(small_dataset(fresh_dir("trained_data")));
    pre_ = new fs::path(fresh_dir("trained_pre"));
    const auto r = run_cli({"pretrain", "--data", data_->string(), "--out", pre_->string(), "--epochs", "3",
                            "--hidden", "16,8", "--seed", "2"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    delete data_;
    delete pre_;
  }

  static std::vector<std::string> meta_args(const fs::path& out) {
    return {"metatrain", "--data", data_->string(), "--init", (*pre_ / "pretrain.ckpt").string(), "--out",
            out.string(), "--epochs", "3", "--iters-per-epoch", "4", "--n-way", "5", "--val-episodes", "4",
            "--seed", "5"};
  }

  static fs::path* data_;
  static fs::path* pre_;
};
fs::path* CliTrained::data_ = nullptr;
fs::path* CliTrained::pre_ = nullptr;

TEST_F(CliTrained, ZeroLambdasLeaveDistillationColumnsZero) {
  const auto out = fresh_dir("meta_zero");
  auto args = meta_args(out);
  args.insert(args.end(), {"--lambda1", "0", "--lambda2", "0"});
  const auto r = run_cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* col : {"skl", "nnskl"}) {
    const auto v = csv_column(out / "metatrain_log.csv", col);
    ASSERT_EQ(v.size(), 3u);
    for (const auto& s : v) EXPECT_EQ(std::stod(s), 0.0) << col;
  }
  for (const char* f : {"teacher.ckpt", "final.ckpt"}) EXPECT_TRUE(fs::exists(out / f)) << f;
}

TEST_F(CliTrained, MetatrainRerunIsByteIdentical) {
  const auto root = fresh_dir("meta_twice");
  for (const char* sub : {"a", "b"}) {
    auto args = meta_args(root / sub);
    args.insert(args.end(), {"--checkpoint-every", "1"});
    ASSERT_EQ(run_cli(args).code, 0);
  }
  for (const char* f : {"metatrain_log.csv", "teacher.ckpt", "final.ckpt", "epoch_2.ckpt"})
    EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f)) << f;
}

TEST_F(CliTrained, LambdaSweepEmitsFiveRuns) {
  const auto out = fresh_dir("sweep");
  auto args = meta_args(out);
  args.insert(args.end(), {"--lambda-sweep", "0,0.5,1,2,4"});
  const auto r = run_cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  int runs = 0;
  for (const auto& e : fs::directory_iterator(out)) {
    EXPECT_TRUE(fs::exists(e.path() / "metatrain_log.csv")) << e.path();
    ++runs;
  }
  EXPECT_EQ(runs, 5);
  for (const char* d : {"lambda_0", "lambda_0.5", "lambda_1", "lambda_2", "lambda_4"}) EXPECT_TRUE(fs::is_directory(out / d)) << d;
  // the zero run has no distillation signal, the others do
  EXPECT_EQ(std::stod(csv_column(out / "lambda_0" / "metatrain_log.csv", "skl").back()), 0.0);
  EXPECT_GT(std::stod(csv_column(out / "lambda_4" / "metatrain_log.csv", "skl").back()), 0.0);
}

TEST_F(CliTrained, EvalWithTwoEpisodes) {
  const auto out = fresh_dir("eval2");
  const auto r = run_cli({"eval", "--data", data_->string(), "--checkpoint", (*pre_ / "pretrain.ckpt").string(),
                          "--episodes", "2", "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const double ci = std::stod(csv_column(out / "eval.csv", "ci95_halfwidth").at(0));
  const double acc = std::stod(csv_column(out / "eval.csv", "mean_acc").at(0));
  EXPECT_TRUE(std::isfinite(ci));
  EXPECT_GE(ci, 0.0);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  EXPECT_EQ(run_cli({"eval", "--data", data_->string(), "--checkpoint", (*pre_ / "pretrain.ckpt").string(),
                     "--episodes", "1"}).code,
            2);
}

TEST(CliEval, DefaultEpisodeCount) {
  cli::RunConfig cfg;
  std::ostringstream out, err;
  const auto data = small_dataset(fresh_dir("eval_default"));
  const fs::path ckpt = data / "m.ckpt";
  save_checkpoint(ckpt, init_params({12, 4}, 8, 1));
  ASSERT_EQ(cli::parse_args({"eval", "--data", data.string(), "--checkpoint", ckpt.string()}, cfg, out, err), -1)
      << err.str();
  EXPECT_EQ(cfg.eval.n_episodes, 2000);
}

TEST(CliSpectrum, RankTwoCheckpoint) {
  const auto data = small_dataset(fresh_dir("spec_data"));
  // two live directions, every unit kept positive by a large bias
  ModelParams p;
  Matrix w(4, 12);
  w(0, 0) = 1.0;
  w(1, 5) = -2.0;
  w(1, 6) = 0.5;
  p.extractor.emplace_back(std::move(w), Vector(4, 1000.0));
  p.head = LayerParams(8, 4);
  save_checkpoint(data / "rank2.ckpt", p);
  const auto out = fresh_dir("spec_out");
  const auto r = run_cli({"spectrum", "--data", data.string(), "--checkpoint", (data / "rank2.ckpt").string(), "--out",
                          out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("effective rank 2 "), std::string::npos) << r.out;
  EXPECT_EQ(csv_column(out / "spectrum.csv", "rank_index").size(), 4u);
  EXPECT_EQ(csv_column(out / "geometry.csv", "class_id").back(), "mean");
}

TEST(CliConfig, PrecedenceMatrix) {
  const auto root = fresh_dir("precedence");
  const fs::path file = root / "run.cfg";
  {
    std::ofstream f(file);
    f << "# file values\nn_base = 7\nsamples-per-class = 4\n";
  }
  struct Case {
    bool use_file, use_flag;
    std::string expected;
  };
  int i = 0;
  for (const Case& c : {Case{false, false, "64"}, Case{true, false, "7"}, Case{false, true, "9"}, Case{true, true, "9"}}) {
    const fs::path out = root / std::to_string(i++);
    std::vector<std::string> args{"datagen", "--out", out.string(), "--ambient-dim", "12"};
    if (c.use_file) args.insert(args.end(), {"--config", file.string()});
    if (c.use_flag) args.insert(args.end(), {"--n-base", "9"});
    const auto r = run_cli(args);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(meta_value(out / "metadata.txt", "n_base"), c.expected) << "file " << c.use_file << " flag " << c.use_flag;
    EXPECT_EQ(meta_value(out / "metadata.txt", "samples_per_class"), c.use_file ? "4" : "100");
    EXPECT_EQ(meta_value(out / "metadata.txt", "ambient_dim"), "12");
  }
}

TEST(CliConfig, UnknownKeyRejected) {
  const auto root = fresh_dir("unknown_key");
  {
    std::ofstream f(root / "bad.cfg");
    f << "n_base = 7\nwarp_factor = 9\n";
  }
  const auto r = run_cli({"datagen", "--out", (root / "o").string(), "--config", (root / "bad.cfg").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(root / "o" / "dataset.csv"));
  EXPECT_EQ(run_cli({"datagen", "--out", (root / "o").string(), "--warp-factor", "9"}).code, 2);
}
