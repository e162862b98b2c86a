#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "cli_runner.hpp"
#include "hvcm/feature_store.hpp"
#include "hvcm/synthetic.hpp"
#include "oracles.hpp"

using namespace hvcm;

namespace {

/// Column `col` of a headed CSV as numbers.
std::vector<double> column(const std::string& csv, std::size_t col) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  std::vector<double> out;
  while (std::getline(in, line)) {
    const auto fields = detail::split_fields(line);
    out.push_back(std::stod(std::string(fields.at(col))));
  }
  return out;
}

void write_blobs(const cli::Sandbox& box) {
  const auto r = box.run("synth --train train.hvcf --test test.hvcf --ood ood.hvcf --per-class 60 --ood-count 90 --seed 5");
  ASSERT_EQ(r.code, 0) << r.err;
}

}  // namespace

TEST(Cli, FitScoreEvalOnBlobs) {
  cli::Sandbox box("fit_score");
  write_blobs(box);
  auto r = box.run("fit --features train.hvcf --groups 2 --weights uniform --out m.hvcm");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("class=0 n=60"), std::string::npos);
  const auto model = load_features(box.path("train.hvcf"));
  EXPECT_EQ(model.n, 180u);

  ASSERT_EQ(box.run("score --model m.hvcm --features train.hvcf --out train.csv --per-class").code, 0);
  const auto train_csv = box.read("train.csv");
  EXPECT_EQ(train_csv.substr(0, train_csv.find('\n')), "index,score,argmax_class,class_0,class_1,class_2");
  for (double s : column(train_csv, 1)) EXPECT_LE(s, 0.0);

  ASSERT_EQ(box.run("score --model m.hvcm --features test.hvcf --out ind.csv").code, 0);
  ASSERT_EQ(box.run("score --model m.hvcm --features ood.hvcf --out ood.csv").code, 0);
  r = box.run("eval --ind ind.csv --ood ood.csv --sweep 10 --out report.json --dump merged.csv");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = nlohmann::json::parse(box.read("report.json"));
  EXPECT_EQ(report["auroc"].get<double>(), 1.0);
  EXPECT_EQ(report["fpr95"].get<double>(), 0.0);
  EXPECT_EQ(report["sweep"].size(), 10u);
  EXPECT_EQ(report["auroc"].get<double>(),
            oracle::pairwise_auroc(column(box.read("ind.csv"), 1), column(box.read("ood.csv"), 1)));
  EXPECT_EQ(box.read("merged.csv").substr(0, 13), "score,is_ind\n");

  r = box.run("eval --ind ind.csv --ood ind.csv");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(nlohmann::json::parse(r.out)["auroc"].get<double>(), 0.5);
}

TEST(Cli, OneClassModelArgmaxIsZero) {
  cli::Sandbox box("one_class");
  FeatureDataset ds;
  ds.has_labels = true;
  ds.c_max = 1;
  std::mt19937_64 rng(1);
  synthetic::append_blob(ds, Eigen::Vector2d(1.0, 2.0), 1.0, 40, 0, rng);
  save_features(ds, box.path("one.hvcf"));
  ASSERT_EQ(box.run("fit --features one.hvcf --groups 1 --out m.hvcm").code, 0);
  ASSERT_EQ(box.run("synth --train blobs.hvcf --per-class 10").code, 0);
  ASSERT_EQ(box.run("score --model m.hvcm --features blobs.hvcf --out s.csv").code, 0);
  for (double c : column(box.read("s.csv"), 2)) EXPECT_EQ(c, 0.0);
}

TEST(Cli, ClassifyAndRankOod) {
  cli::Sandbox box("classify_rank");
  write_blobs(box);
  ASSERT_EQ(box.run("fit --features train.hvcf --groups 1 --out m.hvcm").code, 0);
  ASSERT_EQ(box.run("classify --model m.hvcm --features test.hvcf --out preds.csv").code, 0);
  EXPECT_EQ(box.read("preds.csv").substr(0, box.read("preds.csv").find('\n')), "index,predicted_class");

  auto r = box.run("rank-ood --ind-model m.hvcm --candidates test.hvcf --bins 1 --out bins.json");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto bins = nlohmann::json::parse(box.read("bins.json"));
  ASSERT_EQ(bins["bins"].size(), 1u);
  EXPECT_EQ(bins["bins"][0].size(), 3u);

  r = box.run("rank-ood --ind-model m.hvcm --candidates test.hvcf --bins 9 --out bins.json");
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, TrainToyHalvesLossAndClassifies) {
  cli::Sandbox box("train_toy");
  ASSERT_EQ(box.run("synth --train train.hvcf --test test.hvcf --per-class 100 --seed 0").code, 0);
  auto r = box.run("--deterministic --seed 0 train-toy --features train.hvcf --log run.jsonl --out m.hvcm");
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream log(box.read("run.jsonl"));
  std::string line;
  std::vector<double> losses;
  while (std::getline(log, line)) losses.push_back(nlohmann::json::parse(line)["loss_total"].get<double>());
  ASSERT_EQ(losses.size(), 200u);
  double tail = 0.0;
  for (std::size_t i = losses.size() - 10; i < losses.size(); ++i) tail += losses[i] / 10.0;
  EXPECT_LT(tail, 0.5 * losses.front());

  r = box.run("classify --model m.hvcm --features test.hvcf --out preds.csv");
  ASSERT_EQ(r.code, 0);
  const auto pos = r.out.find("accuracy=");
  ASSERT_NE(pos, std::string::npos);
  EXPECT_GE(std::stod(r.out.substr(pos + 9)), 0.99);
}

TEST(Cli, ExitCodes) {
  cli::Sandbox box("exit_codes");
  write_blobs(box);
  EXPECT_EQ(box.run("fit --features train.hvcf --groups 3 --out m.hvcm").code, 2);   // d=2
  EXPECT_EQ(box.run("fit --features missing.hvcf --out m.hvcm").code, 2);
  EXPECT_EQ(box.run("fit --features train.hvcf --bogus 1 --out m.hvcm").code, 2);
  EXPECT_EQ(box.run("score --model m.hvcm").code, 2);

  box.write("bad.json", R"({"tau_s": 0})");
  const auto r = box.run("train-toy --features train.hvcf --config bad.json --out t.hvcm");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("tau_s"), std::string::npos);
  box.write("unknown.json", R"({"tau": 1})");
  EXPECT_EQ(box.run("train-toy --features train.hvcf --config unknown.json --out t.hvcm").code, 2);

  // Exploding learning rate: training diverges.
  box.write("hot.json", R"({"learning_rate": 1e300, "epochs": 3})");
  EXPECT_EQ(box.run("train-toy --features train.hvcf --config hot.json --out t.hvcm").code, 4);

  // Corrupted header.
  auto bytes = box.read("train.hvcf");
  bytes[0] = 'X';
  box.write("corrupt.hvcf", bytes);
  const auto bad = box.run("validate --features corrupt.hvcf");
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("bad magic"), std::string::npos);

  // Dimension mismatch between model and features.
  ASSERT_EQ(box.run("fit --features train.hvcf --groups 1 --out m.hvcm").code, 0);
  box.write("wide.csv", "label,a,b,c\n0,1,2,3\n");
  EXPECT_EQ(box.run("score --model m.hvcm --features wide.csv --out s.csv").code, 2);

  box.write("empty.csv", "index,score,argmax_class\n");
  ASSERT_EQ(box.run("score --model m.hvcm --features test.hvcf --out s.csv").code, 0);
  EXPECT_EQ(box.run("eval --ind s.csv --ood empty.csv").code, 2);
}

TEST(Cli, DegenerateFitExitCode) {
  cli::Sandbox box("degenerate");
  // Exactly collinear rows: a rank-one covariance a tiny fixed ridge cannot repair.
  box.write("flat.csv", "label,a,b\n0,1e30,1e30\n0,2e30,2e30\n0,3e30,3e30\n");
  EXPECT_EQ(box.run("fit --features flat.csv --groups 1 --ridge 1e-300 --out m.hvcm").code, 3);
}

TEST(Cli, RerunsAreByteIdentical) {
  cli::Sandbox a("det_a"), b("det_b");
  for (const auto* box : {&a, &b}) {
    write_blobs(*box);
    ASSERT_EQ(box->run("--deterministic --seed 7 train-toy --features train.hvcf --log run.jsonl --out m.hvcm").code, 0);
    ASSERT_EQ(box->run("--deterministic score --model m.hvcm --features test.hvcf --out s.csv --per-class").code, 0);
  }
  for (const auto* file : {"train.hvcf", "run.jsonl", "m.hvcm", "s.csv"}) {
    EXPECT_EQ(a.read(file), b.read(file)) << file;
  }
}
