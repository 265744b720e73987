#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "tlrl/cli.hpp"

namespace fs = std::filesystem;
using namespace tlrl;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result tlrl_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json load_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("tlrl_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  std::string make_records(std::size_t n = 60, std::size_t features = 10) {
    const auto p = path("records.jsonl");
    const auto r = tlrl_run({"synth", "--samples", std::to_string(n), "--features", std::to_string(features), "--out", p});
    EXPECT_EQ(r.code, 0) << r.err;
    return p;
  }

  // Quick training run on tiny extractors and a narrow network.
  Result small_train(const std::string& records, const std::string& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"train",  "--records", records, "--out-dir", out,     "--folds", "2",
                                  "--epochs", "2",       "--stem", "16",       "--bottleneck", "4", "--backbone",
                                  "rp:8",   "--backbone", "rp:8"};
    args.insert(args.end(), extra.begin(), extra.end());
    return tlrl_run(args);
  }

  fs::path dir;
};

}  // namespace

TEST_F(Cli, SynthCountsAndDeterminism) {
  const auto r = tlrl_run({"synth", "--samples", "1000", "--features", "20", "--out", path("a.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("1000 records (500 ransomware, 500 benign)"), std::string::npos) << r.out;
  ASSERT_EQ(tlrl_run({"synth", "--samples", "1000", "--features", "20", "--out", path("b.jsonl")}).code, 0);
  EXPECT_EQ(slurp(path("a.jsonl")), slurp(path("b.jsonl")));
  ASSERT_EQ(tlrl_run({"--seed", "7", "synth", "--samples", "1000", "--features", "20", "--out", path("c.jsonl")}).code, 0);
  EXPECT_NE(slurp(path("a.jsonl")), slurp(path("c.jsonl")));

  const auto recs = cli::load_records(path("a.jsonl"));
  EXPECT_EQ(recs.size(), 1000u);
  EXPECT_EQ(recs.front().fields.size(), 20u);
}

TEST_F(Cli, SynthDefaultsToOutDir) {
  ASSERT_EQ(tlrl_run({"synth", "--samples", "10", "--out-dir", path("run")}).code, 0);
  EXPECT_TRUE(fs::exists(dir / "run" / "records.jsonl"));
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(tlrl_run({"synth", "--samples", "0", "--out", path("x.jsonl")}).code, 2);
  EXPECT_EQ(tlrl_run({"synth", "--balance", "1.5", "--out", path("x.jsonl")}).code, 2);
  EXPECT_EQ(tlrl_run({}).code, 2);
  EXPECT_EQ(tlrl_run({"bogus"}).code, 2);
  EXPECT_EQ(tlrl_run({"train", "--rl", "maybe"}).code, 2);
  EXPECT_EQ(tlrl_run({"train"}).code, 2);  // no dataset
  EXPECT_EQ(tlrl_run({"featurize"}).code, 2);
  EXPECT_EQ(tlrl_run({"featurize", "--records", path("missing.jsonl")}).code, 2);
  EXPECT_EQ(tlrl_run({"--config", path("missing.json"), "synth"}).code, 2);
  EXPECT_EQ(tlrl_run({"--help"}).code, 0);
}

TEST_F(Cli, BadInputFilesExitThree) {
  {
    std::ofstream f(path("bad.jsonl"));
    f << "{\"id\": \"a\", \"label\": 1, \"features\": {\"x\": 1}}\n{not json\n";
  }
  const auto r = tlrl_run({"featurize", "--records", path("bad.jsonl"), "--out", path("e.tlrl")});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("line 2"), std::string::npos) << r.err;

  {
    std::ofstream f(path("bad.tlrl"), std::ios::binary);
    f << "TLRLEMB1garbage";
  }
  EXPECT_EQ(tlrl_run({"train", "--embeddings", path("bad.tlrl"), "--out-dir", path("o")}).code, 3);
}

TEST_F(Cli, FeaturizeDimensions) {
  const auto recs = make_records(12, 10);
  auto r = tlrl_run({"featurize", "--records", recs, "--backbone", "rp:64", "--out", path("small.tlrl")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(backbones::read_embeddings(path("small.tlrl")).dim, 64u);

  r = tlrl_run({"featurize", "--records", recs, "--out", path("full.tlrl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto full = backbones::read_embeddings(path("full.tlrl"));
  EXPECT_EQ(full.dim, 3328u);
  EXPECT_EQ(full.rows, 12u);
  EXPECT_NE(r.out.find(harness::fingerprint_hex(backbones::fingerprint(full))), std::string::npos);

  r = tlrl_run({"featurize", "--records", recs, "--no-imaging", "--out", path("raw.tlrl")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(backbones::read_embeddings(path("raw.tlrl")).dim, 10u);
}

TEST_F(Cli, FeaturizeMatchesLibrary) {
  const auto recs = make_records(20, 10);
  const auto r = tlrl_run({"featurize", "--records", recs, "--backbone", "rp:32:5", "--backbone", "rp:16", "--out",
                           path("e.tlrl"), "--dump-images", "3", "--out-dir", path("run")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto got = backbones::read_embeddings(path("e.tlrl"));

  cli::RunConfig c;
  c.backbones = {"rp:32:5", "rp:16"};
  const harness::Featurizer f(cli::featurizer_config(c));
  EXPECT_EQ(f.config().backbones[0].seed, 5u);
  const auto want = harness::featurize_records(cli::load_records(recs), f, nullptr);
  EXPECT_EQ(got.values, want.values);
  EXPECT_EQ(got.labels, want.labels);

  std::size_t images = 0;
  for (const auto& e : fs::directory_iterator(dir / "run" / "images")) images += e.path().extension() == ".tlim";
  EXPECT_EQ(images, 3u);
}

TEST_F(Cli, TrainWritesReportAndEchoesConfig) {
  const auto recs = make_records();
  const auto r = small_train(recs, path("run"));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* name : {"accuracy", "precision", "recall", "f1", "auc"})
    EXPECT_NE(r.out.find(name), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("TP="), std::string::npos);

  const auto rep = load_json(dir / "run" / "report.json");
  const auto& cfg = rep["config"];
  EXPECT_EQ(rep["seed"], 42);
  EXPECT_EQ(cfg["cv"]["folds"], 2);
  EXPECT_EQ(cfg["model"]["epochs"], 2);
  EXPECT_EQ(cfg["model"]["stem_width"], 16);
  EXPECT_EQ(cfg["model"]["input_dim"], 16);
  EXPECT_EQ(cfg["model"]["batch_size"], 32);
  EXPECT_EQ(cfg["model"]["learning_rate"], 1e-3);
  EXPECT_EQ(cfg["agent"]["alpha"], 0.1);
  EXPECT_EQ(cfg["agent"]["gamma"], 0.9);
  EXPECT_EQ(cfg["agent"]["epsilon0"], 1.0);
  EXPECT_EQ(cfg["agent"]["epsilon_decay"], 0.99);
  EXPECT_EQ(cfg["agent"]["actions"], json({0.25, 0.5, 1.0, 1.25, 1.5}));
  EXPECT_EQ(cfg["dataset"]["records"], recs);
  EXPECT_EQ(cfg["featurization"]["backbones"].size(), 2u);
  EXPECT_EQ(rep["folds"].size(), 2u);
  std::size_t total = 0;
  for (const auto& f : rep["folds"]) total += f["validation_size"].get<std::size_t>();
  EXPECT_EQ(total, 60u);
  for (const char* f : {"roc_points.csv", "fold_metrics.csv", "confusion.csv", "timings.csv", "qtable_fold0.csv"})
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  EXPECT_FALSE(fs::exists(dir / "run" / "model_fold0.tlnn"));
}

TEST_F(Cli, RlSwitchOnlyChangesAgentBlock) {
  const auto recs = make_records();
  ASSERT_EQ(small_train(recs, path("on"), {"--rl", "on"}).code, 0);
  ASSERT_EQ(small_train(recs, path("off"), {"--rl", "off", "--save-models"}).code, 0);
  auto on = load_json(dir / "on" / "report.json");
  auto off = load_json(dir / "off" / "report.json");
  EXPECT_TRUE(off["config"]["agent"].is_null());
  EXPECT_TRUE(on["config"]["agent"].is_object());
  on["config"].erase("agent");
  off["config"].erase("agent");
  EXPECT_EQ(on["config"], off["config"]);
  EXPECT_EQ(on["dataset_fingerprint"], off["dataset_fingerprint"]);
  EXPECT_FALSE(fs::exists(dir / "off" / "qtable_fold0.csv"));
  EXPECT_TRUE(fs::exists(dir / "off" / "model_fold1.tlnn"));
  for (const auto& f : off["folds"]) EXPECT_EQ(f["mean_sample_weight"], 1.0);
}

TEST_F(Cli, TrainFromEmbeddings) {
  const auto recs = make_records(40, 10);
  ASSERT_EQ(tlrl_run({"featurize", "--records", recs, "--backbone", "rp:12", "--out", path("e.tlrl")}).code, 0);
  const auto r = tlrl_run({"train", "--embeddings", path("e.tlrl"), "--out-dir", path("run"), "--folds", "2",
                           "--epochs", "1", "--model", "logreg"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = load_json(dir / "run" / "report.json");
  EXPECT_EQ(rep["config"]["model"]["input_dim"], 12);
  EXPECT_EQ(rep["config"]["model"]["kind"], "logreg");
  EXPECT_TRUE(rep["config"]["featurization"].is_null());
  EXPECT_EQ(rep["dataset_fingerprint"],
            harness::fingerprint_hex(backbones::fingerprint(backbones::read_embeddings(path("e.tlrl")))));
}

TEST_F(Cli, CompareDeltas) {
  const auto recs = make_records();
  ASSERT_EQ(small_train(recs, path("a")).code, 0);
  ASSERT_EQ(small_train(recs, path("b"), {"--rl", "off"}).code, 0);

  auto r = tlrl_run({"compare", path("a"), path("a"), "--out", path("self.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto self = cli::compare_reports(cli::read_report(path("a")), cli::read_report(path("a")));
  EXPECT_EQ(self.size(), 5u * (2 + 2));
  for (const auto& row : self) {
    if (row.delta) {
      EXPECT_EQ(*row.delta, 0.0) << row.scope << ' ' << row.metric;
    }
  }

  r = tlrl_run({"compare", path("a/report.json"), path("b"), "--out", path("ab.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto a = load_json(dir / "a" / "report.json");
  const auto b = load_json(dir / "b" / "report.json");
  std::ifstream csv(path("ab.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "scope,metric,baseline,candidate,delta");
  std::size_t checked = 0;
  while (std::getline(csv, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (cells.size() < 5) continue;  // undefined metric
    const json* ma;
    const json* mb;
    if (cells[0] == "pooled") {
      ma = &a["aggregate"]["metrics"][cells[1]];
      mb = &b["aggregate"]["metrics"][cells[1]];
    } else if (cells[0] == "mean") {
      ma = &a["fold_summary"][cells[1]]["mean"];
      mb = &b["fold_summary"][cells[1]]["mean"];
    } else {
      const auto f = std::stoul(cells[0]);
      ma = &a["folds"][f]["metrics"][cells[1]];
      mb = &b["folds"][f]["metrics"][cells[1]];
    }
    EXPECT_NEAR(std::stod(cells[4]), mb->get<double>() - ma->get<double>(), 1e-15) << line;
    ++checked;
  }
  EXPECT_GT(checked, 10u);
}

TEST_F(Cli, CompareRefusesDifferentDatasets) {
  const auto recs = make_records();
  ASSERT_EQ(small_train(recs, path("a")).code, 0);
  const auto other = path("other.jsonl");
  ASSERT_EQ(tlrl_run({"--seed", "9", "synth", "--samples", "60", "--features", "10", "--out", other}).code, 0);
  ASSERT_EQ(small_train(other, path("b")).code, 0);
  const auto r = tlrl_run({"compare", path("a"), path("b")});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("fingerprint"), std::string::npos) << r.err;
  {
    std::ofstream f(path("junk.json"));
    f << "{\"hello\": 1}";
  }
  EXPECT_EQ(tlrl_run({"compare", path("a"), path("junk.json")}).code, 3);
}

TEST_F(Cli, QDumpSummarizesAgent) {
  const auto recs = make_records();
  ASSERT_EQ(small_train(recs, path("run")).code, 0);
  const auto r = tlrl_run({"qdump", path("run"), "--fold", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = load_json(dir / "run" / "report.json");
  const auto n = rep["folds"][1]["train_size"].get<std::size_t>();
  EXPECT_NE(r.out.find(std::to_string(n) + " states"), std::string::npos) << r.out;

  std::ifstream q(dir / "run" / "qtable_fold1.csv");
  const auto s = cli::summarize_qtable(q);
  EXPECT_EQ(s.rows, n);
  std::size_t chosen = 0;
  for (auto c : s.action_counts) chosen += c;
  EXPECT_EQ(chosen, n);
  EXPECT_NEAR(s.mean_weight, rep["folds"][1]["mean_sample_weight"].get<double>(), 1e-12);
  EXPECT_GE(s.max_q, 0.0);
  EXPECT_LE(s.max_q, 1.0 / (1.0 - 0.9));

  EXPECT_EQ(tlrl_run({"qdump", path("run"), "--fold", "7"}).code, 2);
  {
    std::ofstream f(path("bad.csv"));
    f << "index,q0,q1,q2,q3,q4,action,weight\n0,1,2\n";
  }
  EXPECT_EQ(tlrl_run({"qdump", path("bad.csv")}).code, 3);
}

TEST_F(Cli, ConfigPrecedence) {
  const auto recs = make_records();
  {
    std::ofstream f(path("cfg.json"));
    f << json{{"seed", 11},
              {"dataset", {{"records", recs}}},
              {"cv", {{"folds", 3}}},
              {"featurization", {{"backbones", {"rp:8", "rp:8"}}}},
              {"model", {{"epochs", 1}, {"stem_width", 16}, {"bottleneck_width", 4}}},
              {"agent", {{"alpha", 0.5}}}}
             .dump();
  }
  auto r = tlrl_run({"--config", path("cfg.json"), "train", "--folds", "2", "--out-dir", path("run"), "--gamma", "0.5"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = load_json(dir / "run" / "report.json");
  EXPECT_EQ(rep["seed"], 11);
  EXPECT_EQ(rep["config"]["cv"]["folds"], 2);   // flag beats file
  EXPECT_EQ(rep["config"]["model"]["epochs"], 1);  // file beats default
  EXPECT_EQ(rep["config"]["agent"]["alpha"], 0.5);
  EXPECT_EQ(rep["config"]["agent"]["gamma"], 0.5);
  EXPECT_EQ(rep["config"]["agent"]["epsilon0"], 1.0);

  // a report replays as a config and reproduces the run
  r = tlrl_run({"--config", path("run/report.json"), "train", "--out-dir", path("replay")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(harness::strip_nondeterministic(load_json(dir / "replay" / "report.json")),
            harness::strip_nondeterministic(rep));

  {
    std::ofstream f(path("typo.json"));
    f << R"({"modle": {}})";
  }
  EXPECT_EQ(tlrl_run({"--config", path("typo.json"), "train"}).code, 2);
}

TEST(CliParsing, BackboneSpecs) {
  EXPECT_EQ(cli::parse_backbone("rp:64:9", 1, 0).dim, 64u);
  EXPECT_EQ(cli::parse_backbone("rp:64:9", 1, 0).seed, 9u);
  EXPECT_EQ(cli::parse_backbone("rp:64", 1, 0).seed, derive_seed(1, 0, "backbone"));
  EXPECT_NE(cli::parse_backbone("rp:64", 1, 0).seed, cli::parse_backbone("rp:64", 1, 1).seed);
  for (const char* bad : {"rp", "rp:0", "cnn:64", "rp:x", "rp:64:y"}) EXPECT_THROW(cli::parse_backbone(bad, 1, 0), ConfigError) << bad;
}
