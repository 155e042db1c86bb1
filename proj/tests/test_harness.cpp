#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "afan/commands.hpp"
#include "afan/config.hpp"
#include "afan/error.hpp"
#include "afan/eval.hpp"
#include "afan/rng.hpp"
#include "afan/trainer.hpp"

using namespace afan;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Record lines only (drop the leading config line).
std::string metrics_body(const std::string& path) {
  const std::string all = slurp(path);
  const size_t nl = all.find('\n');
  return all.substr(nl + 1);
}

}  // namespace

TEST_CASE("generators are deterministic and balanced") {
  for (const char* kind : {"blobs", "spirals", "shapes16"}) {
    Dataset a = gen_synthetic(kind, 100, 1);
    Dataset b = gen_synthetic(kind, 100, 1);
    INFO(kind);
    CHECK(a.inputs.values() == b.inputs.values());
    CHECK(a.labels == b.labels);
    Dataset c = gen_synthetic(kind, 100, 2);
    CHECK(a.inputs.values() != c.inputs.values());

    std::vector<int> counts(static_cast<size_t>(a.classes), 0);
    for (int l : a.labels) counts[static_cast<size_t>(l)]++;
    for (int cnt : counts) CHECK(cnt == 100 / a.classes);

    // tags partition the indices
    CHECK(a.indices_of(Split::kTrain).size() + a.indices_of(Split::kVal).size() +
              a.indices_of(Split::kTest).size() ==
          static_cast<size_t>(a.size()));
    a.validate();
  }
}

TEST_CASE("generator kinds have the documented shapes") {
  CHECK(gen_synthetic("blobs", 40, 3).inputs.shape() == Shape{40, 2});
  CHECK(gen_synthetic("spirals", 40, 3).inputs.shape() == Shape{40, 2});
  CHECK(gen_synthetic("shapes16", 40, 3).inputs.shape() == Shape{40, 1, 16, 16});
  CHECK(gen_synthetic("shapes16", 40, 3).classes == 4);
  CHECK_THROWS_AS(gen_synthetic("moons", 40, 3), DomainError);
  CHECK_THROWS_AS(gen_synthetic("blobs", 9, 3), DomainError);
}

TEST_CASE("csv vectors round-trip at full precision") {
  TempDir tmp("afan_csv_rt");
  Dataset ds = gen_synthetic("blobs", 50, 7);
  const std::string path = tmp.str() + "/d.csv";
  save_csv_vectors(ds, path);
  Dataset back = load_csv_vectors(path, ds.classes);
  CHECK(back.inputs.values() == ds.inputs.values());
  CHECK(back.labels == ds.labels);
  CHECK(back.inputs.shape() == ds.inputs.shape());
}

TEST_CASE("handcrafted csv parses to the expected shape") {
  TempDir tmp("afan_csv_hand");
  const std::string path = tmp.str() + "/hand.csv";
  {
    std::ofstream os(path);
    for (int i = 0; i < 10; ++i) os << 0.1 * i << "," << 0.5 << "," << 0.25 << "," << i % 2 << "\n";
  }
  Dataset ds = load_csv_vectors(path);
  CHECK(ds.inputs.shape() == Shape{10, 3});
  CHECK(ds.classes == 2);
}

TEST_CASE("malformed csv names the line") {
  TempDir tmp("afan_csv_bad");
  const std::string path = tmp.str() + "/bad.csv";
  {
    std::ofstream os(path);
    os << "0.1,0.2,0\n";
    os << "0.1,zap,1\n";
  }
  try {
    load_csv_vectors(path);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("raw gray images quantize but reload bit-stably") {
  TempDir tmp("afan_raw_rt");
  Dataset ds = gen_synthetic("shapes16", 30, 11);
  const std::string path = tmp.str() + "/d.bin";
  save_raw_gray(ds, path);
  Dataset back = load_raw_gray(path);
  REQUIRE(back.inputs.shape() == ds.inputs.shape());
  for (size_t i = 0; i < ds.inputs.values().size(); ++i)
    CHECK(std::abs(back.inputs.values()[i] - ds.inputs.values()[i]) <= 0.5 / 255.0 + 1e-12);
  // Re-saving the loaded dataset reproduces the file byte for byte.
  const std::string path2 = tmp.str() + "/d2.bin";
  save_raw_gray(back, path2);
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("raw gray label byte out of range names the offset") {
  TempDir tmp("afan_raw_bad");
  Dataset ds = gen_synthetic("shapes16", 12, 13);
  const std::string path = tmp.str() + "/d.bin";
  save_raw_gray(ds, path);
  {  // corrupt the first label byte (offset 20 + 256)
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(20 + 256);
    f.put(static_cast<char>(250));
  }
  try {
    load_raw_gray(path);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("250") != std::string::npos);
    CHECK(msg.find("offset 276") != std::string::npos);
  }
}

TEST_CASE("config parses dotted keys, fractions, and overrides") {
  Config c = Config::parse_text("# comment\ntrain.lr=0.1\nafan.epsilon=8/255\nmodel.arch=mlp\n");
  CHECK(c.get_num("train.lr", 0.0) == 0.1);
  CHECK(c.get_num("afan.epsilon", 0.0) == 8.0 / 255.0);
  c.set("train.lr", "0.05");
  CHECK(c.get_num("train.lr", 0.0) == 0.05);
  CHECK(c.get_str("model.arch", "") == "mlp");
  CHECK_THROWS_AS(Config::parse_text("not a key value line\n"), DataError);
  CHECK_THROWS_AS(c.get_bool("model.arch", false), DomainError);

  Config round = Config::parse_text(c.serialize());
  CHECK(round.serialize() == c.serialize());
}

TEST_CASE("resolve applies defaults and rejects unknown keys") {
  Config c;
  ExperimentConfig e = ExperimentConfig::resolve(c);
  CHECK(e.train.perturb.k == 3);
  CHECK(e.train.perturb.alpha_max == 0.5 / 255.0);
  CHECK(e.train.perturb.epsilon == 8.0 / 255.0);
  CHECK(e.train.perturb.lambda == 1.0);
  CHECK(e.train.momentum == 0.9);
  CHECK(e.train.weight_decay == 5e-4);
  CHECK(e.attack.steps == 20);
  CHECK(e.attack.alpha == 2.0 / 255.0);
  CHECK(e.train.val_fraction == 0.1);

  Config bad;
  bad.set("trian.lr", "0.1");
  CHECK_THROWS_AS(ExperimentConfig::resolve(bad), DomainError);
}

TEST_CASE("resolved config serializes every effective value") {
  Config c;
  c.set("train.lr", "0.25");
  ExperimentConfig e = ExperimentConfig::resolve(c);
  const std::string text = e.resolved().serialize();
  CHECK(text.find("train.lr=0.25") != std::string::npos);
  CHECK(text.find("afan.k=3") != std::string::npos);
  CHECK(text.find("seed=1") != std::string::npos);
  // Round-trips through the parser to the same resolution.
  ExperimentConfig again = ExperimentConfig::resolve(Config::parse_text(text));
  CHECK(again.train.lr0 == e.train.lr0);
  CHECK(again.train.perturb.epsilon == e.train.perturb.epsilon);
}

TEST_CASE("out root falls back to the environment") {
  setenv("AFAN_OUT", "/tmp/afan_env_out", 1);
  Config c;
  ExperimentConfig e = ExperimentConfig::resolve(c);
  CHECK(e.out_root == "/tmp/afan_env_out");
  c.set("out", "explicit");
  CHECK(ExperimentConfig::resolve(c).out_root == "explicit");
  unsetenv("AFAN_OUT");
}

TEST_CASE("seed derivation separates concerns and counters") {
  const uint64_t m = 42;
  CHECK(derive_seed(m, SeedDomain::kInit) == derive_seed(m, SeedDomain::kInit));
  CHECK(derive_seed(m, SeedDomain::kInit) != derive_seed(m, SeedDomain::kDataGen));
  CHECK(derive_seed(m, SeedDomain::kRun, 0) != derive_seed(m, SeedDomain::kRun, 1));
  CHECK(derive_seed(m, SeedDomain::kNoise) != derive_seed(m + 1, SeedDomain::kNoise));
}

TEST_CASE("cli maps error classes onto exit codes") {
  TempDir tmp("afan_cli_err");
  CHECK(run_cli({"train", "--bogus-flag"}) == kExitUsage);
  CHECK(run_cli({"train", "--set", "trian.lr=0.1", "--set", "out=" + tmp.str()}) == kExitUsage);
  CHECK(run_cli({"train", "--set", "data.kind=csv", "--set", "data.path=" + tmp.str() + "/nope.csv",
                 "--set", "out=" + tmp.str()}) == kExitData);
  // numeric failure: guaranteed divergence
  CHECK(run_cli({"train", "--set", "data.kind=blobs", "--set", "data.n=40", "--set",
                 "train.epochs=30", "--set", "train.lr=1e30", "--set", "train.warmup=0", "--set",
                 "out=" + tmp.str(), "--set", "run.name=div"}) == kExitNumeric);
}

TEST_CASE("cli train produces self-describing reproducible artifacts") {
  TempDir tmp("afan_cli_train");
  const std::vector<std::string> args = {
      "train",           "--set", "data.kind=blobs", "--set", "data.n=60",
      "--set",           "train.epochs=2",           "--set", "train.warmup=5",
      "--set",           "out=" + tmp.str(),         "--set", "run.name=a"};
  REQUIRE(run_cli(args) == kExitOk);
  const std::string dir = tmp.str() + "/a";
  CHECK(fs::exists(dir + "/checkpoint.afan"));
  CHECK(fs::exists(dir + "/checkpoint-final.afan"));
  CHECK(fs::exists(dir + "/config.resolved.txt"));
  const std::string metrics1 = slurp(dir + "/metrics.jsonl");
  CHECK(metrics1.find("\"config\"") != std::string::npos);
  CHECK(metrics1.find("\"l_clean\"") != std::string::npos);
  CHECK(slurp(dir + "/config.resolved.txt").find("seed=1") != std::string::npos);

  const std::string ckpt1 = slurp(dir + "/checkpoint.afan");
  REQUIRE(run_cli(args) == kExitOk);
  CHECK(slurp(dir + "/metrics.jsonl") == metrics1);
  CHECK(slurp(dir + "/checkpoint.afan") == ckpt1);
}

TEST_CASE("disabled augmentation writes identical records regardless of its config") {
  TempDir tmp("afan_cli_off");
  auto run = [&](const std::string& name, const std::string& k, const std::string& lambda) {
    REQUIRE(run_cli({"train", "--set", "data.kind=blobs", "--set", "data.n=60", "--set",
                     "train.epochs=2", "--set", "train.warmup=5", "--set", "afan.on=0", "--set",
                     "afan.k=" + k, "--set", "afan.lambda=" + lambda, "--set", "out=" + tmp.str(),
                     "--set", "run.name=" + name}) == kExitOk);
    return metrics_body(tmp.str() + "/" + name + "/metrics.jsonl");
  };
  CHECK(run("a", "1", "1") == run("b", "5", "0.25"));
}

TEST_CASE("cli eval at zero radius reports ra equal to sa") {
  TempDir tmp("afan_cli_eval");
  REQUIRE(run_cli({"train", "--set", "data.kind=blobs", "--set", "data.n=60", "--set",
                   "train.epochs=2", "--set", "train.warmup=5", "--set", "out=" + tmp.str(),
                   "--set", "run.name=m"}) == kExitOk);
  REQUIRE(run_cli({"eval", "--set", "data.kind=blobs", "--set", "data.n=60", "--set",
                   "attack.epsilon=0", "--set", "attack.steps=3", "--set", "out=" + tmp.str(),
                   "--set", "run.name=m"}) == kExitOk);
  const std::string report = slurp(tmp.str() + "/m/eval.json");
  // One sa and one ra entry at epsilon 0: values must match textually.
  const size_t sa_pos = report.find("\"sa\": ");
  REQUIRE(sa_pos != std::string::npos);
  const std::string sa_val = report.substr(sa_pos + 6, report.find_first_of(",\n", sa_pos + 6) - sa_pos - 6);
  const size_t ra_pos = report.find("\"ra\": ", report.find("\"epsilon\""));
  REQUIRE(ra_pos != std::string::npos);
  const std::string ra_val = report.substr(ra_pos + 6, report.find_first_of(",}\n", ra_pos + 6) - ra_pos - 6);
  CHECK(sa_val == ra_val);
}

TEST_CASE("cli ablate emits one table row per variant with mean and std") {
  TempDir tmp("afan_cli_abl");
  REQUIRE(run_cli({"ablate", "--set", "data.kind=blobs", "--set", "data.n=60", "--set",
                   "train.epochs=2", "--set", "train.warmup=5", "--set", "ablate.seeds=2", "--set",
                   "ablate.variants=baseline,afa,afan", "--set", "out=" + tmp.str(), "--set",
                   "run.name=t"}) == kExitOk);
  const std::string table = slurp(tmp.str() + "/t/table.txt");
  CHECK(table.find("baseline") != std::string::npos);
  CHECK(table.find("afa") != std::string::npos);
  CHECK(table.find("afan") != std::string::npos);
  CHECK(table.find("+-") != std::string::npos);
  CHECK(table.find("# seed=1") != std::string::npos);  // embedded config
  const std::string results = slurp(tmp.str() + "/t/results.jsonl");
  int lines = 0;
  for (char ch : results)
    if (ch == '\n') ++lines;
  CHECK(lines == 1 + 3 * 2);  // config + variants * seeds
}

TEST_CASE("cli landscape writes a matrix and a structured slice") {
  TempDir tmp("afan_cli_land");
  REQUIRE(run_cli({"train", "--set", "data.kind=blobs", "--set", "data.n=60", "--set",
                   "train.epochs=2", "--set", "train.warmup=5", "--set", "out=" + tmp.str(),
                   "--set", "run.name=l"}) == kExitOk);
  REQUIRE(run_cli({"landscape", "--set", "data.kind=blobs", "--set", "data.n=60", "--set",
                   "landscape.grid=5", "--set", "landscape.span=0.5", "--set", "out=" + tmp.str(),
                   "--set", "run.name=l"}) == kExitOk);
  const std::string mat = slurp(tmp.str() + "/l/slice_checkpoint.mat");
  int rows = 0;
  for (char ch : mat)
    if (ch == '\n') ++rows;
  CHECK(rows == 5);
  CHECK(slurp(tmp.str() + "/l/slice_checkpoint.json").find("\"center\"") != std::string::npos);
}

TEST_CASE("cli gen-data round-trips through the csv loader") {
  TempDir tmp("afan_cli_gen");
  REQUIRE(run_cli({"gen-data", "--set", "data.kind=blobs", "--set", "data.n=40", "--set",
                   "out=" + tmp.str(), "--set", "run.name=g"}) == kExitOk);
  Dataset train_ds = load_csv_vectors(tmp.str() + "/g/blobs_train.csv");
  Dataset test_ds = load_csv_vectors(tmp.str() + "/g/blobs_test.csv");
  Dataset direct = gen_synthetic("blobs", 40, 1);
  CHECK(train_ds.size() + test_ds.size() == direct.size());
  CHECK(train_ds.size() == static_cast<int64_t>(direct.indices_of(Split::kTrain).size()));
}

TEST_CASE("cli dump-features writes one file per branch and strength") {
  TempDir tmp("afan_cli_dump");
  REQUIRE(run_cli({"train", "--set", "data.kind=blobs", "--set", "data.n=60", "--set",
                   "train.epochs=1", "--set", "train.warmup=5", "--set", "out=" + tmp.str(),
                   "--set", "run.name=d"}) == kExitOk);
  REQUIRE(run_cli({"dump-features", "--set", "data.kind=blobs", "--set", "data.n=60", "--set",
                   "afan.k=2", "--set", "out=" + tmp.str(), "--set", "run.name=d"}) == kExitOk);
  const std::string dir = tmp.str() + "/d/features";
  CHECK(fs::exists(dir + "/batch0_clean.bin"));
  CHECK(fs::exists(dir + "/batch0_adv_1.bin"));
  CHECK(fs::exists(dir + "/batch0_adv_2.bin"));
  CHECK(fs::exists(dir + "/batch0_mix_1.bin"));
  CHECK(fs::exists(dir + "/batch0_mix_2.bin"));
  CHECK(fs::exists(dir + "/config.txt"));
}

TEST_CASE("spirals with wide separation train past 0.95 test accuracy") {
  SyntheticOptions opt;
  opt.noise = 0.01;
  Dataset data = gen_synthetic("spirals", 600, 3, opt);
  ModelSpec spec;
  spec.arch = "mlp";
  spec.input_dim = 2;
  spec.hidden = {32, 32};
  spec.classes = 2;
  TrainConfig cfg;
  cfg.afa_on = false;
  cfg.epochs = 60;
  cfg.batch_size = 32;
  cfg.lr0 = 0.1;
  cfg.warmup_iters = 50;
  cfg.milestone_epochs = {40};
  SplitModel m = SplitModel::build(spec, derive_seed(1, SeedDomain::kInit));
  TrainResult res = train(m, data, cfg);
  SplitModel best = SplitModel::build(spec, 0);
  best.load_state(res.best_state);
  CHECK(standard_accuracy(best, data) > 0.95);
}
