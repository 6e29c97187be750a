#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include <json.hpp>
#include "rnntlab/experiment.h"

using namespace rnntlab;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(# tiny
[experiment]
stages = synth, vocab, pretrain, train, decode, rescore, adapt, eval
seed = 3

[synth]
train_utts = 24
test_utts = 6
adapt_utts = 8
new_dev_utts = 6
new_test_utts = 6
lm_text_utts = 30
vocab_size = 30

[train]
arch = 8p4x1
epochs = 1
pretrain_epochs = 1

[adapt]
epochs = 1

[lm]
lm_hidden = 8
epochs = 1

[decode]
beam = 2
)";

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rnntlab_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig c = parse_experiment_config(kTiny);
  c.out = out;
  return c;
}

std::string config_error(const std::string& text) {
  try {
    parse_experiment_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("config values reach the lab settings") {
  const ExperimentConfig c = parse_experiment_config(kTiny);
  CHECK(c.seed == 3);
  CHECK(c.stages.size() == all_stages().size());
  CHECK(c.lab.train_utts == 24);
  CHECK(c.lab.vocab_size == 30);
  CHECK(c.lab.train.arch.cells == 8);
  CHECK(c.lab.train.arch.proj == 4);
  CHECK(c.lab.train.arch.layers == 1);
  CHECK(c.lab.adapt.arch == c.lab.train.arch);
  CHECK(c.lab.train.seed == 3);
  CHECK(c.lab.adapt.seed == 3);
  CHECK(c.lab.lm.seed == 3);
  CHECK(c.lab.lm.lm_hidden == 8);
  CHECK(c.lab.beam == 2);

  const ExperimentConfig d = parse_experiment_config("");
  CHECK(d.stages == std::vector<std::string>{"synth", "vocab", "train", "decode", "eval"});
  CHECK(d.seed == 1);
}

TEST_CASE("config errors") {
  CHECK(config_error("[bogus]\nx = 1\n").find("config line 1") != std::string::npos);
  CHECK(config_error("[train]\nepochs = 2\n[bogus]\n") != "");
  CHECK(config_error("[bogus]\nx = 1\n").find("unknown section") != std::string::npos);
  CHECK(config_error("[train]\nepoch = 3\n").find("unknown key 'epoch'") != std::string::npos);
  CHECK(config_error("[train]\nepochs = three\n") != "");
  CHECK(config_error("[train]\nseed = 4\n").find("[experiment]") != std::string::npos);
  CHECK(config_error("[experiment]\nstages = synth, fly\n").find("fly") != std::string::npos);
  CHECK(config_error("epochs = 3\n") != "");
  CHECK(config_error("[train\n") != "");
  CHECK(config_error("[train]\nepochs\n") != "");
  CHECK(config_error("[adapt]\nmix_ratio = 1.5\n") != "");
  CHECK(config_error("[adapt]\nmix_ratio = 1\n") == "");
  CHECK(config_error("[adapt]\nscope = nothing\n") != "");
  CHECK_THROWS_AS(load_experiment_config("/nonexistent/rnntlab.ini"), ConfigError);
}

TEST_CASE("config hash ignores layout and tracks content") {
  const auto a = parse_experiment_config("[train]\nepochs = 3\nlr = 0.01\n[experiment]\nseed = 2\n");
  const auto b = parse_experiment_config("# note\n[experiment]\nseed=2\n\n[train]\n  lr=0.01   \nepochs=3 # c\n");
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 16);
  CHECK(a.hash() != parse_experiment_config("[train]\nepochs = 4\nlr = 0.01\n[experiment]\nseed = 2\n").hash());
  auto c = a;
  c.set_seed(9);
  CHECK(c.hash() != a.hash());
  CHECK(c.lab.train.seed == 9);
}

TEST_CASE("full run, resume and determinism") {
  const fs::path out1 = fresh_dir("run1"), out2 = fresh_dir("run2");
  std::ostringstream log1;
  run_experiment(tiny(out1), log1);
  for (const char* f : {"vocab.txt", "pretrain.ckpt", "model.ckpt", "metrics.csv", "nbest_test.csv",
                        "nbest_new_test.csv", "lm.ckpt", "lambda.csv", "adapted.ckpt", "report.csv",
                        "histogram.csv", "manifest.json", "data/lm_text.txt", "data/train/index.tsv"})
    CHECK_MESSAGE(fs::exists(out1 / f), f);

  const std::string report = slurp(out1 / "report.csv");
  CHECK(report.rfind("model,test_set,wer,", 0) == 0);
  CHECK(report.find("\nbaseline,test,") != std::string::npos);
  CHECK(report.find("\nbaseline,new_test,") != std::string::npos);
  CHECK(report.find("\nrescored_lambda_") != std::string::npos);
  CHECK(report.find("\nadapted_prediction_and_joint,new_test,") != std::string::npos);

  std::ifstream mf(out1 / "manifest.json");
  const auto manifest = nlohmann::json::parse(mf);
  CHECK(manifest.at("config_hash") == tiny(out1).hash());
  CHECK(manifest.at("completed").size() == all_stages().size());

  std::ostringstream again;
  run_experiment(tiny(out1), again);
  CHECK(again.str().find("train: up to date") != std::string::npos);
  CHECK(again.str().find("eval: up to date") != std::string::npos);

  std::ostringstream log2;
  run_experiment(tiny(out2), log2);
  CHECK(log1.str() == log2.str());
  for (const char* f : {"report.csv", "histogram.csv", "metrics.csv", "nbest_test.csv", "nbest_new_test.csv",
                        "lambda.csv", "vocab.txt", "model.ckpt"})
    CHECK_MESSAGE(slurp(out1 / f) == slurp(out2 / f), f);

  // A different seed invalidates the manifest and retrains.
  auto reseeded = tiny(out2);
  reseeded.set_seed(4);
  reseeded.stages = {"train"};
  std::ostringstream log3;
  run_experiment(reseeded, log3);
  CHECK(log3.str().find("up to date") == std::string::npos);
  CHECK(slurp(out1 / "model.ckpt") != slurp(out2 / "model.ckpt"));

  fs::remove_all(out1);
  fs::remove_all(out2);
}

TEST_CASE("missing inputs name the stage") {
  const fs::path out = fresh_dir("missing");
  auto c = tiny(out);
  c.stages = {"synth", "vocab"};
  std::ostringstream log;
  run_experiment(c, log);
  c.stages = {"decode"};
  try {
    run_experiment(c, log);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "decode");
    CHECK(std::string(e.what()).find("model.ckpt") != std::string::npos);
  }
  c.out.clear();
  CHECK_THROWS_AS(run_experiment(c, log), ConfigError);
  fs::remove_all(out);
}
