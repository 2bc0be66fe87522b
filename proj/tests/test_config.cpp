#include <doctest.h>

#include <filesystem>

#include "bag/config.hpp"

using namespace bag;

TEST_CASE("parse -> serialize -> parse is the identity") {
  std::stringstream in(
      "task = marked\n"
      "seq_len = 48\n"
      "n_values = 5\n"
      "learning_rate = 0.00029999999999999997\n"
      "seeds = 3,5\n"
      "budget_lo = 0.2\n"
      "# a comment line\n"
      "epochs = 12  # trailing comment\n");
  RunConfig a = RunConfig::parse(in);
  CHECK(a.seq_len == 48);
  CHECK(a.n_values == 5);
  CHECK(a.epochs == 12);
  CHECK(a.seeds == std::vector<uint64_t>{3, 5});
  CHECK(a.lambda == 0.02);  // untouched defaults survive

  std::string text = a.serialize();
  std::stringstream round(text);
  RunConfig b = RunConfig::parse(round);
  CHECK(b.serialize() == text);
  CHECK(b.learning_rate == a.learning_rate);
  CHECK(b.seeds == a.seeds);
  CHECK(b.data_seeds == a.data_seeds);
}

TEST_CASE("unknown keys are rejected with origin and line number") {
  std::stringstream in("seq_len = 32\nlr = 0.1\n");
  try {
    RunConfig::parse(in, "run.cfg");
    FAIL("expected a parse error");
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    CHECK(msg.find("run.cfg:2") != std::string::npos);
    CHECK(msg.find("lr") != std::string::npos);
  }
}

TEST_CASE("malformed lines and bad values carry line numbers") {
  std::stringstream bad_line("seq_len 32\n");
  CHECK_THROWS_WITH_AS(RunConfig::parse(bad_line, "x"), doctest::Contains("x:1"),
                       std::runtime_error);
  std::stringstream bad_value("epochs = soon\n");
  CHECK_THROWS_WITH_AS(RunConfig::parse(bad_value, "y"), doctest::Contains("y:1"),
                       std::runtime_error);
  std::stringstream bad_seeds("seeds = ,\n");
  CHECK_THROWS_AS(RunConfig::parse(bad_seeds), std::runtime_error);
}

TEST_CASE("missing file is an error; save/load round trip works") {
  CHECK_THROWS_AS(RunConfig::load("/nonexistent/run.cfg"), std::runtime_error);
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "bag_config_test";
  fs::create_directories(dir);
  RunConfig a;
  a.task = "csv";
  a.csv_train = "train.csv";
  a.budget_hi = 0.9;
  std::string path = (dir / "run.cfg").string();
  a.save(path);
  RunConfig b = RunConfig::load(path);
  CHECK(b.serialize() == a.serialize());
  fs::remove_all(dir);
}

TEST_CASE("adapters forward the right fields") {
  RunConfig c;
  c.hidden = 64;
  c.layers = 3;
  c.heads = 8;
  c.seq_len = 32;
  ModelConfig mc = c.model_config(1000, 4);
  CHECK(mc.vocab_size == 1000);
  CHECK(mc.num_classes == 4);
  CHECK(mc.hidden == 64);
  CHECK(mc.layers == 3);
  CHECK(mc.heads == 8);
  CHECK(mc.seq_len == 32);

  c.lambda = 0.07;
  c.epochs = 5;
  TrainConfig tc = c.train_config(13);
  CHECK(tc.lambda == 0.07);
  CHECK(tc.epochs == 5);
  CHECK(tc.seed == 13);
  tc.validate();
}
