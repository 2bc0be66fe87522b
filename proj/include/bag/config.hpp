#pragma once

#include <functional>
#include <sstream>

#include "bag/training.hpp"

namespace bag {

// Plain-text key=value run configuration. Unknown keys are rejected with
// line numbers; parse -> serialize -> parse is the identity.
struct RunConfig {
  std::string task = "marked";  // marked | csv

  // marked task
  int seq_len = 64;
  int n_values = 8;
  int train_examples = 8192;
  int val_examples = 2048;
  int test_examples = 2048;

  // csv task
  std::string csv_train;
  std::string csv_test;
  int vocab_size = 20000;

  // model
  int hidden = 128;
  int layers = 4;
  int heads = 4;
  int ffn_dim = 256;
  double gate_tau = 1.0;

  // training
  double learning_rate = 3e-4;
  double weight_decay = 0.0;
  int epochs = 32;
  int batch_size = 64;
  double budget_lo = 0.25;
  double budget_hi = 1.00;
  double lambda = 0.02;
  double beta = 2.0;
  double rescue_lambda = 0.05;
  double rescue_beta = 4.0;
  double alpha = 0.5;
  double temperature = 2.0;
  double grad_clip = 1.0;
  double static_budget = 0.5;

  // run
  std::string out_dir = "out";
  std::vector<uint64_t> seeds = {7, 13, 21};
  std::vector<uint64_t> data_seeds = {1, 2, 3};

  // bench
  int bench_examples = 2000;
  int bench_warmup = 2;
  int bench_repeats = 5;

  ModelConfig model_config(int vocab, int classes) const {
    ModelConfig mc;
    mc.vocab_size = vocab;
    mc.seq_len = seq_len;
    mc.hidden = hidden;
    mc.layers = layers;
    mc.heads = heads;
    mc.ffn_dim = ffn_dim;
    mc.num_classes = classes;
    return mc;
  }

  TrainConfig train_config(uint64_t seed) const {
    TrainConfig tc;
    tc.learning_rate = learning_rate;
    tc.weight_decay = weight_decay;
    tc.epochs = epochs;
    tc.batch_size = batch_size;
    tc.budget_lo = budget_lo;
    tc.budget_hi = budget_hi;
    tc.lambda = lambda;
    tc.beta = beta;
    tc.alpha = alpha;
    tc.temperature = temperature;
    tc.grad_clip = grad_clip;
    tc.static_budget = static_budget;
    tc.seed = seed;
    return tc;
  }

 private:
  struct Field {
    std::string name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
  };

  static std::vector<uint64_t> parse_seed_list(const std::string& s) {
    std::vector<uint64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(std::stoull(item));
    if (out.empty()) throw std::invalid_argument("empty seed list");
    return out;
  }

  static std::string seed_list_str(const std::vector<uint64_t>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(v[i]);
    }
    return s;
  }

  static const std::vector<Field>& fields() {
    auto str_field = [](std::string RunConfig::* m) {
      return std::make_pair(
          [m](const RunConfig& c) { return c.*m; },
          [m](RunConfig& c, const std::string& v) { c.*m = v; });
    };
    auto int_field = [](int RunConfig::* m) {
      return std::make_pair(
          [m](const RunConfig& c) { return std::to_string(c.*m); },
          [m](RunConfig& c, const std::string& v) { c.*m = std::stoi(v); });
    };
    auto dbl_field = [](double RunConfig::* m) {
      return std::make_pair(
          [m](const RunConfig& c) { return format_g17(c.*m); },
          [m](RunConfig& c, const std::string& v) { c.*m = std::stod(v); });
    };
    auto seeds_field = [](std::vector<uint64_t> RunConfig::* m) {
      return std::make_pair(
          [m](const RunConfig& c) { return seed_list_str(c.*m); },
          [m](RunConfig& c, const std::string& v) { c.*m = parse_seed_list(v); });
    };
    static const std::vector<Field> table = [&] {
      std::vector<Field> f;
      auto add = [&f](const std::string& name, auto pair) {
        f.push_back({name, pair.first, pair.second});
      };
      add("task", str_field(&RunConfig::task));
      add("seq_len", int_field(&RunConfig::seq_len));
      add("n_values", int_field(&RunConfig::n_values));
      add("train_examples", int_field(&RunConfig::train_examples));
      add("val_examples", int_field(&RunConfig::val_examples));
      add("test_examples", int_field(&RunConfig::test_examples));
      add("csv_train", str_field(&RunConfig::csv_train));
      add("csv_test", str_field(&RunConfig::csv_test));
      add("vocab_size", int_field(&RunConfig::vocab_size));
      add("hidden", int_field(&RunConfig::hidden));
      add("layers", int_field(&RunConfig::layers));
      add("heads", int_field(&RunConfig::heads));
      add("ffn_dim", int_field(&RunConfig::ffn_dim));
      add("gate_tau", dbl_field(&RunConfig::gate_tau));
      add("learning_rate", dbl_field(&RunConfig::learning_rate));
      add("weight_decay", dbl_field(&RunConfig::weight_decay));
      add("epochs", int_field(&RunConfig::epochs));
      add("batch_size", int_field(&RunConfig::batch_size));
      add("budget_lo", dbl_field(&RunConfig::budget_lo));
      add("budget_hi", dbl_field(&RunConfig::budget_hi));
      add("lambda", dbl_field(&RunConfig::lambda));
      add("beta", dbl_field(&RunConfig::beta));
      add("rescue_lambda", dbl_field(&RunConfig::rescue_lambda));
      add("rescue_beta", dbl_field(&RunConfig::rescue_beta));
      add("alpha", dbl_field(&RunConfig::alpha));
      add("temperature", dbl_field(&RunConfig::temperature));
      add("grad_clip", dbl_field(&RunConfig::grad_clip));
      add("static_budget", dbl_field(&RunConfig::static_budget));
      add("out_dir", str_field(&RunConfig::out_dir));
      add("seeds", seeds_field(&RunConfig::seeds));
      add("data_seeds", seeds_field(&RunConfig::data_seeds));
      add("bench_examples", int_field(&RunConfig::bench_examples));
      add("bench_warmup", int_field(&RunConfig::bench_warmup));
      add("bench_repeats", int_field(&RunConfig::bench_repeats));
      return f;
    }();
    return table;
  }

 public:
  static RunConfig parse(std::istream& in, const std::string& origin = "<config>") {
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                 ": expected key=value");
      auto trim = [](std::string s) {
        auto a = s.find_first_not_of(" \t\r");
        auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      bool found = false;
      for (const Field& f : fields()) {
        if (f.name == key) {
          try {
            f.set(cfg, value);
          } catch (const std::exception& e) {
            throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": bad value for " +
                                     key + ": " + e.what());
          }
          found = true;
          break;
        }
      }
      if (!found)
        throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": unknown key '" +
                                 key + "'");
    }
    return cfg;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    return parse(in, path);
  }

  std::string serialize() const {
    std::string out;
    for (const Field& f : fields()) out += f.name + " = " + f.get(*this) + "\n";
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("config: cannot open " + path + " for writing");
    out << serialize();
  }

  std::vector<std::string> echo_lines() const {
    std::vector<std::string> lines;
    for (const Field& f : fields()) lines.push_back(f.name + "=" + f.get(*this));
    return lines;
  }
};

}  // namespace bag
