// Command-line driver: training, sweeps, pruning, benchmarking, reporting
// and the ordered reproduction pipeline.

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "bag/bench.hpp"
#include "bag/config.hpp"

namespace fs = std::filesystem;
using namespace bag;

namespace {

struct LoadedData {
  DatasetSplit split;
  int vocab_size = 0;
  int num_classes = 0;
};

LoadedData load_data(const RunConfig& cfg, uint64_t data_seed) {
  LoadedData d;
  if (cfg.task == "marked") {
    MarkedTaskConfig mt;
    mt.seq_len = cfg.seq_len;
    mt.n_values = cfg.n_values;
    d.split = gen_marked_splits(data_seed, cfg.train_examples, cfg.val_examples,
                                cfg.test_examples, mt);
  } else if (cfg.task == "csv") {
    TextDataset td = load_text_csv(cfg.csv_train, cfg.csv_test, cfg.vocab_size, cfg.seq_len,
                                   cfg.val_examples, data_seed);
    d.split = std::move(td.split);
  } else {
    throw std::runtime_error("config: unknown task '" + cfg.task + "'");
  }
  d.vocab_size = d.split.vocab_size;
  d.num_classes = d.split.num_classes;
  return d;
}

std::vector<std::string> run_echo(const RunConfig& cfg, uint64_t seed, uint64_t data_seed) {
  auto lines = cfg.echo_lines();
  lines.push_back("run_seed=" + std::to_string(seed));
  lines.push_back("run_data_seed=" + std::to_string(data_seed));
  return lines;
}

std::vector<double> parse_budget_spec(const std::string& spec) {
  // Either a comma list "0.25,0.5" or a range "lo:hi:step".
  std::vector<double> budgets;
  if (spec.find(':') != std::string::npos) {
    double lo, hi, step;
    if (std::sscanf(spec.c_str(), "%lf:%lf:%lf", &lo, &hi, &step) != 3 || step <= 0.0)
      throw std::runtime_error("bad budget range '" + spec + "', expected lo:hi:step");
    for (int i = 0;; ++i) {
      double b = lo + i * step;
      if (b > hi + 1e-9) break;
      budgets.push_back(std::min(b, hi));
    }
  } else {
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) budgets.push_back(std::stod(item));
  }
  if (budgets.empty()) throw std::runtime_error("empty budget list '" + spec + "'");
  return budgets;
}

const std::vector<Example>& pick_split(const DatasetSplit& ds, const std::string& name) {
  if (name == "train") return ds.train;
  if (name == "val") return ds.val;
  if (name == "test") return ds.test;
  throw std::runtime_error("unknown split '" + name + "'");
}

// ---------------------------------------------------------------- commands

int cmd_train(const std::string& mode, const std::string& config_path, uint64_t seed,
              uint64_t data_seed, const std::string& warm_start_path,
              const std::string& teacher_path, const std::string& out_path,
              const std::string& log_path, bool rescue) {
  RunConfig cfg = RunConfig::load(config_path);
  LoadedData data = load_data(cfg, data_seed);
  ModelConfig mc = cfg.model_config(data.vocab_size, data.num_classes);
  TrainConfig tc = cfg.train_config(seed);
  if (rescue) {
    tc.lambda = cfg.rescue_lambda;
    tc.beta = cfg.rescue_beta;
  }

  Checkpoint warm;
  const Checkpoint* warm_ptr = nullptr;
  if (!warm_start_path.empty()) {
    warm = Checkpoint::load(warm_start_path);
    warm_ptr = &warm;
  }

  Checkpoint ckpt;
  if (mode == "dense") {
    ckpt = train_dense(tc, mc, data.split, log_path);
  } else if (mode == "budgeted") {
    ckpt = train_budgeted(tc, mc, data.split, warm_ptr, log_path);
  } else if (mode == "static") {
    ckpt = train_static(tc, mc, data.split, cfg.static_budget, warm_ptr, log_path);
  } else if (mode == "hard_adapt") {
    if (teacher_path.empty())
      throw std::runtime_error("train hard_adapt: --teacher checkpoint is required");
    Checkpoint teacher = Checkpoint::load(teacher_path);
    ckpt = adapt_hard(tc, teacher, data.split, log_path);
  } else {
    throw std::runtime_error("unknown train mode '" + mode + "'");
  }
  ckpt.config_echo = run_echo(cfg, seed, data_seed);
  ckpt.save(out_path);
  std::cout << "mode=" << mode << " seed=" << seed << " data_seed=" << data_seed
            << " best_val_metric=" << format_g17(ckpt.best_val_acc) << " epoch=" << ckpt.epoch
            << " -> " << out_path << "\n";
  return 0;
}

int cmd_sweep(const std::string& ckpt_path, const std::string& config_path, uint64_t data_seed,
              const std::string& budget_spec, const std::string& split_name,
              const std::string& out_csv, const std::string& out_json) {
  Checkpoint ckpt = Checkpoint::load(ckpt_path);
  RunConfig cfg = RunConfig::load(config_path);
  LoadedData data = load_data(cfg, data_seed);
  if (data.vocab_size != ckpt.cfg.vocab_size || data.split.seq_len != ckpt.cfg.seq_len)
    throw std::runtime_error("sweep: checkpoint/config data shape mismatch");
  auto budgets = parse_budget_spec(budget_spec);
  auto points = budget_sweep(ckpt, pick_split(data.split, split_name), budgets, ckpt.seed);
  pareto_report(points, out_csv, out_json);
  std::cout << "sweep: " << points.size() << " points over " << budgets.size()
            << " budgets -> " << out_csv << "\n";
  return 0;
}

int cmd_prune(const std::string& dense_path, const std::string& config_path,
              uint64_t data_seed, double budget, bool floor, const std::string& out_mask,
              const std::string& out_json) {
  Checkpoint dense = Checkpoint::load(dense_path);
  RunConfig cfg = RunConfig::load(config_path);
  LoadedData data = load_data(cfg, data_seed);
  Array importance = score_heads(dense, data.split.val, cfg.batch_size);
  HeadMask mask = prune_posthoc(importance, budget, floor);
  write_gate_csv(mask.values, out_mask);

  EvalResult r = eval_with_mask(dense.cfg, dense.params, data.split.test, mask.values, true,
                                cfg.batch_size);
  nlohmann::json j;
  j["budget"] = budget;
  j["floor"] = floor;
  j["k"] = head_count(budget, dense.cfg.layers, dense.cfg.heads);
  j["kind"] = mask_kind_name(mask.kind);
  j["importance"] = importance.data;
  j["test_accuracy"] = r.accuracy;
  j["seed"] = dense.seed;
  j["config_echo"] = run_echo(cfg, dense.seed, data_seed);
  std::ofstream out(out_json);
  if (!out) throw std::runtime_error("prune: cannot open " + out_json);
  out << j.dump(2) << "\n";
  std::cout << "prune: k=" << j["k"] << " test_acc=" << format_g17(r.accuracy) << " -> "
            << out_mask << "\n";
  return 0;
}

int cmd_bench(const std::string& ckpt_path, const std::string& config_path, uint64_t data_seed,
              const std::string& variant_name, double budget, const std::string& out_json) {
  Checkpoint ckpt = Checkpoint::load(ckpt_path);
  RunConfig cfg = RunConfig::load(config_path);
  LoadedData data = load_data(cfg, data_seed);
  BenchVariant variant;
  if (variant_name == "dense") variant = BenchVariant::dense;
  else if (variant_name == "soft") variant = BenchVariant::soft;
  else if (variant_name == "hard_skip") variant = BenchVariant::hard_skip;
  else throw std::runtime_error("unknown bench variant '" + variant_name + "'");

  std::vector<Example> split = data.split.test;
  if (static_cast<int>(split.size()) > cfg.bench_examples)
    split.resize(cfg.bench_examples);
  LatencyReport r = measure_latency(ckpt, split, variant, budget, cfg.bench_warmup,
                                    cfg.bench_repeats, cfg.batch_size);
  nlohmann::json j = latency_report_json(r);
  j["config_echo"] = run_echo(cfg, ckpt.seed, data_seed);
  std::ofstream out(out_json);
  if (!out) throw std::runtime_error("bench: cannot open " + out_json);
  out << j.dump(2) << "\n";
  std::cout << "bench: " << variant_name << " budget=" << budget
            << " median_ms=" << format_g17(r.median_ms) << " -> " << out_json << "\n";
  return 0;
}

int cmd_report(const std::string& runs_dir, const std::string& out_csv,
               const std::string& out_json) {
  // Aggregate every raw sweep CSV found under the run directory.
  std::vector<SweepPoint> points;
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(runs_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".csv" &&
        entry.path().filename().string().rfind("sweep_", 0) == 0)
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const fs::path& f : files) {
    std::ifstream in(f);
    std::string line;
    std::getline(in, line);
    if (line != "seed,kind,budget,cost,accuracy")
      throw std::runtime_error("report: unexpected header in " + f.string());
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto fields = parse_csv_line(line);
      if (fields.size() != 5)
        throw std::runtime_error("report: malformed row in " + f.string());
      SweepPoint p;
      p.seed = std::stoull(fields[0]);
      p.kind = fields[1] == "soft" ? EvalKind::soft : EvalKind::hard;
      p.requested_budget = std::stod(fields[2]);
      p.cost = std::stod(fields[3]);
      p.accuracy = std::stod(fields[4]);
      points.push_back(p);
    }
  }
  if (points.empty())
    throw std::runtime_error("report: no sweep_*.csv files under " + runs_dir);
  pareto_report(points, out_csv, out_json);
  std::cout << "report: aggregated " << points.size() << " points from " << files.size()
            << " sweeps -> " << out_json << "\n";
  return 0;
}

// ---------------------------------------------------------------- reproduce

struct StageManifest {
  fs::path path;
  nlohmann::json done = nlohmann::json::array();

  explicit StageManifest(const fs::path& p) : path(p) {
    if (fs::exists(path)) {
      std::ifstream in(path);
      done = nlohmann::json::parse(in).at("completed");
    }
  }
  bool completed(const std::string& stage) const {
    for (const auto& s : done)
      if (s == stage) return true;
    return false;
  }
  void mark(const std::string& stage) {
    done.push_back(stage);
    std::ofstream out(path);
    out << nlohmann::json{{"completed", done}}.dump(2) << "\n";
  }
};

int cmd_reproduce(const std::string& config_path, const std::string& out_dir, bool fresh) {
  RunConfig cfg = RunConfig::load(config_path);
  fs::create_directories(out_dir);
  fs::create_directories(fs::path(out_dir) / "ckpt");
  fs::path manifest_path = fs::path(out_dir) / "manifest.json";
  if (fresh) fs::remove(manifest_path);
  StageManifest manifest(manifest_path);
  cfg.save((fs::path(out_dir) / "run.cfg").string());

  auto ckpt_path = [&](const std::string& name) {
    return (fs::path(out_dir) / "ckpt" / (name + ".ckpt")).string();
  };
  auto stage = [&](const std::string& name, auto&& body) {
    if (manifest.completed(name)) {
      std::cout << "[stage " << name << "] already complete, skipping\n";
      return;
    }
    std::cout << "[stage " << name << "] start\n";
    try {
      body();
    } catch (const std::exception& e) {
      throw std::runtime_error("stage '" + name + "' failed: " + e.what());
    }
    manifest.mark(name);
    std::cout << "[stage " << name << "] done\n";
  };

  // 1. Dense reliability grid: data seeds x optimization seeds.
  stage("dense_grid", [&] {
    nlohmann::json grid = nlohmann::json::array();
    for (uint64_t ds : cfg.data_seeds) {
      LoadedData data = load_data(cfg, ds);
      ModelConfig mc = cfg.model_config(data.vocab_size, data.num_classes);
      for (uint64_t s : cfg.seeds) {
        Checkpoint c = train_dense(cfg.train_config(s), mc, data.split);
        c.config_echo = run_echo(cfg, s, ds);
        c.save(ckpt_path("dense_d" + std::to_string(ds) + "_s" + std::to_string(s)));
        grid.push_back({{"data_seed", ds}, {"seed", s}, {"val_acc", c.best_val_acc}});
        std::cout << "  dense d=" << ds << " s=" << s << " val_acc=" << c.best_val_acc
                  << "\n";
      }
    }
    std::ofstream out(fs::path(out_dir) / "dense_grid.json");
    out << grid.dump(2) << "\n";
  });

  uint64_t ds0 = cfg.data_seeds.at(0);
  auto dense_name = [&](uint64_t s) {
    return "dense_d" + std::to_string(ds0) + "_s" + std::to_string(s);
  };

  // 2. Warm-started budgeted training per seed.
  stage("budgeted_warm", [&] {
    LoadedData data = load_data(cfg, ds0);
    ModelConfig mc = cfg.model_config(data.vocab_size, data.num_classes);
    for (uint64_t s : cfg.seeds) {
      Checkpoint warm = Checkpoint::load(ckpt_path(dense_name(s)));
      Checkpoint c = train_budgeted(cfg.train_config(s), mc, data.split, &warm);
      c.config_echo = run_echo(cfg, s, ds0);
      c.save(ckpt_path("budgeted_s" + std::to_string(s)));
      std::cout << "  budgeted s=" << s << " val_metric=" << c.best_val_acc << "\n";
    }
  });

  // 3. Static fixed-budget baselines per budget and seed.
  const std::vector<double> static_budgets = {0.25, 0.50, 0.75};
  stage("static", [&] {
    LoadedData data = load_data(cfg, ds0);
    ModelConfig mc = cfg.model_config(data.vocab_size, data.num_classes);
    nlohmann::json rows = nlohmann::json::array();
    for (double b : static_budgets)
      for (uint64_t s : cfg.seeds) {
        Checkpoint warm = Checkpoint::load(ckpt_path(dense_name(s)));
        Checkpoint c = train_static(cfg.train_config(s), mc, data.split, b, &warm);
        c.config_echo = run_echo(cfg, s, ds0);
        std::string tag = "static_b" + format_g17(b) + "_s" + std::to_string(s);
        c.save(ckpt_path(tag));
        rows.push_back({{"budget", b}, {"seed", s}, {"val_acc", c.best_val_acc}});
        std::cout << "  static b=" << b << " s=" << s << " val_acc=" << c.best_val_acc
                  << "\n";
      }
    std::ofstream out(fs::path(out_dir) / "static.json");
    out << rows.dump(2) << "\n";
  });

  // 4. Post-hoc pruning of the dense models.
  stage("prune", [&] {
    for (uint64_t s : cfg.seeds)
      cmd_prune(ckpt_path(dense_name(s)), config_path, ds0, 0.5, true,
                (fs::path(out_dir) / ("prune_mask_s" + std::to_string(s) + ".csv")).string(),
                (fs::path(out_dir) / ("prune_s" + std::to_string(s) + ".json")).string());
  });

  // 5. One-epoch hard-gate adaptation of each budgeted model.
  stage("hard_adapt", [&] {
    LoadedData data = load_data(cfg, ds0);
    for (uint64_t s : cfg.seeds) {
      Checkpoint teacher = Checkpoint::load(ckpt_path("budgeted_s" + std::to_string(s)));
      double before = evaluate(teacher, data.split.val, 0.5, EvalKind::hard).accuracy;
      Checkpoint c = adapt_hard(cfg.train_config(s), teacher, data.split);
      c.config_echo = run_echo(cfg, s, ds0);
      c.save(ckpt_path("adapted_s" + std::to_string(s)));
      std::cout << "  adapt s=" << s << " hard@0.5 " << before << " -> " << c.best_val_acc
                << "\n";
    }
  });

  // 6. Cost-quality sweeps, budgeted and adapted.
  stage("sweep", [&] {
    for (uint64_t s : cfg.seeds)
      for (std::string kind : {"budgeted", "adapted"})
        cmd_sweep(ckpt_path(kind + "_s" + std::to_string(s)), config_path, ds0,
                  "0.10:1.00:0.05", "test",
                  (fs::path(out_dir) / ("sweep_" + kind + "_s" + std::to_string(s) + ".csv"))
                      .string(),
                  (fs::path(out_dir) / ("sweep_" + kind + "_s" + std::to_string(s) + ".json"))
                      .string());
  });

  // 7. Single-thread latency: dense vs soft vs hard-skip at B=0.5.
  stage("bench", [&] {
    for (uint64_t s : cfg.seeds)
      for (std::string v : {"dense", "soft", "hard_skip"})
        cmd_bench(ckpt_path("adapted_s" + std::to_string(s)), config_path, ds0, v, 0.5,
                  (fs::path(out_dir) / ("bench_" + v + "_s" + std::to_string(s) + ".json"))
                      .string());
    std::map<uint64_t, LatencyReport> dense, soft, hard;
    std::vector<std::pair<std::string, std::map<uint64_t, LatencyReport>*>> variants = {
        {"dense", &dense}, {"soft", &soft}, {"hard_skip", &hard}};
    for (uint64_t s : cfg.seeds)
      for (auto& [name, dst] : variants) {
        std::ifstream in(fs::path(out_dir) /
                         ("bench_" + name + "_s" + std::to_string(s) + ".json"));
        nlohmann::json j = nlohmann::json::parse(in);
        LatencyReport r;
        r.median_ms = j.at("median_ms");
        (*dst)[s] = r;
      }
    Speedup hard_speedup = speedup(dense, hard);
    Speedup soft_speedup = speedup(dense, soft);
    nlohmann::json j;
    j["hard_skip"] = {{"mean", hard_speedup.mean},
                      {"stddev", hard_speedup.stddev},
                      {"per_seed", hard_speedup.per_seed_ratio}};
    j["soft"] = {{"mean", soft_speedup.mean},
                 {"stddev", soft_speedup.stddev},
                 {"per_seed", soft_speedup.per_seed_ratio}};
    std::ofstream out(fs::path(out_dir) / "speedup.json");
    out << j.dump(2) << "\n";
  });

  // 8. Aggregate report across all sweeps.
  stage("report", [&] {
    cmd_report(out_dir, (fs::path(out_dir) / "report_points.csv").string(),
               (fs::path(out_dir) / "report.json").string());
  });

  std::cout << "reproduce: complete, artifacts in " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Budget-conditioned attention-head gating"};
  app.require_subcommand(1);

  std::string config_path, mode, warm_start, teacher, ckpt, out, out_csv, out_json, log_path;
  std::string budgets = "0.10:1.00:0.05", split_name = "test", variant = "hard_skip";
  std::string runs_dir, out_dir = "out";
  uint64_t seed = 7, data_seed = 1;
  double budget = 0.5;
  bool floor = false, rescue = false, fresh = false;

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("mode", mode, "dense | budgeted | static | hard_adapt")->required();
  train->add_option("--config", config_path, "run config file")->required();
  train->add_option("--seed", seed, "optimization seed");
  train->add_option("--data-seed", data_seed, "data seed");
  train->add_option("--warm-start", warm_start, "dense checkpoint to warm-start from");
  train->add_option("--teacher", teacher, "budgeted checkpoint (hard_adapt)");
  train->add_option("--out", out, "output checkpoint path")->required();
  train->add_option("--log", log_path, "JSONL epoch log path");
  train->add_flag("--rescue", rescue, "use the rescue loss weights");

  auto* sweep = app.add_subcommand("sweep", "Cost-quality budget sweep");
  sweep->add_option("--ckpt", ckpt)->required();
  sweep->add_option("--config", config_path)->required();
  sweep->add_option("--data-seed", data_seed);
  sweep->add_option("--budgets", budgets, "lo:hi:step or comma list");
  sweep->add_option("--split", split_name, "train | val | test");
  sweep->add_option("--out-csv", out_csv)->required();
  sweep->add_option("--out-json", out_json)->required();

  auto* prune = app.add_subcommand("prune", "Post-hoc head pruning of a dense model");
  prune->add_option("--dense", ckpt)->required();
  prune->add_option("--config", config_path)->required();
  prune->add_option("--data-seed", data_seed);
  prune->add_option("--budget", budget);
  prune->add_flag("--floor", floor, "keep at least one head per layer");
  prune->add_option("--out-mask", out_csv)->required();
  prune->add_option("--out-json", out_json)->required();

  auto* bench = app.add_subcommand("bench", "Single-thread latency measurement");
  bench->add_option("--ckpt", ckpt)->required();
  bench->add_option("--config", config_path)->required();
  bench->add_option("--data-seed", data_seed);
  bench->add_option("--variant", variant, "dense | soft | hard_skip");
  bench->add_option("--budget", budget);
  bench->add_option("--out-json", out_json)->required();

  auto* report = app.add_subcommand("report", "Aggregate sweep CSVs across seeds");
  report->add_option("--runs", runs_dir)->required();
  report->add_option("--out-csv", out_csv)->required();
  report->add_option("--out-json", out_json)->required();

  auto* reproduce = app.add_subcommand("reproduce", "Run the full ordered pipeline");
  reproduce->add_option("--config", config_path)->required();
  reproduce->add_option("--out", out_dir, "run directory");
  reproduce->add_flag("--fresh", fresh, "ignore any existing stage manifest");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed())
      return cmd_train(mode, config_path, seed, data_seed, warm_start, teacher, out, log_path,
                       rescue);
    if (sweep->parsed())
      return cmd_sweep(ckpt, config_path, data_seed, budgets, split_name, out_csv, out_json);
    if (prune->parsed())
      return cmd_prune(ckpt, config_path, data_seed, budget, floor, out_csv, out_json);
    if (bench->parsed())
      return cmd_bench(ckpt, config_path, data_seed, variant, budget, out_json);
    if (report->parsed()) return cmd_report(runs_dir, out_csv, out_json);
    if (reproduce->parsed()) return cmd_reproduce(config_path, out_dir, fresh);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
