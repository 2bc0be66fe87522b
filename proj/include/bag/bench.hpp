#pragma once

#include <sched.h>
#include <sys/utsname.h>

#include <chrono>

#include "bag/evaluation.hpp"

namespace bag {

enum class BenchVariant { dense, soft, hard_skip };

inline const char* bench_variant_name(BenchVariant v) {
  switch (v) {
    case BenchVariant::dense: return "dense";
    case BenchVariant::soft: return "soft";
    case BenchVariant::hard_skip: return "hard_skip";
  }
  return "?";
}

struct LatencyReport {
  std::string variant;
  double budget = 1.0;
  std::vector<double> repeat_ms;  // timed passes only; warmups excluded
  double median_ms = 0.0;
  double mean_ms = 0.0;
  double accuracy = 0.0;
  uint64_t seed = 0;
  int warmup = 0;
};

// Pins the calling thread to one CPU and verifies the resulting affinity
// set has exactly one entry. Latency numbers from an unpinned run would be
// invalid, so failure is a hard error.
inline void pin_to_single_cpu() {
  cpu_set_t current;
  CPU_ZERO(&current);
  if (sched_getaffinity(0, sizeof(current), &current) != 0)
    throw std::runtime_error("bench: sched_getaffinity failed; cannot pin thread");
  int first = -1;
  for (int c = 0; c < CPU_SETSIZE; ++c)
    if (CPU_ISSET(c, &current)) {
      first = c;
      break;
    }
  if (first < 0) throw std::runtime_error("bench: empty CPU affinity set");
  cpu_set_t one;
  CPU_ZERO(&one);
  CPU_SET(first, &one);
  if (sched_setaffinity(0, sizeof(one), &one) != 0)
    throw std::runtime_error("bench: sched_setaffinity failed; cannot pin thread");
  CPU_ZERO(&current);
  if (sched_getaffinity(0, sizeof(current), &current) != 0 || CPU_COUNT(&current) != 1)
    throw std::runtime_error("bench: thread pinning could not be verified");
}

inline nlohmann::json capture_environment() {
  nlohmann::json env;
  utsname u{};
  if (uname(&u) == 0) {
    env["os"] = std::string(u.sysname) + " " + u.release;
    env["arch"] = u.machine;
  }
  std::ifstream cpuinfo("/proc/cpuinfo");
  std::string line;
  while (std::getline(cpuinfo, line)) {
    if (line.rfind("model name", 0) == 0) {
      auto colon = line.find(':');
      if (colon != std::string::npos) env["cpu_model"] = line.substr(colon + 2);
      break;
    }
  }
  cpu_set_t set;
  CPU_ZERO(&set);
  if (sched_getaffinity(0, sizeof(set), &set) == 0) env["threads"] = CPU_COUNT(&set);
  return env;
}

// Single-thread forward-pass latency over a pre-tokenized split. Runs
// `warmup` untimed full-split passes then `repeats` timed ones; timing
// covers the forward passes only (batch materialization happens up front).
inline LatencyReport measure_latency(const Checkpoint& ckpt,
                                     const std::vector<Example>& split, BenchVariant variant,
                                     double budget, int warmup = 2, int repeats = 5,
                                     int batch_size = 64) {
  if (split.empty()) throw std::invalid_argument("bench: empty split");
  if (repeats < 1) throw std::invalid_argument("bench: repeats must be >= 1");
  pin_to_single_cpu();

  GateParams gp = ckpt.gate_params();
  Array gates({ckpt.cfg.layers, ckpt.cfg.heads});
  bool skip = false;
  switch (variant) {
    case BenchVariant::dense:
      gates = Array::full({ckpt.cfg.layers, ckpt.cfg.heads}, 1.0);
      break;
    case BenchVariant::soft:
      gates = soft_gate_values(gp, budget);
      break;
    case BenchVariant::hard_skip: {
      int k = head_count(budget, gp.layers(), gp.heads());
      gates = hard_mask(soft_gates(gp, budget), k, false).values;
      skip = true;
      break;
    }
  }

  // Pre-tokenized materialized batches.
  struct PreBatch {
    std::vector<int> tokens;
    std::vector<int> labels;
    int size;
  };
  std::vector<PreBatch> batches;
  int N = static_cast<int>(split.size());
  for (int start = 0; start < N; start += batch_size) {
    PreBatch b;
    b.size = std::min(batch_size, N - start);
    for (int i = 0; i < b.size; ++i) {
      b.tokens.insert(b.tokens.end(), split[start + i].tokens.begin(),
                      split[start + i].tokens.end());
      b.labels.push_back(split[start + i].label);
    }
    batches.push_back(std::move(b));
  }

  InferenceEngine engine(ckpt.cfg, ckpt.params);
  LatencyReport report;
  report.variant = bench_variant_name(variant);
  report.budget = budget;
  report.seed = ckpt.seed;
  report.warmup = warmup;

  int correct = 0;
  auto run_pass = [&](bool count_accuracy) {
    for (const PreBatch& b : batches) {
      Array logits = engine.logits(b.tokens, b.size, gates, skip);
      if (count_accuracy) {
        int C = ckpt.cfg.num_classes;
        for (int i = 0; i < b.size; ++i) {
          const double* row = logits.data.data() + static_cast<size_t>(i) * C;
          if (static_cast<int>(std::max_element(row, row + C) - row) == b.labels[i]) ++correct;
        }
      }
    }
  };

  // Accuracy comes from one untimed pass, which doubles as the first warmup.
  run_pass(true);
  for (int w = 1; w < warmup; ++w) run_pass(false);
  report.accuracy = static_cast<double>(correct) / N;

  for (int r = 0; r < repeats; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    run_pass(false);
    auto t1 = std::chrono::steady_clock::now();
    report.repeat_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::vector<double> sorted = report.repeat_ms;
  std::sort(sorted.begin(), sorted.end());
  size_t n = sorted.size();
  report.median_ms = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  report.mean_ms = std::accumulate(sorted.begin(), sorted.end(), 0.0) / n;
  return report;
}

struct Speedup {
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> per_seed_ratio;
};

// Mean and stddev over per-seed dense/method median-latency ratios. Never
// the ratio of aggregate latencies.
inline Speedup speedup(const std::map<uint64_t, LatencyReport>& dense_by_seed,
                       const std::map<uint64_t, LatencyReport>& method_by_seed) {
  if (dense_by_seed.empty() || dense_by_seed.size() != method_by_seed.size())
    throw std::invalid_argument("speedup: mismatched seed sets");
  Speedup s;
  for (const auto& [seed, dense] : dense_by_seed) {
    auto it = method_by_seed.find(seed);
    if (it == method_by_seed.end())
      throw std::invalid_argument("speedup: seed " + std::to_string(seed) +
                                  " missing on method side");
    s.per_seed_ratio.push_back(dense.median_ms / it->second.median_ms);
  }
  std::tie(s.mean, s.stddev) = mean_std(s.per_seed_ratio);
  return s;
}

inline nlohmann::json latency_report_json(const LatencyReport& r) {
  nlohmann::json j;
  j["variant"] = r.variant;
  j["budget"] = r.budget;
  j["seed"] = r.seed;
  j["warmup"] = r.warmup;
  j["repeat_ms"] = r.repeat_ms;
  j["median_ms"] = r.median_ms;
  j["mean_ms"] = r.mean_ms;
  j["accuracy"] = r.accuracy;
  j["environment"] = capture_environment();
  return j;
}

}  // namespace bag
