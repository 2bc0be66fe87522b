#pragma once

#include <optional>

#include "bag/checkpoint.hpp"
#include "bag/data.hpp"

namespace bag {

struct EvalResult {
  double accuracy = 0.0;
  double cost = 0.0;
  double mean_loss = 0.0;
};

enum class EvalKind { soft, hard };

inline const char* eval_kind_name(EvalKind k) { return k == EvalKind::soft ? "soft" : "hard"; }

struct SweepPoint {
  double requested_budget = 0.0;
  double cost = 0.0;
  double accuracy = 0.0;
  EvalKind kind = EvalKind::soft;
  uint64_t seed = 0;
};

namespace detail {

inline double softmax_ce_row(const double* row, int C, int label) {
  double m = *std::max_element(row, row + C);
  double s = 0.0;
  for (int c = 0; c < C; ++c) s += std::exp(row[c] - m);
  return m + std::log(s) - row[label];
}

}  // namespace detail

// Accuracy and mean cross-entropy of a tape-free forward over a split.
inline EvalResult eval_with_mask(const ModelConfig& cfg,
                                 const std::map<std::string, Array>& params,
                                 const std::vector<Example>& split, const Array& gates,
                                 bool skip_inactive, int batch_size = 64) {
  if (split.empty()) throw std::invalid_argument("evaluate: empty split");
  InferenceEngine engine(cfg, params);
  int N = static_cast<int>(split.size());
  int correct = 0;
  double loss_sum = 0.0;
  std::vector<int> tokens;
  for (int start = 0; start < N; start += batch_size) {
    int bs = std::min(batch_size, N - start);
    tokens.clear();
    for (int i = 0; i < bs; ++i)
      tokens.insert(tokens.end(), split[start + i].tokens.begin(),
                    split[start + i].tokens.end());
    Array logits = engine.logits(tokens, bs, gates, skip_inactive);
    int C = cfg.num_classes;
    for (int i = 0; i < bs; ++i) {
      const double* row = logits.data.data() + static_cast<size_t>(i) * C;
      int argmax = static_cast<int>(std::max_element(row, row + C) - row);
      int label = split[start + i].label;
      if (argmax == label) ++correct;
      loss_sum += detail::softmax_ce_row(row, C, label);
    }
  }
  EvalResult r;
  r.accuracy = static_cast<double>(correct) / N;
  r.mean_loss = loss_sum / N;
  return r;
}

// Soft kind: soft gates at B, cost = mean gate mass. Hard kind: global
// top-k mask (no per-layer floor), hard-skip execution, cost = k/(L*H).
inline EvalResult evaluate(const Checkpoint& ckpt, const std::vector<Example>& split,
                           double budget, EvalKind kind, int batch_size = 64) {
  GateParams gp = ckpt.gate_params();
  HeadMask soft = soft_gates(gp, budget);
  EvalResult r;
  if (kind == EvalKind::soft) {
    r = eval_with_mask(ckpt.cfg, ckpt.params, split, soft.values, false, batch_size);
    r.cost = estimated_cost(soft);
  } else {
    int k = head_count(budget, gp.layers(), gp.heads());
    HeadMask hard = hard_mask(soft, k, /*floor=*/false);
    r = eval_with_mask(ckpt.cfg, ckpt.params, split, hard.values, true, batch_size);
    r.cost = static_cast<double>(k) / (gp.layers() * gp.heads());
  }
  return r;
}

inline std::vector<double> canonical_sweep_budgets() {
  std::vector<double> budgets;
  for (int i = 0; i <= 18; ++i) budgets.push_back(0.10 + 0.05 * i);
  return budgets;
}

// One soft and one hard point per budget. A non-monotone soft cost curve is
// a named check failure, not a silent result.
inline std::vector<SweepPoint> budget_sweep(const Checkpoint& ckpt,
                                            const std::vector<Example>& split,
                                            const std::vector<double>& budgets,
                                            uint64_t seed = 0) {
  if (!std::is_sorted(budgets.begin(), budgets.end()))
    throw std::invalid_argument("budget_sweep: budgets must be sorted ascending");
  std::vector<SweepPoint> points;
  double prev_soft_cost = -1.0;
  for (double b : budgets) {
    EvalResult soft = evaluate(ckpt, split, b, EvalKind::soft);
    if (soft.cost < prev_soft_cost - 1e-12)
      throw std::runtime_error("budget_sweep: soft-cost monotonicity violated at budget " +
                               std::to_string(b));
    prev_soft_cost = soft.cost;
    points.push_back({b, soft.cost, soft.accuracy, EvalKind::soft, seed});
    EvalResult hard = evaluate(ckpt, split, b, EvalKind::hard);
    points.push_back({b, hard.cost, hard.accuracy, EvalKind::hard, seed});
  }
  return points;
}

// Validation-loss increase caused by individually masking each head.
// Exactly L*H + 1 forward passes over the split.
inline Array score_heads(const Checkpoint& ckpt, const std::vector<Example>& val_split,
                         int batch_size = 64) {
  int L = ckpt.cfg.layers, H = ckpt.cfg.heads;
  Array ones = Array::full({L, H}, 1.0);
  double base = eval_with_mask(ckpt.cfg, ckpt.params, val_split, ones, false, batch_size)
                    .mean_loss;
  Array scores({L, H});
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) {
      Array masked = ones;
      masked.at(l, h) = 0.0;
      double loss =
          eval_with_mask(ckpt.cfg, ckpt.params, val_split, masked, false, batch_size)
              .mean_loss;
      scores.at(l, h) = loss - base;
    }
  return scores;
}

// Keep the highest-importance heads under the budget, same floor/tie rules
// as the gate hard mask.
inline HeadMask prune_posthoc(const Array& importance, double budget, bool floor) {
  int L = importance.shape.at(0), H = importance.shape.at(1);
  int k = head_count(budget, L, H);
  Array m = select_topk(importance, k, floor);
  return HeadMask{std::move(m), floor ? MaskKind::hard_floored : MaskKind::hard_global,
                  budget};
}

// ---------------------------------------------------------------- rank stats

// Average ranks for ties (1-based). Accepts any random-access container of
// doubles (plain or aligned vectors).
template <typename Vec>
std::vector<double> average_ranks(const Vec& x) {
  int n = static_cast<int>(x.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  int i = 0;
  while (i < n) {
    int j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    double avg = (i + j) / 2.0 + 1.0;
    for (int t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

// Spearman rank correlation (Pearson on average ranks). Undefined when a
// vector has all-equal values.
template <typename VecX, typename VecY>
std::optional<double> spearman(const VecX& x, const VecY& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("spearman: need two equally sized vectors, length >= 2");
  auto rx = average_ranks(x), ry = average_ranks(y);
  int n = static_cast<int>(x.size());
  double mx = 0.0, my = 0.0;
  for (int i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (int i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

inline std::vector<double> average_ranks(const std::vector<double>& x) {
  return average_ranks<std::vector<double>>(x);
}

inline std::optional<double> spearman(const std::vector<double>& x,
                                      const std::vector<double>& y) {
  return spearman<std::vector<double>, std::vector<double>>(x, y);
}

struct RankStability {
  std::optional<double> spearman_rho;
  double topk_retention = 0.0;
  int k = 0;
};

// Stability of soft gate rankings between two budgets: Spearman of the
// flattened gate vectors plus retention of the low-budget top-k heads in
// the high-budget top-k set.
inline RankStability gate_rank_stability(const Checkpoint& ckpt, double b1, double b2) {
  GateParams gp = ckpt.gate_params();
  Array z1 = soft_gate_values(gp, b1);
  Array z2 = soft_gate_values(gp, b2);
  RankStability out;
  out.spearman_rho = spearman(z1.data, z2.data);
  int L = gp.layers(), H = gp.heads();
  out.k = head_count(std::min(b1, b2), L, H);
  const Array& lo = b1 <= b2 ? z1 : z2;
  const Array& hi = b1 <= b2 ? z2 : z1;
  Array lo_mask = select_topk(lo, out.k, false);
  Array hi_mask = select_topk(hi, head_count(std::max(b1, b2), L, H), false);
  int kept = 0;
  for (int i = 0; i < L * H; ++i)
    if (lo_mask.data[i] == 1.0 && hi_mask.data[i] == 1.0) ++kept;
  out.topk_retention = static_cast<double>(kept) / out.k;
  return out;
}

// ---------------------------------------------------------------- reports

struct AggregateRow {
  std::string kind;
  double budget = 0.0;
  double cost_mean = 0.0, cost_std = 0.0;
  double acc_mean = 0.0, acc_std = 0.0;
  int n_seeds = 0;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / (v.size() - 1)) : 0.0};
}

// Per-budget mean +/- stddev across seeds. CSV rows are the raw points;
// the JSON summary mirrors the aggregate table structure.
inline std::vector<AggregateRow> aggregate_points(const std::vector<SweepPoint>& points) {
  if (points.empty()) throw std::invalid_argument("pareto_report: no points");
  std::map<std::pair<std::string, double>, std::vector<const SweepPoint*>> groups;
  for (const SweepPoint& p : points)
    groups[{eval_kind_name(p.kind), p.requested_budget}].push_back(&p);
  std::vector<AggregateRow> rows;
  for (auto& [key, pts] : groups) {
    std::vector<double> costs, accs;
    for (const SweepPoint* p : pts) {
      costs.push_back(p->cost);
      accs.push_back(p->accuracy);
    }
    AggregateRow row;
    row.kind = key.first;
    row.budget = key.second;
    std::tie(row.cost_mean, row.cost_std) = mean_std(costs);
    std::tie(row.acc_mean, row.acc_std) = mean_std(accs);
    row.n_seeds = static_cast<int>(pts.size());
    rows.push_back(row);
  }
  return rows;
}

inline void write_sweep_csv(const std::vector<SweepPoint>& points, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("pareto_report: cannot open " + path);
  out << "seed,kind,budget,cost,accuracy\n";
  for (const SweepPoint& p : points)
    out << p.seed << "," << eval_kind_name(p.kind) << "," << format_g17(p.requested_budget)
        << "," << format_g17(p.cost) << "," << format_g17(p.accuracy) << "\n";
  if (!out) throw std::runtime_error("pareto_report: write failure for " + path);
}

inline void pareto_report(const std::vector<SweepPoint>& points, const std::string& csv_path,
                          const std::string& json_path) {
  write_sweep_csv(points, csv_path);
  auto rows = aggregate_points(points);
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const AggregateRow& r : rows) {
    nlohmann::json row;
    row["kind"] = r.kind;
    row["budget"] = r.budget;
    row["cost_mean"] = r.cost_mean;
    row["cost_std"] = r.cost_std;
    row["accuracy_mean"] = r.acc_mean;
    row["accuracy_std"] = r.acc_std;
    row["n_seeds"] = r.n_seeds;
    row["single_seed"] = r.n_seeds == 1;
    j["rows"].push_back(row);
  }
  std::ofstream out(json_path);
  if (!out) throw std::runtime_error("pareto_report: cannot open " + json_path);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("pareto_report: write failure for " + json_path);
}

}  // namespace bag
