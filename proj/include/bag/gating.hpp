#pragma once

#include <fstream>
#include <numeric>

#include "bag/autodiff.hpp"

namespace bag {

// Budget clip constant: keeps logit(B) finite at the B=1 endpoint.
constexpr double kBudgetEps = 1e-4;

inline double clip_budget(double budget, double eps = kBudgetEps) {
  if (budget <= 0.0 || budget > 1.0)
    throw std::invalid_argument("clip_budget: budget must be in (0, 1], got " +
                                std::to_string(budget));
  return std::min(std::max(budget, eps), 1.0 - eps);
}

// Only ever called on clipped inputs, so both logs are finite.
inline double logit(double p) { return std::log(p) - std::log(1.0 - p); }

// Learned controller state: per-head logits a, raw budget sensitivities s
// (softplus keeps the effective sensitivity positive, hence gates monotone
// in B), temperature tau and the clip constant.
struct GateParams {
  Array a;  // (L, H)
  Array s;  // (L, H)
  double tau = 1.0;
  double eps = kBudgetEps;

  int layers() const { return a.shape.at(0); }
  int heads() const { return a.shape.at(1); }

  static GateParams init(int layers, int heads, std::mt19937_64& rng, double tau = 1.0) {
    GateParams p;
    p.a = Array::randn({layers, heads}, rng, 0.02);
    // softplus(s) == 1  =>  s = log(e - 1)
    p.s = Array::full({layers, heads}, std::log(std::exp(1.0) - 1.0));
    p.tau = tau;
    if (tau <= 0.0) throw std::invalid_argument("GateParams: tau must be positive");
    return p;
  }

  void validate() const {
    if (!a.same_shape(s)) throw std::invalid_argument("GateParams: a/s shape mismatch");
    if (tau <= 0.0) throw std::invalid_argument("GateParams: tau must be positive");
    if (eps <= 0.0 || eps >= 0.5) throw std::invalid_argument("GateParams: eps must be in (0,0.5)");
  }
};

enum class MaskKind { soft, hard_global, hard_floored };

inline const char* mask_kind_name(MaskKind k) {
  switch (k) {
    case MaskKind::soft: return "soft";
    case MaskKind::hard_global: return "hard_global";
    case MaskKind::hard_floored: return "hard_floored";
  }
  return "?";
}

struct HeadMask {
  Array values;  // (L, H)
  MaskKind kind = MaskKind::soft;
  double budget = 1.0;

  int layers() const { return values.shape.at(0); }
  int heads() const { return values.shape.at(1); }

  int active_count() const {
    int k = 0;
    for (double v : values.data) k += v != 0.0 ? 1 : 0;
    return k;
  }
};

// z = sigmoid((a + softplus(s) * logit(clip(B))) / tau), plain-array path.
inline Array soft_gate_values(const GateParams& p, double budget) {
  p.validate();
  double lb = logit(clip_budget(budget, p.eps));
  Array z(p.a.shape);
  for (size_t i = 0; i < z.data.size(); ++i)
    z.data[i] = sigmoid_scalar((p.a.data[i] + softplus_scalar(p.s.data[i]) * lb) / p.tau);
  return z;
}

inline HeadMask soft_gates(const GateParams& p, double budget) {
  return HeadMask{soft_gate_values(p, budget), MaskKind::soft, budget};
}

// Differentiable version on gate parameter tensors (each (L, H)).
inline Tensor soft_gates_tensor(Tensor a, Tensor s, double tau, double budget,
                                double eps = kBudgetEps) {
  if (tau <= 0.0) throw std::invalid_argument("soft_gates_tensor: tau must be positive");
  double lb = logit(clip_budget(budget, eps));
  return sigmoid(scale(add(a, scale(softplus(s), lb)), 1.0 / tau));
}

// Mean gate mass over all L*H heads.
inline double estimated_cost(const HeadMask& mask) {
  if (mask.values.data.empty()) throw std::invalid_argument("estimated_cost: empty mask");
  double s = std::accumulate(mask.values.data.begin(), mask.values.data.end(), 0.0);
  return s / static_cast<double>(mask.values.numel());
}

// k(B) = max(1, round(B*L*H)), round half away from zero.
inline int head_count(double budget, int layers, int heads) {
  if (budget <= 0.0 || budget > 1.0)
    throw std::invalid_argument("head_count: budget must be in (0, 1]");
  if (layers < 1 || heads < 1) throw std::invalid_argument("head_count: L, H must be >= 1");
  long long k = std::llround(budget * layers * heads);
  return static_cast<int>(std::max(1LL, k));
}

// Top-k selection over an (L, H) score matrix. Ties break by ascending
// (layer, head). With the floor, each layer's best head is selected first
// and the remaining k-L slots fill by global ranking of unselected heads.
inline Array select_topk(const Array& scores, int k, bool floor) {
  int L = scores.shape.at(0), H = scores.shape.at(1);
  int total = L * H;
  if (k < 1 || k > total) throw std::invalid_argument("select_topk: k out of range");
  if (floor && k < L)
    throw std::invalid_argument("select_topk: per-layer floor infeasible, k=" +
                                std::to_string(k) + " < L=" + std::to_string(L));
  Array mask({L, H}, 0.0);
  std::vector<int> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int i, int j) { return scores.data[i] > scores.data[j]; });
  int taken = 0;
  if (floor) {
    for (int l = 0; l < L; ++l) {
      int best = l * H;
      for (int h = 1; h < H; ++h)
        if (scores.data[l * H + h] > scores.data[best]) best = l * H + h;
      mask.data[best] = 1.0;
      ++taken;
    }
  }
  for (int idx : order) {
    if (taken >= k) break;
    if (mask.data[idx] == 0.0) {
      mask.data[idx] = 1.0;
      ++taken;
    }
  }
  return mask;
}

inline HeadMask hard_mask(const HeadMask& soft, int k, bool floor) {
  if (soft.kind != MaskKind::soft) throw std::invalid_argument("hard_mask: input must be soft");
  Array m = select_topk(soft.values, k, floor);
  return HeadMask{std::move(m), floor ? MaskKind::hard_floored : MaskKind::hard_global,
                  soft.budget};
}

// Forward equals the hard top-k mask; gradients flow as if the soft gates
// had been used (straight-through top-k).
inline Tensor straight_through_gates(Tensor a, Tensor s, double tau, double budget,
                                     double eps = kBudgetEps) {
  Tensor soft = soft_gates_tensor(a, s, tau, budget, eps);
  int L = soft->value.shape.at(0), H = soft->value.shape.at(1);
  int k = head_count(budget, L, H);
  Array hard = select_topk(soft->value, k, /*floor=*/false);
  return straight_through(soft, std::move(hard));
}

inline void write_gate_csv(const Array& gates, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_gate_csv: cannot open " + path);
  int L = gates.shape.at(0), H = gates.shape.at(1);
  for (int l = 0; l < L; ++l) {
    for (int h = 0; h < H; ++h) {
      if (h) out << ",";
      out << format_g17(gates.at(l, h));
    }
    out << "\n";
  }
}

}  // namespace bag
