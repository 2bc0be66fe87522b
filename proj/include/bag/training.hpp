#pragma once

#include "bag/evaluation.hpp"

namespace bag {

enum class TrainMode { dense, budgeted, static_b, hard_adapt };

inline const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::dense: return "dense";
    case TrainMode::budgeted: return "budgeted";
    case TrainMode::static_b: return "static";
    case TrainMode::hard_adapt: return "hard_adapt";
  }
  return "?";
}

struct TrainConfig {
  double learning_rate = 3e-4;
  double weight_decay = 0.0;
  int epochs = 32;
  int batch_size = 64;
  double budget_lo = 0.25;
  double budget_hi = 1.00;
  double lambda = 0.02;     // cost weight
  double beta = 2.0;        // violation weight
  double alpha = 0.5;       // distillation mix
  double temperature = 2.0; // distillation temperature
  double grad_clip = 1.0;
  uint64_t seed = 7;
  TrainMode mode = TrainMode::dense;
  double static_budget = 0.5;  // fixed B for static mode

  void validate() const {
    if (learning_rate <= 0.0) throw std::invalid_argument("TrainConfig: learning_rate > 0");
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: epochs/batch");
    if (!(budget_lo > 0.0 && budget_lo <= budget_hi && budget_hi <= 1.0))
      throw std::invalid_argument("TrainConfig: need 0 < lo <= hi <= 1");
    if (lambda < 0.0 || beta < 0.0)
      throw std::invalid_argument("TrainConfig: lambda, beta must be >= 0");
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("TrainConfig: alpha in [0,1]");
    if (temperature <= 0.0) throw std::invalid_argument("TrainConfig: temperature > 0");
  }

  std::vector<std::string> echo_lines() const {
    return {
        "mode=" + std::string(train_mode_name(mode)),
        "learning_rate=" + format_g17(learning_rate),
        "weight_decay=" + format_g17(weight_decay),
        "epochs=" + std::to_string(epochs),
        "batch_size=" + std::to_string(batch_size),
        "budget_lo=" + format_g17(budget_lo),
        "budget_hi=" + format_g17(budget_hi),
        "lambda=" + format_g17(lambda),
        "beta=" + format_g17(beta),
        "alpha=" + format_g17(alpha),
        "temperature=" + format_g17(temperature),
        "grad_clip=" + format_g17(grad_clip),
        "seed=" + std::to_string(seed),
        "static_budget=" + format_g17(static_budget),
    };
  }
};

// ---------------------------------------------------------------- losses

struct BudgetedLossParts {
  Tensor total;
  Tensor task;       // cross-entropy
  Tensor cost_term;  // lambda * C
  Tensor violation;  // beta * max(0, C - B)^2
};

// Eq.: CE + lambda*C + beta*max(0, C-B)^2.
inline BudgetedLossParts budgeted_loss(Tensor logits, const std::vector<int>& labels,
                                       Tensor cost, double budget, double lambda,
                                       double beta) {
  BudgetedLossParts parts;
  parts.task = cross_entropy_mean(logits, labels);
  parts.cost_term = scale(cost, lambda);
  Tensor over = relu(add_scalar(cost, -budget));
  parts.violation = scale(mul(over, over), beta);
  parts.total = add(add(parts.task, parts.cost_term), parts.violation);
  return parts;
}

struct DistillLossParts {
  Tensor total;
  Tensor task;
  Tensor kl;  // unscaled KL(teacher || student) at temperature T
};

// (1-alpha)*CE(labels, student) + alpha*T^2*KL(softmax(teacher/T) || softmax(student/T)).
inline DistillLossParts distill_loss(Tensor student_logits, const Array& teacher_logits,
                                     const std::vector<int>& labels, double alpha, double T) {
  if (student_logits->value.shape != teacher_logits.shape)
    throw std::invalid_argument("distill_loss: logit shape mismatch");
  int B = teacher_logits.shape.at(0), C = teacher_logits.shape.at(1);
  // Teacher distribution at temperature T (constant) and its entropy term.
  Array pt({B, C});
  double teacher_entropy_term = 0.0;  // sum p_T log p_T / B
  for (int b = 0; b < B; ++b) {
    const double* row = teacher_logits.data.data() + static_cast<size_t>(b) * C;
    double m = *std::max_element(row, row + C);
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += std::exp((row[c] - m) / T);
    double lse = m / T + std::log(s);
    for (int c = 0; c < C; ++c) {
      double lp = row[c] / T - lse;
      pt.at(b, c) = std::exp(lp);
      teacher_entropy_term += pt.at(b, c) * lp;
    }
  }
  teacher_entropy_term /= B;

  DistillLossParts parts;
  parts.task = cross_entropy_mean(student_logits, labels);
  Tensor student_logp = log_softmax_rows(scale(student_logits, 1.0 / T));
  Tensor cross = scale(dot_const(student_logp, pt), -1.0 / B);  // -sum pT log pS / B
  parts.kl = add_scalar(cross, teacher_entropy_term);
  parts.total = add(scale(parts.task, 1.0 - alpha), scale(parts.kl, alpha * T * T));
  return parts;
}

// ---------------------------------------------------------------- optimizer

// Adam with decoupled weight decay and global-norm gradient clipping.
struct AdamW {
  double lr;
  double weight_decay;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t t = 0;
  std::map<std::string, std::pair<Array, Array>> state;  // m, v per parameter

  AdamW(double lr_, double wd) : lr(lr_), weight_decay(wd) {}

  void step(Graph& graph, double grad_clip) {
    double norm_sq = 0.0;
    for (auto& [name, p] : graph.parameters) {
      p->ensure_grad();
      for (double g : p->grad.data) norm_sq += g * g;
    }
    double clip_scale = 1.0;
    double norm = std::sqrt(norm_sq);
    if (grad_clip > 0.0 && norm > grad_clip) clip_scale = grad_clip / norm;

    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& [name, p] : graph.parameters) {
      auto [it, inserted] = state.try_emplace(
          name, std::make_pair(Array(p->value.shape, 0.0), Array(p->value.shape, 0.0)));
      Array& m = it->second.first;
      Array& v = it->second.second;
      for (size_t i = 0; i < p->value.data.size(); ++i) {
        double g = p->grad.data[i] * clip_scale;
        m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g;
        v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g * g;
        double update = (m.data[i] / bc1) / (std::sqrt(v.data[i] / bc2) + eps);
        p->value.data[i] -= lr * (update + weight_decay * p->value.data[i]);
      }
    }
  }
};

// ---------------------------------------------------------------- pipelines

struct TrainLogger {
  std::ofstream out;
  explicit TrainLogger(const std::string& path) {
    if (!path.empty()) {
      out.open(path, std::ios::app);
      if (!out) throw std::runtime_error("train log: cannot open " + path);
    }
  }
  void write(const nlohmann::json& j) {
    if (out) out << j.dump() << std::endl;  // flushed per line: this is a monitoring log
  }
};

namespace detail {

inline void collect_batch(const std::vector<Example>& split, const std::vector<int>& order,
                          int start, int bs, std::vector<int>& tokens,
                          std::vector<int>& labels) {
  tokens.clear();
  labels.clear();
  for (int i = 0; i < bs; ++i) {
    const Example& ex = split[order[start + i]];
    tokens.insert(tokens.end(), ex.tokens.begin(), ex.tokens.end());
    labels.push_back(ex.label);
  }
}

inline void check_finite_loss(double loss, int epoch, int step) {
  if (!std::isfinite(loss))
    throw std::runtime_error("training diverged: non-finite loss at epoch " +
                             std::to_string(epoch) + " step " + std::to_string(step));
}

// Mean validation accuracy over the four canonical budgets, soft gates.
inline double budgeted_selection_metric(const ModelConfig& cfg,
                                        const std::map<std::string, Array>& params,
                                        const GateParams& gp,
                                        const std::vector<Example>& val) {
  double acc = 0.0;
  for (double b : {0.25, 0.50, 0.75, 1.00})
    acc += eval_with_mask(cfg, params, val, soft_gate_values(gp, b), false).accuracy;
  return acc / 4.0;
}

}  // namespace detail

// Copies body weights from a checkpoint; gate parameters keep their fresh
// initialization.
inline void apply_warm_start(EncoderModel& model, const Checkpoint& warm_start) {
  if (warm_start.cfg != model.cfg)
    throw std::invalid_argument("train: warm-start config mismatch");
  for (auto& [name, t] : model.graph.parameters) {
    if (name == "gate.a" || name == "gate.s") continue;
    t->value = warm_start.params.at(name);
  }
}

// Shared gated-training loop: dense (fixed all-ones gates), budgeted
// (B ~ Uniform[lo,hi] per batch) and static (fixed B). Checkpoint selection
// is by validation accuracy (dense/static) or mean validation accuracy over
// the four canonical budgets (budgeted).
inline Checkpoint train_gated(const TrainConfig& tc, const ModelConfig& mc,
                              const DatasetSplit& data,
                              const Checkpoint* warm_start = nullptr,
                              const std::string& log_path = "") {
  tc.validate();
  mc.validate();
  if (data.train.empty() || data.val.empty())
    throw std::invalid_argument("train: empty train or val split");

  EncoderModel model = EncoderModel::init(mc, tc.seed);
  if (warm_start) apply_warm_start(model, *warm_start);

  std::mt19937_64 rng(tc.seed ^ 0x5eedba6ULL);
  std::uniform_real_distribution<double> budget_dist(tc.budget_lo, tc.budget_hi);
  AdamW opt(tc.learning_rate, tc.weight_decay);
  TrainLogger log(log_path);

  Checkpoint best = Checkpoint::from_model(model);
  best.mode = train_mode_name(tc.mode);
  best.seed = tc.seed;
  best.config_echo = tc.echo_lines();
  double best_metric = -1.0;

  int n_train = static_cast<int>(data.train.size());
  std::vector<int> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> tokens, labels;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0, epoch_cost = 0.0;
    int steps = 0;
    for (int start = 0; start + tc.batch_size <= n_train; start += tc.batch_size) {
      detail::collect_batch(data.train, order, start, tc.batch_size, tokens, labels);
      Tensor loss;
      double cost_value = 0.0;
      if (tc.mode == TrainMode::dense) {
        Tensor logits = model.forward_dense(tokens, tc.batch_size);
        loss = cross_entropy_mean(logits, labels);
        cost_value = 1.0;
      } else {
        double b = tc.mode == TrainMode::static_b ? tc.static_budget : budget_dist(rng);
        Tensor gates = model.soft_gates_at(b);
        Tensor cost = mean(gates);
        Tensor logits = model.forward(tokens, tc.batch_size, gates);
        loss = budgeted_loss(logits, labels, cost, b, tc.lambda, tc.beta).total;
        cost_value = cost->value.data[0];
      }
      detail::check_finite_loss(loss->value.data[0], epoch, steps);
      epoch_loss += loss->value.data[0];
      epoch_cost += cost_value;
      model.graph.backward(loss);
      opt.step(model.graph, tc.grad_clip);
      ++steps;
    }

    auto params = model.parameter_arrays();
    GateParams gp = model.gate_params();
    double metric;
    if (tc.mode == TrainMode::dense) {
      metric = eval_with_mask(mc, params, data.val, Array::full({mc.layers, mc.heads}, 1.0),
                              false)
                   .accuracy;
    } else if (tc.mode == TrainMode::static_b) {
      metric = eval_with_mask(mc, params, data.val,
                              soft_gate_values(gp, tc.static_budget), false)
                   .accuracy;
    } else {
      metric = detail::budgeted_selection_metric(mc, params, gp, data.val);
    }
    log.write({{"epoch", epoch},
               {"mode", train_mode_name(tc.mode)},
               {"seed", tc.seed},
               {"train_loss", epoch_loss / std::max(1, steps)},
               {"train_cost", epoch_cost / std::max(1, steps)},
               {"val_metric", metric}});
    if (metric > best_metric) {
      best_metric = metric;
      best.params = std::move(params);
      best.best_val_acc = metric;
      best.epoch = epoch;
    }
  }
  return best;
}

inline Checkpoint train_dense(TrainConfig tc, const ModelConfig& mc, const DatasetSplit& data,
                              const std::string& log_path = "") {
  tc.mode = TrainMode::dense;
  return train_gated(tc, mc, data, nullptr, log_path);
}

inline Checkpoint train_budgeted(TrainConfig tc, const ModelConfig& mc,
                                 const DatasetSplit& data,
                                 const Checkpoint* warm_start = nullptr,
                                 const std::string& log_path = "") {
  tc.mode = TrainMode::budgeted;
  return train_gated(tc, mc, data, warm_start, log_path);
}

inline Checkpoint train_static(TrainConfig tc, const ModelConfig& mc, const DatasetSplit& data,
                               double fixed_budget, const Checkpoint* warm_start = nullptr,
                               const std::string& log_path = "") {
  tc.mode = TrainMode::static_b;
  tc.static_budget = fixed_budget;
  return train_gated(tc, mc, data, warm_start, log_path);
}

// One epoch of hard-gate exposure: student runs straight-through top-k
// gates at a sampled budget, teacher is the frozen soft-gated checkpoint at
// the same budget, loss is the distillation mix.
inline Checkpoint adapt_hard(TrainConfig tc, const Checkpoint& budgeted_ckpt,
                             const DatasetSplit& data, const std::string& log_path = "") {
  tc.mode = TrainMode::hard_adapt;
  tc.validate();
  if (data.train.empty() || data.val.empty())
    throw std::invalid_argument("adapt_hard: empty train or val split");

  EncoderModel student = budgeted_ckpt.to_model();
  GateParams teacher_gp = budgeted_ckpt.gate_params();
  InferenceEngine teacher(budgeted_ckpt.cfg, budgeted_ckpt.params);

  std::mt19937_64 rng(tc.seed ^ 0xadab7ULL);
  std::uniform_real_distribution<double> budget_dist(tc.budget_lo, tc.budget_hi);
  AdamW opt(tc.learning_rate, tc.weight_decay);
  TrainLogger log(log_path);

  const ModelConfig& mc = budgeted_ckpt.cfg;
  int n_train = static_cast<int>(data.train.size());
  std::vector<int> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> tokens, labels;
  for (int epoch = 0; epoch < 1; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    int steps = 0;
    double epoch_loss = 0.0;
    for (int start = 0; start + tc.batch_size <= n_train; start += tc.batch_size) {
      detail::collect_batch(data.train, order, start, tc.batch_size, tokens, labels);
      double b = budget_dist(rng);
      Array teacher_logits =
          teacher.logits(tokens, tc.batch_size, soft_gate_values(teacher_gp, b), false);
      Tensor gates = student.straight_through_gates_at(b);
      Tensor logits = student.forward(tokens, tc.batch_size, gates);
      Tensor loss =
          distill_loss(logits, teacher_logits, labels, tc.alpha, tc.temperature).total;
      detail::check_finite_loss(loss->value.data[0], epoch, steps);
      epoch_loss += loss->value.data[0];
      student.graph.backward(loss);
      opt.step(student.graph, tc.grad_clip);
      ++steps;
    }
    log.write({{"epoch", epoch},
               {"mode", "hard_adapt"},
               {"seed", tc.seed},
               {"train_loss", epoch_loss / std::max(1, steps)}});
  }

  Checkpoint out = Checkpoint::from_model(student);
  out.mode = "hard_adapt";
  out.seed = tc.seed;
  out.config_echo = tc.echo_lines();
  out.epoch = 0;
  out.best_val_acc = evaluate(out, data.val, 0.5, EvalKind::hard).accuracy;
  return out;
}

// Empirical check used by tests: mean of uniform budget draws.
inline double sample_budget_mean(double lo, double hi, int draws, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  double s = 0.0;
  for (int i = 0; i < draws; ++i) s += dist(rng);
  return s / draws;
}

}  // namespace bag
