#pragma once

#include "bag/gating.hpp"

namespace bag {

constexpr double kLayerNormEps = 1e-5;
constexpr int kCheckpointVersion = 1;

struct ModelConfig {
  int vocab_size = 0;
  int seq_len = 0;
  int hidden = 128;
  int layers = 4;
  int heads = 4;
  int ffn_dim = 256;
  int num_classes = 2;

  int head_dim() const { return hidden / heads; }

  void validate() const {
    if (vocab_size < 1 || seq_len < 1 || hidden < 1 || layers < 1 || heads < 1 ||
        ffn_dim < 1 || num_classes < 2)
      throw std::invalid_argument("ModelConfig: all dimensions must be positive");
    if (hidden % heads != 0)
      throw std::invalid_argument("ModelConfig: hidden must be divisible by heads");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Pre-norm transformer encoder classifier with per-head gate multiplication
// on the attention head outputs. All trainable arrays live in the graph
// registry; gate logits/sensitivities are the "gate.a"/"gate.s" entries.
struct EncoderModel {
  ModelConfig cfg;
  Graph graph;
  double gate_tau = 1.0;
  double gate_eps = kBudgetEps;

  static EncoderModel init(const ModelConfig& cfg, uint64_t seed, double tau = 1.0) {
    cfg.validate();
    EncoderModel m;
    m.cfg = cfg;
    m.gate_tau = tau;
    std::mt19937_64 rng(seed);
    int d = cfg.hidden;
    auto w = [&](std::vector<int> shape) { return Array::randn(std::move(shape), rng, 0.02); };
    m.graph.param("embed.tok", w({cfg.vocab_size, d}));
    m.graph.param("embed.pos", w({cfg.seq_len, d}));
    for (int l = 0; l < cfg.layers; ++l) {
      std::string p = "layer" + std::to_string(l) + ".";
      m.graph.param(p + "ln1.gamma", Array::full({d}, 1.0));
      m.graph.param(p + "ln1.beta", Array::zeros({d}));
      m.graph.param(p + "attn.wq", w({d, d}));
      m.graph.param(p + "attn.bq", Array::zeros({d}));
      m.graph.param(p + "attn.wk", w({d, d}));
      m.graph.param(p + "attn.bk", Array::zeros({d}));
      m.graph.param(p + "attn.wv", w({d, d}));
      m.graph.param(p + "attn.bv", Array::zeros({d}));
      m.graph.param(p + "attn.wo", w({d, d}));
      m.graph.param(p + "attn.bo", Array::zeros({d}));
      m.graph.param(p + "ln2.gamma", Array::full({d}, 1.0));
      m.graph.param(p + "ln2.beta", Array::zeros({d}));
      m.graph.param(p + "ffn.w1", w({d, cfg.ffn_dim}));
      m.graph.param(p + "ffn.b1", Array::zeros({cfg.ffn_dim}));
      m.graph.param(p + "ffn.w2", w({cfg.ffn_dim, d}));
      m.graph.param(p + "ffn.b2", Array::zeros({d}));
    }
    m.graph.param("final_ln.gamma", Array::full({d}, 1.0));
    m.graph.param("final_ln.beta", Array::zeros({d}));
    m.graph.param("cls.w", w({d, cfg.num_classes}));
    m.graph.param("cls.b", Array::zeros({cfg.num_classes}));
    GateParams gp = GateParams::init(cfg.layers, cfg.heads, rng, tau);
    m.graph.param("gate.a", gp.a);
    m.graph.param("gate.s", gp.s);
    return m;
  }

  GateParams gate_params() const {
    GateParams p;
    p.a = graph.get("gate.a")->value;
    p.s = graph.get("gate.s")->value;
    p.tau = gate_tau;
    p.eps = gate_eps;
    return p;
  }

  // Differentiable soft gate matrix (L, H) at the given budget.
  Tensor soft_gates_at(double budget) {
    return soft_gates_tensor(graph.get("gate.a"), graph.get("gate.s"), gate_tau, budget,
                             gate_eps);
  }

  Tensor straight_through_gates_at(double budget) {
    return straight_through_gates(graph.get("gate.a"), graph.get("gate.s"), gate_tau, budget,
                                  gate_eps);
  }

  // tokens: B*seq_len ids; gates: optional (L, H) tensor (head outputs are
  // multiplied by their gate before the output projection). Null gates mean
  // the dense path: it runs the same tape with gate values fixed at 1, so
  // gated(all-ones) and dense produce bit-identical logits.
  Tensor forward(const std::vector<int>& tokens, int batch, Tensor gates = nullptr) {
    if (batch < 1) throw std::invalid_argument("forward: empty batch");
    int n = cfg.seq_len, d = cfg.hidden, dh = cfg.head_dim();
    if (static_cast<int>(tokens.size()) != batch * n)
      throw std::invalid_argument("forward: token count != batch * seq_len");
    if (gates && (gates->value.shape != std::vector<int>{cfg.layers, cfg.heads}))
      throw std::invalid_argument("forward: gate matrix must be (L, H)");
    if (!gates) gates = constant(Array::full({cfg.layers, cfg.heads}, 1.0));

    std::vector<int> pos_ids(static_cast<size_t>(batch) * n);
    for (int b = 0; b < batch; ++b)
      for (int t = 0; t < n; ++t) pos_ids[static_cast<size_t>(b) * n + t] = t;

    Tensor x = add(embedding(tokens, graph.get("embed.tok")),
                   embedding(pos_ids, graph.get("embed.pos")));
    for (int l = 0; l < cfg.layers; ++l) {
      std::string p = "layer" + std::to_string(l) + ".";
      Tensor h = layer_norm(x, graph.get(p + "ln1.gamma"), graph.get(p + "ln1.beta"),
                            kLayerNormEps);
      Tensor q = linear(h, graph.get(p + "attn.wq"), graph.get(p + "attn.bq"));
      Tensor k = linear(h, graph.get(p + "attn.wk"), graph.get(p + "attn.bk"));
      Tensor v = linear(h, graph.get(p + "attn.wv"), graph.get(p + "attn.bv"));
      Tensor ctx = multihead_attention(q, k, v, batch, n, cfg.heads);
      ctx = scale_head_columns(ctx, slice_row(gates, l), dh);
      x = add(x, linear(ctx, graph.get(p + "attn.wo"), graph.get(p + "attn.bo")));
      Tensor h2 = layer_norm(x, graph.get(p + "ln2.gamma"), graph.get(p + "ln2.beta"),
                             kLayerNormEps);
      Tensor f = linear(relu(linear(h2, graph.get(p + "ffn.w1"), graph.get(p + "ffn.b1"))),
                        graph.get(p + "ffn.w2"), graph.get(p + "ffn.b2"));
      x = add(x, f);
    }
    x = layer_norm(x, graph.get("final_ln.gamma"), graph.get("final_ln.beta"), kLayerNormEps);
    return linear(mean_pool(x, batch, cfg.seq_len), graph.get("cls.w"), graph.get("cls.b"));
  }

  Tensor forward_dense(const std::vector<int>& tokens, int batch) {
    return forward(tokens, batch, nullptr);
  }

  Tensor forward_gated(const std::vector<int>& tokens, int batch, const HeadMask& mask) {
    return forward(tokens, batch, constant(mask.values));
  }

  std::map<std::string, Array> parameter_arrays() const {
    std::map<std::string, Array> out;
    for (const auto& [name, t] : graph.parameters) out.emplace(name, t->value);
    return out;
  }

  void load_parameter_arrays(const std::map<std::string, Array>& params) {
    if (params.size() != graph.parameters.size())
      throw std::invalid_argument("load_parameter_arrays: parameter set mismatch");
    for (auto& [name, t] : graph.parameters) {
      auto it = params.find(name);
      if (it == params.end())
        throw std::invalid_argument("load_parameter_arrays: missing " + name);
      if (it->second.shape != t->value.shape)
        throw std::invalid_argument("load_parameter_arrays: shape mismatch for " + name);
      t->value = it->second;
    }
  }
};

}  // namespace bag
