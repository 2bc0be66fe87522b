#include <doctest.h>

#include "bag/checkpoint.hpp"
#include "bag/gradcheck.hpp"

using namespace bag;

namespace {

ModelConfig tiny_config() {
  ModelConfig mc;
  mc.vocab_size = 11;
  mc.seq_len = 8;
  mc.hidden = 16;
  mc.layers = 3;
  mc.heads = 4;
  mc.ffn_dim = 24;
  mc.num_classes = 3;
  return mc;
}

std::vector<int> random_tokens(const ModelConfig& mc, int batch, std::mt19937_64& rng) {
  std::vector<int> tokens(static_cast<size_t>(batch) * mc.seq_len);
  std::uniform_int_distribution<int> dist(0, mc.vocab_size - 1);
  for (int& t : tokens) t = dist(rng);
  return tokens;
}

}  // namespace

TEST_CASE("all-ones gated forward equals dense forward bit-exactly") {
  ModelConfig mc = tiny_config();
  EncoderModel m = EncoderModel::init(mc, 42);
  std::mt19937_64 rng(1);
  auto tokens = random_tokens(mc, 3, rng);
  Array dense = m.forward_dense(tokens, 3)->value;
  HeadMask ones{Array::full({mc.layers, mc.heads}, 1.0), MaskKind::soft, 1.0};
  Array gated = m.forward_gated(tokens, 3, ones)->value;
  CHECK(dense.data == gated.data);
}

TEST_CASE("zero mask equals dense forward with output projections zeroed") {
  ModelConfig mc = tiny_config();
  EncoderModel m = EncoderModel::init(mc, 43);
  std::mt19937_64 rng(2);
  auto tokens = random_tokens(mc, 2, rng);
  HeadMask zeros{Array::zeros({mc.layers, mc.heads}), MaskKind::soft, 0.1};
  Array gated = m.forward_gated(tokens, 2, zeros)->value;

  auto params = m.parameter_arrays();
  for (int l = 0; l < mc.layers; ++l) {
    Array& wo = params.at("layer" + std::to_string(l) + ".attn.wo");
    std::fill(wo.data.begin(), wo.data.end(), 0.0);
  }
  Array oracle = InferenceEngine(mc, params).logits(
      tokens, 2, Array::full({mc.layers, mc.heads}, 1.0), false);
  for (size_t i = 0; i < gated.data.size(); ++i)
    CHECK(gated.data[i] == doctest::Approx(oracle.data[i]).epsilon(1e-9));
}

TEST_CASE("half mask equals dense forward with halved output projections") {
  ModelConfig mc = tiny_config();
  EncoderModel m = EncoderModel::init(mc, 44);
  std::mt19937_64 rng(3);
  auto tokens = random_tokens(mc, 2, rng);
  HeadMask halves{Array::full({mc.layers, mc.heads}, 0.5), MaskKind::soft, 0.5};
  Array gated = m.forward_gated(tokens, 2, halves)->value;

  auto params = m.parameter_arrays();
  for (int l = 0; l < mc.layers; ++l) {
    Array& wo = params.at("layer" + std::to_string(l) + ".attn.wo");
    for (double& v : wo.data) v *= 0.5;
  }
  Array oracle = InferenceEngine(mc, params).logits(
      tokens, 2, Array::full({mc.layers, mc.heads}, 1.0), false);
  for (size_t i = 0; i < gated.data.size(); ++i)
    CHECK(gated.data[i] == doctest::Approx(oracle.data[i]).epsilon(1e-9));
}

TEST_CASE("zeroing one head equals zeroing its output-projection rows") {
  ModelConfig mc = tiny_config();
  EncoderModel m = EncoderModel::init(mc, 45);
  std::mt19937_64 rng(4);
  auto tokens = random_tokens(mc, 2, rng);
  int dh = mc.head_dim();
  int target_layer = 1, target_head = 2;
  Array mask = Array::full({mc.layers, mc.heads}, 1.0);
  mask.at(target_layer, target_head) = 0.0;
  Array gated = m.forward_gated(tokens, 2, {mask, MaskKind::soft, 1.0})->value;

  auto params = m.parameter_arrays();
  Array& wo = params.at("layer" + std::to_string(target_layer) + ".attn.wo");
  for (int r = target_head * dh; r < (target_head + 1) * dh; ++r)
    for (int c = 0; c < mc.hidden; ++c) wo.at(r, c) = 0.0;
  Array oracle = InferenceEngine(mc, params).logits(
      tokens, 2, Array::full({mc.layers, mc.heads}, 1.0), false);
  for (size_t i = 0; i < gated.data.size(); ++i)
    CHECK(gated.data[i] == doctest::Approx(oracle.data[i]).epsilon(1e-9));
}

TEST_CASE("hard-skip forward equals gated forward on 100 random binary masks") {
  ModelConfig mc = tiny_config();
  EncoderModel m = EncoderModel::init(mc, 46);
  auto params = m.parameter_arrays();
  InferenceEngine engine(mc, params);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    auto tokens = random_tokens(mc, 2, rng);
    Array mask({mc.layers, mc.heads});
    for (double& v : mask.data) v = (rng() & 1) ? 1.0 : 0.0;
    // keep at least one active head overall so the mask is a plausible k>=1 mask
    mask.data[rng() % mask.data.size()] = 1.0;
    Array gated = m.forward_gated(tokens, 2, {mask, MaskKind::hard_global, 0.5})->value;
    Array skipped = engine.logits(tokens, 2, mask, true);
    for (size_t i = 0; i < gated.data.size(); ++i)
      CHECK(std::abs(gated.data[i] - skipped.data[i]) < 1e-9);
  }
}

TEST_CASE("hard-skip rejects non-binary masks; dense path rejects bad input") {
  ModelConfig mc = tiny_config();
  EncoderModel m = EncoderModel::init(mc, 47);
  auto params = m.parameter_arrays();
  InferenceEngine engine(mc, params);
  std::mt19937_64 rng(6);
  auto tokens = random_tokens(mc, 1, rng);
  CHECK_THROWS_AS(engine.logits(tokens, 1, Array::full({mc.layers, mc.heads}, 0.5), true),
                  std::invalid_argument);
  CHECK_THROWS_AS(m.forward_dense({}, 0), std::invalid_argument);
  std::vector<int> bad_tokens(mc.seq_len, mc.vocab_size + 5);
  CHECK_THROWS_AS(m.forward_dense(bad_tokens, 1), std::out_of_range);
}

TEST_CASE("attention arithmetic scales with the active-head count") {
  ModelConfig mc = tiny_config();
  EncoderModel m = EncoderModel::init(mc, 48);
  auto params = m.parameter_arrays();
  InferenceEngine engine(mc, params);
  std::mt19937_64 rng(7);
  auto tokens = random_tokens(mc, 2, rng);

  OpCounter full;
  engine.logits(tokens, 2, Array::full({mc.layers, mc.heads}, 1.0), true, &full);
  Array mask = Array::zeros({mc.layers, mc.heads});
  int active = 0;
  for (int l = 0; l < mc.layers; ++l) {
    mask.at(l, 0) = 1.0;
    ++active;
  }
  OpCounter part;
  engine.logits(tokens, 2, mask, true, &part);
  double frac = static_cast<double>(active) / (mc.layers * mc.heads);
  CHECK(part.attn_macs == static_cast<uint64_t>(full.attn_macs * frac));
  CHECK(part.qkv_macs == static_cast<uint64_t>(full.qkv_macs * frac));
  CHECK(part.out_proj_macs == static_cast<uint64_t>(full.out_proj_macs * frac));
}

TEST_CASE("attention probability rows sum to one") {
  std::mt19937_64 rng(8);
  int batch = 2, n = 5, H = 2, d = 8;
  Tensor q = constant(Array::randn({batch * n, d}, rng, 1.0));
  Tensor k = constant(Array::randn({batch * n, d}, rng, 1.0));
  Tensor v = constant(Array::randn({batch * n, d}, rng, 1.0));
  Tensor ctx = multihead_attention(q, k, v, batch, n, H);
  const Array& probs = ctx->saved[0];
  int rows = batch * H * n;
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < n; ++c) s += probs.data[static_cast<size_t>(r) * n + c];
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("gradients through gated forward match finite differences") {
  ModelConfig mc;
  mc.vocab_size = 7;
  mc.seq_len = 4;
  mc.hidden = 8;
  mc.layers = 2;
  mc.heads = 2;
  mc.ffn_dim = 12;
  mc.num_classes = 2;
  EncoderModel m = EncoderModel::init(mc, 49);
  std::mt19937_64 rng(9);
  auto tokens = random_tokens(mc, 2, rng);
  std::vector<int> labels = {0, 1};
  auto loss = [&] {
    Tensor gates = m.soft_gates_at(0.6);
    Tensor logits = m.forward(tokens, 2, gates);
    return add(cross_entropy_mean(logits, labels), scale(mean(gates), 0.05));
  };
  auto report = grad_check(m.graph, loss,
                           {"gate.a", "gate.s", "layer0.attn.wq", "layer1.ffn.w1",
                            "embed.tok", "final_ln.gamma", "cls.w"},
                           1e-5);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("deterministic logits for fixed seed and input") {
  ModelConfig mc = tiny_config();
  std::mt19937_64 rng(10);
  auto tokens = random_tokens(mc, 2, rng);
  auto run = [&] {
    EncoderModel m = EncoderModel::init(mc, 50);
    return m.forward_dense(tokens, 2)->value.data;
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint save -> load -> save is byte-identical") {
  ModelConfig mc = tiny_config();
  EncoderModel m = EncoderModel::init(mc, 51);
  Checkpoint c = Checkpoint::from_model(m);
  c.mode = "dense";
  c.seed = 51;
  c.best_val_acc = 0.987654321;
  c.epoch = 3;
  c.config_echo = {"epochs=3", "batch_size=8"};
  c.save("ckpt_a.bin");
  Checkpoint loaded = Checkpoint::load("ckpt_a.bin");
  loaded.save("ckpt_b.bin");

  std::ifstream a("ckpt_a.bin", std::ios::binary), b("ckpt_b.bin", std::ios::binary);
  std::vector<char> da((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::vector<char> db((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(da == db);
  CHECK(loaded.cfg == mc);
  CHECK(loaded.mode == "dense");
  CHECK(loaded.params.at("cls.w").data == m.graph.get("cls.w")->value.data);

  EncoderModel restored = loaded.to_model();
  std::mt19937_64 rng(11);
  auto tokens = random_tokens(mc, 2, rng);
  CHECK(restored.forward_dense(tokens, 2)->value.data == m.forward_dense(tokens, 2)->value.data);
  std::remove("ckpt_a.bin");
  std::remove("ckpt_b.bin");
}
