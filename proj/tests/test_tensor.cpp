#include <doctest.h>

#include "bag/gradcheck.hpp"

using namespace bag;

TEST_CASE("forward basics") {
  Graph g;
  Tensor x = g.param("x", Array::scalar(3.0));
  Tensor y = mul(x, x);
  CHECK(y->value.data[0] == doctest::Approx(9.0));

  CHECK(sigmoid(constant(0.0))->value.data[0] == doctest::Approx(0.5));
  CHECK(softplus(constant(0.0))->value.data[0] == doctest::Approx(std::log(2.0)));
}

TEST_CASE("backward basics") {
  Graph g;
  Tensor x = g.param("x", Array::scalar(3.0));
  Tensor y = mul(x, x);
  g.backward(y);
  CHECK(x->grad.data[0] == doctest::Approx(6.0));

  Graph g2;
  Tensor z = g2.param("z", Array::scalar(0.0));
  Tensor s = sigmoid(z);
  g2.backward(s);
  CHECK(z->grad.data[0] == doctest::Approx(0.25));
}

TEST_CASE("gradient of sum(softmax(v)) is zero") {
  Graph g;
  std::mt19937_64 rng(1);
  Tensor v = g.param("v", Array::randn({1, 5}, rng, 1.0));
  g.backward(sum(softmax_rows(v)));
  for (double gv : v->grad.data) CHECK(std::abs(gv) < 1e-12);
}

TEST_CASE("softmax rows are probability distributions") {
  std::mt19937_64 rng(2);
  Tensor x = constant(Array::randn({7, 11}, rng, 3.0));
  Array y = softmax_rows(x)->value;
  for (int r = 0; r < 7; ++r) {
    double s = 0.0;
    for (int c = 0; c < 11; ++c) {
      CHECK(y.at(r, c) >= 0.0);
      s += y.at(r, c);
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("second backward on the same tape is rejected") {
  Graph g;
  Tensor x = g.param("x", Array::scalar(2.0));
  Tensor y = mul(x, x);
  g.backward(y);
  CHECK_THROWS_AS(g.backward(y), std::logic_error);
}

TEST_CASE("non-scalar backward is rejected") {
  Graph g;
  std::mt19937_64 rng(3);
  Tensor x = g.param("x", Array::randn({2, 2}, rng, 1.0));
  Tensor y = relu(x);
  CHECK_THROWS_AS(g.backward(y), std::invalid_argument);
}

TEST_CASE("shape mismatch raises") {
  Tensor a = constant(Array::zeros({2, 3}));
  Tensor b = constant(Array::zeros({3, 3}));
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(matmul(constant(Array::zeros({2, 3})), constant(Array::zeros({2, 3}))),
                  std::invalid_argument);
}

TEST_CASE("grad_check: quadratic loss is exact to float error") {
  Graph g;
  std::mt19937_64 rng(4);
  g.param("w", Array::randn({3, 3}, rng, 1.0));
  auto loss = [&] {
    Tensor w = g.get("w");
    return sum(mul(w, w));
  };
  auto report = grad_check(g, loss, {"w"}, 1e-5);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("grad_check: frozen parameter gets exactly zero gradient") {
  Graph g;
  std::mt19937_64 rng(5);
  g.param("w", Array::randn({2, 2}, rng, 1.0));
  g.param("frozen", Array::randn({2, 2}, rng, 1.0));
  g.backward(sum(mul(g.get("w"), g.get("w"))));
  for (double gv : g.get("frozen")->grad.data) CHECK(gv == 0.0);
}

namespace {

// Small random loss touching every differentiable op the model uses.
Tensor mixed_loss(Graph& g) {
  Tensor w = g.get("w");       // (4, 6)
  Tensor gamma = g.get("gamma");
  Tensor beta = g.get("beta");
  Tensor b = g.get("b");
  Tensor x = matmul(w, g.get("w2"));               // (4, 6)
  x = layer_norm(x, gamma, beta);
  x = linear(x, g.get("w3"), b);                   // (4, 6)
  Tensor sm = softmax_rows(x);
  Tensor lsm = log_softmax_rows(scale(x, 0.5));
  Tensor act = add(sigmoid(x), add(softplus(x), relu(sub(x, sm))));
  Tensor pooled = mean_pool(act, 2, 2);            // (2, 6)
  Array w_const({2, 6});
  for (size_t i = 0; i < w_const.data.size(); ++i) w_const.data[i] = 0.1 * (1 + (i % 5));
  return add(add(mean(mul(act, act)), dot_const(pooled, w_const)),
             add(sum(lsm), cross_entropy_mean(pooled, {1, 3})));
}

}  // namespace

TEST_CASE("grad_check: elementwise/norm/softmax op mix within 1e-4") {
  Graph g;
  std::mt19937_64 rng(6);
  g.param("w", Array::randn({4, 6}, rng, 0.7));
  g.param("w2", Array::randn({6, 6}, rng, 0.7));
  g.param("w3", Array::randn({6, 6}, rng, 0.7));
  g.param("gamma", Array::full({6}, 1.0));
  g.param("beta", Array::zeros({6}));
  g.param("b", Array::zeros({6}));
  auto report = grad_check(g, [&] { return mixed_loss(g); }, {"w", "w2", "w3", "gamma", "beta", "b"},
                           1e-5);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("grad_check: multihead attention + embedding + gates within 1e-4") {
  Graph g;
  std::mt19937_64 rng(7);
  int batch = 2, n = 3, H = 2, d = 4;
  g.param("emb", Array::randn({5, d}, rng, 0.5));
  g.param("wq", Array::randn({d, d}, rng, 0.5));
  g.param("wk", Array::randn({d, d}, rng, 0.5));
  g.param("wv", Array::randn({d, d}, rng, 0.5));
  g.param("gates", Array::randn({1, H}, rng, 0.5));
  std::vector<int> ids = {0, 1, 2, 3, 4, 1};
  auto loss = [&] {
    Tensor x = embedding(ids, g.get("emb"));
    Tensor q = matmul(x, g.get("wq"));
    Tensor k = matmul(x, g.get("wk"));
    Tensor v = matmul(x, g.get("wv"));
    Tensor ctx = multihead_attention(q, k, v, batch, n, H);
    ctx = scale_head_columns(ctx, slice_row(sigmoid(g.get("gates")), 0), d / H);
    return cross_entropy_mean(mean_pool(ctx, batch, n), {1, 2});
  };
  auto report = grad_check(g, loss, {"emb", "wq", "wk", "wv", "gates"}, 1e-5);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("forward+backward rerun is bit-identical") {
  auto run = [] {
    Graph g;
    std::mt19937_64 rng(8);
    g.param("w", Array::randn({4, 4}, rng, 0.5));
    g.param("gamma", Array::full({4}, 1.0));
    g.param("beta", Array::zeros({4}));
    Tensor x = layer_norm(softmax_rows(matmul(g.get("w"), g.get("w"))), g.get("gamma"),
                          g.get("beta"));
    Tensor loss = mean(mul(x, x));
    g.backward(loss);
    std::vector<double> out(g.get("w")->grad.data.begin(), g.get("w")->grad.data.end());
    out.push_back(loss->value.data[0]);
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("non-finite intermediate reports the op name") {
  Tensor big = constant(Array::full({1, 2}, 1e308));
  try {
    add(big, big);
    FAIL("expected throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("add") != std::string::npos);
  }
}
