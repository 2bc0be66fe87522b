#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "bag/array.hpp"

namespace bag {

using EigenRowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenRowMat>;
using ConstMatMap = Eigen::Map<const EigenRowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

inline MatMap as_mat(Array& a, int r, int c) { return MatMap(a.data.data(), r, c); }
inline ConstMatMap as_mat(const Array& a, int r, int c) {
  return ConstMatMap(a.data.data(), r, c);
}

// One recorded tape node. Tensors are shared_ptr<Node>; the tape is the
// DAG reachable from the loss node.
struct Node {
  Array value;
  Array grad;  // allocated on demand during backward
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // adds into parents' grads
  std::vector<Array> saved;             // forward intermediates for backward
  std::vector<int> iattrs;
  bool backward_spent = false;

  void ensure_grad() {
    if (grad.data.size() != value.data.size()) grad = Array(value.shape, 0.0);
  }
};

using Tensor = std::shared_ptr<Node>;

inline Tensor make_leaf(Array v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  return n;
}

inline Tensor constant(Array v) { return make_leaf(std::move(v), false); }
inline Tensor constant(double v) { return make_leaf(Array::scalar(v), false); }

namespace detail {

inline Tensor make_op(const char* op, std::vector<Tensor> parents, Array value,
                      std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backprop = std::move(backprop);
  if (!n->value.all_finite())
    throw std::runtime_error(std::string("non-finite values produced by op '") + op + "'");
  return n;
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a->value.shape) + " vs " + shape_str(b->value.shape));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(Tensor a, Tensor b) {
  detail::check_same_shape("add", a, b);
  Array v = a->value;
  for (size_t i = 0; i < v.data.size(); ++i) v.data[i] += b->value.data[i];
  return detail::make_op("add", {a, b}, std::move(v), [](Node& n) {
    for (int p = 0; p < 2; ++p) {
      Node& par = *n.parents[p];
      if (!par.requires_grad) continue;
      par.ensure_grad();
      for (size_t i = 0; i < n.grad.data.size(); ++i) par.grad.data[i] += n.grad.data[i];
    }
  });
}

inline Tensor sub(Tensor a, Tensor b) {
  detail::check_same_shape("sub", a, b);
  Array v = a->value;
  for (size_t i = 0; i < v.data.size(); ++i) v.data[i] -= b->value.data[i];
  return detail::make_op("sub", {a, b}, std::move(v), [](Node& n) {
    for (int p = 0; p < 2; ++p) {
      Node& par = *n.parents[p];
      if (!par.requires_grad) continue;
      par.ensure_grad();
      double sign = p == 0 ? 1.0 : -1.0;
      for (size_t i = 0; i < n.grad.data.size(); ++i) par.grad.data[i] += sign * n.grad.data[i];
    }
  });
}

inline Tensor mul(Tensor a, Tensor b) {
  detail::check_same_shape("mul", a, b);
  Array v = a->value;
  for (size_t i = 0; i < v.data.size(); ++i) v.data[i] *= b->value.data[i];
  return detail::make_op("mul", {a, b}, std::move(v), [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < n.grad.data.size(); ++i)
        pa.grad.data[i] += n.grad.data[i] * pb.value.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < n.grad.data.size(); ++i)
        pb.grad.data[i] += n.grad.data[i] * pa.value.data[i];
    }
  });
}

inline Tensor scale(Tensor a, double c) {
  Array v = a->value;
  for (double& x : v.data) x *= c;
  return detail::make_op("scale", {a}, std::move(v), [c](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    for (size_t i = 0; i < n.grad.data.size(); ++i) pa.grad.data[i] += c * n.grad.data[i];
  });
}

inline Tensor add_scalar(Tensor a, double c) {
  Array v = a->value;
  for (double& x : v.data) x += c;
  return detail::make_op("add_scalar", {a}, std::move(v), [](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    for (size_t i = 0; i < n.grad.data.size(); ++i) pa.grad.data[i] += n.grad.data[i];
  });
}

inline Tensor relu(Tensor a) {
  Array v = a->value;
  for (double& x : v.data) x = x > 0.0 ? x : 0.0;
  return detail::make_op("relu", {a}, std::move(v), [](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    for (size_t i = 0; i < n.grad.data.size(); ++i)
      if (pa.value.data[i] > 0.0) pa.grad.data[i] += n.grad.data[i];
  });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus_scalar(double x) {
  // log(1+e^x), overflow-safe
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

inline Tensor sigmoid(Tensor a) {
  Array v = a->value;
  for (double& x : v.data) x = sigmoid_scalar(x);
  Tensor out = detail::make_op("sigmoid", {a}, std::move(v), [](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    for (size_t i = 0; i < n.grad.data.size(); ++i) {
      double y = n.value.data[i];
      pa.grad.data[i] += n.grad.data[i] * y * (1.0 - y);
    }
  });
  return out;
}

inline Tensor softplus(Tensor a) {
  Array v = a->value;
  for (double& x : v.data) x = softplus_scalar(x);
  return detail::make_op("softplus", {a}, std::move(v), [](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    for (size_t i = 0; i < n.grad.data.size(); ++i)
      pa.grad.data[i] += n.grad.data[i] * sigmoid_scalar(pa.value.data[i]);
  });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(Tensor a) {
  double s = 0.0;
  for (double x : a->value.data) s += x;
  return detail::make_op("sum", {a}, Array::scalar(s), [](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    double g = n.grad.data[0];
    for (double& x : pa.grad.data) x += g;
  });
}

inline Tensor mean(Tensor a) {
  if (a->value.data.empty()) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a->value.numel()));
}

// ---------------------------------------------------------------- linear algebra

inline Tensor matmul(Tensor a, Tensor b) {
  if (a->value.shape.size() != 2 || b->value.shape.size() != 2 ||
      a->value.shape[1] != b->value.shape[0])
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a->value.shape) +
                                " x " + shape_str(b->value.shape));
  int M = a->value.shape[0], K = a->value.shape[1], N = b->value.shape[1];
  Array v({M, N});
  as_mat(v, M, N).noalias() = as_mat(a->value, M, K) * as_mat(b->value, K, N);
  return detail::make_op("matmul", {a, b}, std::move(v), [M, K, N](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    auto g = as_mat(n.grad, M, N);
    if (pa.requires_grad) {
      pa.ensure_grad();
      as_mat(pa.grad, M, K).noalias() += g * as_mat(pb.value, K, N).transpose();
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      as_mat(pb.grad, K, N).noalias() += as_mat(pa.value, M, K).transpose() * g;
    }
  });
}

// X(N,K) * W(K,M) + b(M) broadcast over rows.
inline Tensor linear(Tensor x, Tensor w, Tensor b) {
  int N = x->value.shape.at(0), K = x->value.shape.at(1);
  if (w->value.shape.at(0) != K || b->value.numel() != w->value.shape.at(1))
    throw std::invalid_argument("linear: incompatible shapes");
  int M = w->value.shape.at(1);
  Array v({N, M});
  auto out = as_mat(v, N, M);
  out.noalias() = as_mat(x->value, N, K) * as_mat(w->value, K, M);
  out.rowwise() += ConstVecMap(b->value.data.data(), M).transpose();
  return detail::make_op("linear", {x, w, b}, std::move(v), [N, K, M](Node& n) {
    Node& px = *n.parents[0];
    Node& pw = *n.parents[1];
    Node& pb = *n.parents[2];
    auto g = as_mat(n.grad, N, M);
    if (px.requires_grad) {
      px.ensure_grad();
      as_mat(px.grad, N, K).noalias() += g * as_mat(pw.value, K, M).transpose();
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      as_mat(pw.grad, K, M).noalias() += as_mat(px.value, N, K).transpose() * g;
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      VecMap(pb.grad.data.data(), M) += g.colwise().sum().transpose();
    }
  });
}

// ---------------------------------------------------------------- softmax family

inline Tensor softmax_rows(Tensor a) {
  if (a->value.shape.size() != 2) throw std::invalid_argument("softmax_rows: need 2-D input");
  int R = a->value.shape[0], C = a->value.shape[1];
  Array v = a->value;
  for (int r = 0; r < R; ++r) {
    double* row = v.data.data() + static_cast<size_t>(r) * C;
    double m = *std::max_element(row, row + C);
    double s = 0.0;
    for (int c = 0; c < C; ++c) {
      row[c] = std::exp(row[c] - m);
      s += row[c];
    }
    for (int c = 0; c < C; ++c) row[c] /= s;
  }
  return detail::make_op("softmax", {a}, std::move(v), [R, C](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    for (int r = 0; r < R; ++r) {
      const double* y = n.value.data.data() + static_cast<size_t>(r) * C;
      const double* g = n.grad.data.data() + static_cast<size_t>(r) * C;
      double dot = 0.0;
      for (int c = 0; c < C; ++c) dot += g[c] * y[c];
      double* gx = pa.grad.data.data() + static_cast<size_t>(r) * C;
      for (int c = 0; c < C; ++c) gx[c] += y[c] * (g[c] - dot);
    }
  });
}

inline Tensor log_softmax_rows(Tensor a) {
  if (a->value.shape.size() != 2) throw std::invalid_argument("log_softmax_rows: need 2-D input");
  int R = a->value.shape[0], C = a->value.shape[1];
  Array v = a->value;
  for (int r = 0; r < R; ++r) {
    double* row = v.data.data() + static_cast<size_t>(r) * C;
    double m = *std::max_element(row, row + C);
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += std::exp(row[c] - m);
    double lse = m + std::log(s);
    for (int c = 0; c < C; ++c) row[c] -= lse;
  }
  return detail::make_op("log_softmax", {a}, std::move(v), [R, C](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    for (int r = 0; r < R; ++r) {
      const double* lp = n.value.data.data() + static_cast<size_t>(r) * C;
      const double* g = n.grad.data.data() + static_cast<size_t>(r) * C;
      double gs = 0.0;
      for (int c = 0; c < C; ++c) gs += g[c];
      double* gx = pa.grad.data.data() + static_cast<size_t>(r) * C;
      for (int c = 0; c < C; ++c) gx[c] += g[c] - std::exp(lp[c]) * gs;
    }
  });
}

// ---------------------------------------------------------------- layer norm

inline Tensor layer_norm(Tensor x, Tensor gamma, Tensor beta, double eps = 1e-5) {
  int R = x->value.shape.at(0), C = x->value.shape.at(1);
  if (gamma->value.numel() != C || beta->value.numel() != C)
    throw std::invalid_argument("layer_norm: gamma/beta size mismatch");
  Array v({R, C});
  Array xhat({R, C});
  Array invstd({R});
  for (int r = 0; r < R; ++r) {
    const double* row = x->value.data.data() + static_cast<size_t>(r) * C;
    double m = 0.0;
    for (int c = 0; c < C; ++c) m += row[c];
    m /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) var += (row[c] - m) * (row[c] - m);
    var /= C;
    double is = 1.0 / std::sqrt(var + eps);
    invstd.data[r] = is;
    for (int c = 0; c < C; ++c) {
      double xh = (row[c] - m) * is;
      xhat.at(r, c) = xh;
      v.at(r, c) = xh * gamma->value.data[c] + beta->value.data[c];
    }
  }
  Tensor out = detail::make_op("layer_norm", {x, gamma, beta}, std::move(v), [R, C](Node& n) {
    Node& px = *n.parents[0];
    Node& pg = *n.parents[1];
    Node& pb = *n.parents[2];
    const Array& xhat = n.saved[0];
    const Array& invstd = n.saved[1];
    if (pg.requires_grad) pg.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    if (px.requires_grad) px.ensure_grad();
    for (int r = 0; r < R; ++r) {
      const double* g = n.grad.data.data() + static_cast<size_t>(r) * C;
      const double* xh = xhat.data.data() + static_cast<size_t>(r) * C;
      double sum_gy = 0.0, sum_gyxh = 0.0;
      for (int c = 0; c < C; ++c) {
        double gy = g[c] * pg.value.data[c];
        sum_gy += gy;
        sum_gyxh += gy * xh[c];
      }
      if (px.requires_grad) {
        double* gx = px.grad.data.data() + static_cast<size_t>(r) * C;
        double is = invstd.data[r];
        for (int c = 0; c < C; ++c) {
          double gy = g[c] * pg.value.data[c];
          gx[c] += is * (gy - sum_gy / C - xh[c] * sum_gyxh / C);
        }
      }
      if (pg.requires_grad)
        for (int c = 0; c < C; ++c) pg.grad.data[c] += g[c] * xh[c];
      if (pb.requires_grad)
        for (int c = 0; c < C; ++c) pb.grad.data[c] += g[c];
    }
  });
  out->saved.push_back(std::move(xhat));
  out->saved.push_back(std::move(invstd));
  return out;
}

// ---------------------------------------------------------------- gather / pooling

inline Tensor embedding(const std::vector<int>& ids, Tensor table) {
  int V = table->value.shape.at(0), D = table->value.shape.at(1);
  int N = static_cast<int>(ids.size());
  Array v({N, D});
  for (int i = 0; i < N; ++i) {
    if (ids[i] < 0 || ids[i] >= V)
      throw std::out_of_range("embedding: token id " + std::to_string(ids[i]) +
                              " outside vocabulary of size " + std::to_string(V));
    std::copy_n(table->value.data.data() + static_cast<size_t>(ids[i]) * D, D,
                v.data.data() + static_cast<size_t>(i) * D);
  }
  Tensor out = detail::make_op("embedding", {table}, std::move(v), [ids, D](Node& n) {
    Node& pt = *n.parents[0];
    pt.ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      const double* g = n.grad.data.data() + i * D;
      double* gt = pt.grad.data.data() + static_cast<size_t>(ids[i]) * D;
      for (int c = 0; c < D; ++c) gt[c] += g[c];
    }
  });
  return out;
}

// (B*n, D) -> (B, D), mean over each group of n consecutive rows.
inline Tensor mean_pool(Tensor x, int batch, int n) {
  int R = x->value.shape.at(0), D = x->value.shape.at(1);
  if (R != batch * n) throw std::invalid_argument("mean_pool: row count mismatch");
  Array v({batch, D});
  for (int b = 0; b < batch; ++b)
    for (int t = 0; t < n; ++t) {
      const double* row = x->value.data.data() + (static_cast<size_t>(b) * n + t) * D;
      for (int c = 0; c < D; ++c) v.at(b, c) += row[c] / n;
    }
  return detail::make_op("mean_pool", {x}, std::move(v), [batch, n, D](Node& n_) {
    Node& px = *n_.parents[0];
    px.ensure_grad();
    for (int b = 0; b < batch; ++b)
      for (int t = 0; t < n; ++t) {
        double* gx = px.grad.data.data() + (static_cast<size_t>(b) * n + t) * D;
        const double* g = n_.grad.data.data() + static_cast<size_t>(b) * D;
        for (int c = 0; c < D; ++c) gx[c] += g[c] / n;
      }
  });
}

// ---------------------------------------------------------------- attention

// Q,K,V: (B*n, d) with d = H*dh; output (B*n, d), head h occupying columns
// [h*dh, (h+1)*dh). Softmax row probabilities are cached for backward.
inline Tensor multihead_attention(Tensor q, Tensor k, Tensor v, int batch, int n, int heads) {
  int R = q->value.shape.at(0), d = q->value.shape.at(1);
  if (R != batch * n || d % heads != 0)
    throw std::invalid_argument("multihead_attention: bad shapes");
  detail::check_same_shape("multihead_attention", q, k);
  detail::check_same_shape("multihead_attention", q, v);
  int dh = d / heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Array out({R, d});
  Array probs({batch * heads * n, n});
  for (int b = 0; b < batch; ++b) {
    ConstMatMap qm(q->value.data.data() + static_cast<size_t>(b) * n * d, n, d);
    ConstMatMap km(k->value.data.data() + static_cast<size_t>(b) * n * d, n, d);
    ConstMatMap vm(v->value.data.data() + static_cast<size_t>(b) * n * d, n, d);
    MatMap om(out.data.data() + static_cast<size_t>(b) * n * d, n, d);
    for (int h = 0; h < heads; ++h) {
      auto qh = qm.block(0, h * dh, n, dh);
      auto kh = km.block(0, h * dh, n, dh);
      auto vh = vm.block(0, h * dh, n, dh);
      MatMap ph(probs.data.data() + (static_cast<size_t>(b) * heads + h) * n * n, n, n);
      ph.noalias() = qh * kh.transpose() * scale;
      for (int r = 0; r < n; ++r) {
        double m = ph.row(r).maxCoeff();
        ph.row(r) = (ph.row(r).array() - m).exp();
        ph.row(r) /= ph.row(r).sum();
      }
      om.block(0, h * dh, n, dh).noalias() = ph * vh;
    }
  }
  Tensor node = detail::make_op(
      "multihead_attention", {q, k, v}, std::move(out), [batch, n, heads, d, dh, scale](Node& nd) {
        Node& pq = *nd.parents[0];
        Node& pk = *nd.parents[1];
        Node& pv = *nd.parents[2];
        pq.ensure_grad();
        pk.ensure_grad();
        pv.ensure_grad();
        const Array& probs = nd.saved[0];
        EigenRowMat gp(n, n), gs(n, n);
        for (int b = 0; b < batch; ++b) {
          size_t base = static_cast<size_t>(b) * n * d;
          ConstMatMap qm(pq.value.data.data() + base, n, d);
          ConstMatMap km(pk.value.data.data() + base, n, d);
          ConstMatMap vm(pv.value.data.data() + base, n, d);
          ConstMatMap gm(nd.grad.data.data() + base, n, d);
          MatMap gqm(pq.grad.data.data() + base, n, d);
          MatMap gkm(pk.grad.data.data() + base, n, d);
          MatMap gvm(pv.grad.data.data() + base, n, d);
          for (int h = 0; h < heads; ++h) {
            ConstMatMap ph(probs.data.data() + (static_cast<size_t>(b) * heads + h) * n * n, n,
                           n);
            auto go = gm.block(0, h * dh, n, dh);
            gvm.block(0, h * dh, n, dh).noalias() += ph.transpose() * go;
            gp.noalias() = go * vm.block(0, h * dh, n, dh).transpose();
            for (int r = 0; r < n; ++r) {
              double dot = gp.row(r).cwiseProduct(ph.row(r)).sum();
              gs.row(r) = ph.row(r).array() * (gp.row(r).array() - dot);
            }
            gqm.block(0, h * dh, n, dh).noalias() += gs * km.block(0, h * dh, n, dh) * scale;
            gkm.block(0, h * dh, n, dh).noalias() +=
                gs.transpose() * qm.block(0, h * dh, n, dh) * scale;
          }
        }
      });
  node->saved.push_back(std::move(probs));
  return node;
}

// Scales each dh-wide column block h of x by gates[h]. gates: (H) tensor.
inline Tensor scale_head_columns(Tensor x, Tensor gates, int dh) {
  int R = x->value.shape.at(0), d = x->value.shape.at(1);
  int H = static_cast<int>(gates->value.numel());
  if (H * dh != d) throw std::invalid_argument("scale_head_columns: H*dh != d");
  Array v({R, d});
  for (int r = 0; r < R; ++r) {
    const double* xr = x->value.data.data() + static_cast<size_t>(r) * d;
    double* vr = v.data.data() + static_cast<size_t>(r) * d;
    for (int h = 0; h < H; ++h) {
      double g = gates->value.data[h];
      for (int c = h * dh; c < (h + 1) * dh; ++c) vr[c] = xr[c] * g;
    }
  }
  return detail::make_op("scale_head_columns", {x, gates}, std::move(v), [R, d, H, dh](Node& n) {
    Node& px = *n.parents[0];
    Node& pg = *n.parents[1];
    if (px.requires_grad) px.ensure_grad();
    if (pg.requires_grad) pg.ensure_grad();
    for (int r = 0; r < R; ++r) {
      const double* g = n.grad.data.data() + static_cast<size_t>(r) * d;
      const double* xr = px.value.data.data() + static_cast<size_t>(r) * d;
      for (int h = 0; h < H; ++h) {
        double gv = pg.value.data[h];
        double acc = 0.0;
        for (int c = h * dh; c < (h + 1) * dh; ++c) {
          if (px.requires_grad) px.grad.data[static_cast<size_t>(r) * d + c] += g[c] * gv;
          acc += g[c] * xr[c];
        }
        if (pg.requires_grad) pg.grad.data[h] += acc;
      }
    }
  });
}

// Extracts row r of a 2-D tensor as a 1-D tensor.
inline Tensor slice_row(Tensor m, int r) {
  int R = m->value.shape.at(0), C = m->value.shape.at(1);
  if (r < 0 || r >= R) throw std::out_of_range("slice_row: index");
  Array v({C});
  std::copy_n(m->value.data.data() + static_cast<size_t>(r) * C, C, v.data.data());
  return detail::make_op("slice_row", {m}, std::move(v), [r, C](Node& n) {
    Node& pm = *n.parents[0];
    pm.ensure_grad();
    for (int c = 0; c < C; ++c) pm.grad.data[static_cast<size_t>(r) * C + c] += n.grad.data[c];
  });
}

// Forward takes the hard values; backward passes gradients through to the
// soft tensor unchanged.
inline Tensor straight_through(Tensor soft, Array hard) {
  if (!soft->value.same_shape(hard))
    throw std::invalid_argument("straight_through: shape mismatch");
  return detail::make_op("straight_through", {soft}, std::move(hard), [](Node& n) {
    Node& ps = *n.parents[0];
    ps.ensure_grad();
    for (size_t i = 0; i < n.grad.data.size(); ++i) ps.grad.data[i] += n.grad.data[i];
  });
}

// ---------------------------------------------------------------- losses

inline Tensor cross_entropy_mean(Tensor logits, const std::vector<int>& labels) {
  int B = logits->value.shape.at(0), C = logits->value.shape.at(1);
  if (static_cast<int>(labels.size()) != B)
    throw std::invalid_argument("cross_entropy_mean: label count mismatch");
  Array probs({B, C});
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    const double* row = logits->value.data.data() + static_cast<size_t>(b) * C;
    if (labels[b] < 0 || labels[b] >= C) throw std::out_of_range("cross_entropy_mean: label");
    double m = *std::max_element(row, row + C);
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += std::exp(row[c] - m);
    double lse = m + std::log(s);
    for (int c = 0; c < C; ++c) probs.at(b, c) = std::exp(row[c] - lse);
    loss += lse - row[labels[b]];
  }
  loss /= B;
  Tensor out =
      detail::make_op("cross_entropy", {logits}, Array::scalar(loss), [labels, B, C](Node& n) {
        Node& pl = *n.parents[0];
        pl.ensure_grad();
        const Array& probs = n.saved[0];
        double g = n.grad.data[0] / B;
        for (int b = 0; b < B; ++b) {
          double* gx = pl.grad.data.data() + static_cast<size_t>(b) * C;
          const double* p = probs.data.data() + static_cast<size_t>(b) * C;
          for (int c = 0; c < C; ++c) gx[c] += g * p[c];
          gx[labels[b]] -= g;
        }
      });
  out->saved.push_back(std::move(probs));
  return out;
}

// sum(x .* w) with w constant.
inline Tensor dot_const(Tensor x, const Array& w) {
  if (!x->value.same_shape(w)) throw std::invalid_argument("dot_const: shape mismatch");
  double s = 0.0;
  for (size_t i = 0; i < w.data.size(); ++i) s += x->value.data[i] * w.data[i];
  Array wc = w;
  Tensor out = detail::make_op("dot_const", {x}, Array::scalar(s), [](Node& n) {
    Node& px = *n.parents[0];
    px.ensure_grad();
    double g = n.grad.data[0];
    const Array& w = n.saved[0];
    for (size_t i = 0; i < w.data.size(); ++i) px.grad.data[i] += g * w.data[i];
  });
  out->saved.push_back(std::move(wc));
  return out;
}

// ---------------------------------------------------------------- graph

// Parameter registry plus backward driver. A Graph owns the trainable
// leaves; the tape itself is rebuilt by each forward call.
struct Graph {
  std::map<std::string, Tensor> parameters;

  Tensor param(const std::string& name, Array init) {
    auto it = parameters.find(name);
    if (it != parameters.end()) throw std::invalid_argument("duplicate parameter: " + name);
    Tensor t = make_leaf(std::move(init), true);
    parameters.emplace(name, t);
    return t;
  }

  Tensor get(const std::string& name) const {
    auto it = parameters.find(name);
    if (it == parameters.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  void zero_grad() {
    for (auto& [name, p] : parameters) {
      p->ensure_grad();
      std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
    }
  }

  // Reverse-mode pass from a scalar loss. Rejects a second backward on the
  // same forward tape.
  void backward(const Tensor& loss) {
    if (loss->value.numel() != 1)
      throw std::invalid_argument("backward: output must be scalar, got " +
                                  shape_str(loss->value.shape));
    if (loss->backward_spent)
      throw std::logic_error("backward: called twice on the same forward tape");
    loss->backward_spent = true;

    std::vector<Node*> order;
    topo_sort(loss.get(), order);
    for (Node* n : order) {
      n->ensure_grad();
      std::fill(n->grad.data.begin(), n->grad.data.end(), 0.0);
    }
    loss->grad.data[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backprop) (*it)->backprop(**it);
  }

  static void topo_sort(Node* root, std::vector<Node*>& order) {
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root, 0});
    visited.insert(root);
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node* p = node->parents[idx++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }
};

}  // namespace bag
