#pragma once

#include "bag/model.hpp"

namespace bag {

// Multiply-accumulate counts for the attention path, split so tests can
// assert that hard skipping scales with the active-head count.
struct OpCounter {
  uint64_t qkv_macs = 0;
  uint64_t attn_macs = 0;
  uint64_t out_proj_macs = 0;
};

// Tape-free forward pass over raw parameter arrays. Computes per head so
// that dense (all gates 1), soft-gated and hard-skip runs share one code
// path; with skip_inactive set, heads with gate exactly 0 are skipped:
// their Q/K/V projection columns, attention and output-projection rows are
// never touched.
class InferenceEngine {
 public:
  InferenceEngine(const ModelConfig& cfg, const std::map<std::string, Array>& params)
      : cfg_(cfg), params_(&params) {
    cfg.validate();
  }
  // The engine keeps a pointer into the caller's map; a temporary would dangle.
  InferenceEngine(const ModelConfig&, std::map<std::string, Array>&&) = delete;

  Array logits(const std::vector<int>& tokens, int batch, const Array& gates,
               bool skip_inactive, OpCounter* counter = nullptr) const {
    int n = cfg_.seq_len, d = cfg_.hidden, H = cfg_.heads, dh = cfg_.head_dim();
    if (batch < 1) throw std::invalid_argument("infer: empty batch");
    if (static_cast<int>(tokens.size()) != batch * n)
      throw std::invalid_argument("infer: token count != batch * seq_len");
    if (gates.shape != std::vector<int>{cfg_.layers, cfg_.heads})
      throw std::invalid_argument("infer: gate matrix must be (L, H)");
    if (skip_inactive)
      for (double g : gates.data)
        if (g != 0.0 && g != 1.0)
          throw std::invalid_argument("infer: hard-skip requires a binary mask");

    int R = batch * n;
    const Array& tok = at("embed.tok");
    const Array& pos = at("embed.pos");
    EigenRowMat x(R, d);
    for (int b = 0; b < batch; ++b)
      for (int t = 0; t < n; ++t) {
        int id = tokens[static_cast<size_t>(b) * n + t];
        if (id < 0 || id >= cfg_.vocab_size) throw std::out_of_range("infer: token id");
        x.row(static_cast<size_t>(b) * n + t) =
            ConstVecMap(tok.data.data() + static_cast<size_t>(id) * d, d).transpose() +
            ConstVecMap(pos.data.data() + static_cast<size_t>(t) * d, d).transpose();
      }

    EigenRowMat h(R, d), q(R, d), k(R, d), v(R, d), ctx(R, d), tmp(R, cfg_.ffn_dim);
    double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int l = 0; l < cfg_.layers; ++l) {
      std::string p = "layer" + std::to_string(l) + ".";
      layer_norm_rows(x, at(p + "ln1.gamma"), at(p + "ln1.beta"), h);
      ctx.setZero();
      auto wq = mat(p + "attn.wq", d, d), wk = mat(p + "attn.wk", d, d),
           wv = mat(p + "attn.wv", d, d);
      const Array& bq = at(p + "attn.bq");
      const Array& bk = at(p + "attn.bk");
      const Array& bv = at(p + "attn.bv");
      for (int hd = 0; hd < H; ++hd) {
        double g = gates.at(l, hd);
        if (skip_inactive && g == 0.0) continue;
        int c0 = hd * dh;
        q.middleCols(c0, dh).noalias() = h * wq.middleCols(c0, dh);
        q.middleCols(c0, dh).rowwise() +=
            ConstVecMap(bq.data.data() + c0, dh).transpose();
        k.middleCols(c0, dh).noalias() = h * wk.middleCols(c0, dh);
        k.middleCols(c0, dh).rowwise() +=
            ConstVecMap(bk.data.data() + c0, dh).transpose();
        v.middleCols(c0, dh).noalias() = h * wv.middleCols(c0, dh);
        v.middleCols(c0, dh).rowwise() +=
            ConstVecMap(bv.data.data() + c0, dh).transpose();
        if (counter) counter->qkv_macs += 3ull * R * d * dh;
        for (int b = 0; b < batch; ++b) {
          auto qh = q.block(b * n, c0, n, dh);
          auto kh = k.block(b * n, c0, n, dh);
          auto vh = v.block(b * n, c0, n, dh);
          EigenRowMat s = qh * kh.transpose() * inv_sqrt_dh;
          for (int r = 0; r < n; ++r) {
            double m = s.row(r).maxCoeff();
            s.row(r) = (s.row(r).array() - m).exp();
            s.row(r) /= s.row(r).sum();
          }
          ctx.block(b * n, c0, n, dh).noalias() = s * vh;
          if (counter) counter->attn_macs += 2ull * n * n * dh;
        }
        if (g != 1.0) ctx.middleCols(c0, dh) *= g;
      }
      auto wo = mat(p + "attn.wo", d, d);
      const Array& bo = at(p + "attn.bo");
      // wo rows for skipped heads multiply zero context; restrict to active
      // row blocks so skipping also saves output-projection work.
      EigenRowMat attn_out = EigenRowMat::Zero(R, d);
      for (int hd = 0; hd < H; ++hd) {
        double g = gates.at(l, hd);
        if (skip_inactive && g == 0.0) continue;
        int c0 = hd * dh;
        attn_out.noalias() += ctx.middleCols(c0, dh) * wo.middleRows(c0, dh);
        if (counter) counter->out_proj_macs += static_cast<uint64_t>(R) * dh * d;
      }
      attn_out.rowwise() += ConstVecMap(bo.data.data(), d).transpose();
      x += attn_out;
      layer_norm_rows(x, at(p + "ln2.gamma"), at(p + "ln2.beta"), h);
      tmp.noalias() = h * mat(p + "ffn.w1", d, cfg_.ffn_dim);
      tmp.rowwise() += ConstVecMap(at(p + "ffn.b1").data.data(), cfg_.ffn_dim).transpose();
      tmp = tmp.cwiseMax(0.0);
      x.noalias() += tmp * mat(p + "ffn.w2", cfg_.ffn_dim, d);
      x.rowwise() += ConstVecMap(at(p + "ffn.b2").data.data(), d).transpose();
    }
    layer_norm_rows(x, at("final_ln.gamma"), at("final_ln.beta"), h);

    Array out({batch, cfg_.num_classes});
    EigenRowMat pooled(batch, d);
    for (int b = 0; b < batch; ++b)
      pooled.row(b) = h.middleRows(b * n, n).colwise().mean();
    as_mat(out, batch, cfg_.num_classes).noalias() =
        pooled * mat("cls.w", d, cfg_.num_classes);
    as_mat(out, batch, cfg_.num_classes).rowwise() +=
        ConstVecMap(at("cls.b").data.data(), cfg_.num_classes).transpose();
    return out;
  }

 private:
  const Array& at(const std::string& name) const {
    auto it = params_->find(name);
    if (it == params_->end()) throw std::out_of_range("infer: missing parameter " + name);
    return it->second;
  }

  ConstMatMap mat(const std::string& name, int r, int c) const {
    const Array& a = at(name);
    if (a.numel() != static_cast<int64_t>(r) * c)
      throw std::invalid_argument("infer: bad parameter shape for " + name);
    return ConstMatMap(a.data.data(), r, c);
  }

  static void layer_norm_rows(const EigenRowMat& x, const Array& gamma, const Array& beta,
                              EigenRowMat& out) {
    int R = static_cast<int>(x.rows()), C = static_cast<int>(x.cols());
    ConstVecMap g(gamma.data.data(), C), b(beta.data.data(), C);
    for (int r = 0; r < R; ++r) {
      double m = 0.0;
      for (int c = 0; c < C; ++c) m += x(r, c);
      m /= C;
      double var = 0.0;
      for (int c = 0; c < C; ++c) var += (x(r, c) - m) * (x(r, c) - m);
      var /= C;
      double is = 1.0 / std::sqrt(var + kLayerNormEps);
      for (int c = 0; c < C; ++c) out(r, c) = (x(r, c) - m) * is * g(c) + b(c);
    }
  }

  ModelConfig cfg_;
  const std::map<std::string, Array>* params_;
};

}  // namespace bag
