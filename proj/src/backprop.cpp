#include "madrag/backprop.hpp"

#include <cmath>

#include "kernels.hpp"
#include "madrag/error.hpp"

namespace madrag {

namespace {

// dst += a^T * b  (a: n x p, b: n x q, dst: p x q)
void add_at_b(Tensor& dst, const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), p = a.cols(), q = b.cols();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < p; ++i) {
      const double ai = a(r, i);
      if (ai == 0.0) continue;
      for (std::size_t j = 0; j < q; ++j) dst(i, j) += ai * b(r, j);
    }
  }
}

// a * b^T  (a: n x p, b: m x p) -> n x m
Tensor a_bt(const Tensor& a, const Tensor& b) { return matmul(a, transpose(b)); }

void add_col_sums(Tensor& dst, const Tensor& x) {
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) dst.data()[j] += x(i, j);
}

// Returns dL/dx for y = gamma * xhat + beta, accumulating gamma/beta grads.
Tensor layer_norm_backward(const Tensor& dy, const Tensor& xhat, const std::vector<double>& rstd,
                           const Tensor& gamma, Tensor& d_gamma, Tensor& d_beta) {
  const std::size_t L = dy.rows(), D = dy.cols();
  Tensor dx({L, D});
  std::vector<double> dxhat(D);
  for (std::size_t i = 0; i < L; ++i) {
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < D; ++j) {
      d_gamma.data()[j] += dy(i, j) * xhat(i, j);
      d_beta.data()[j] += dy(i, j);
      dxhat[j] = dy(i, j) * gamma.data()[j];
      sum_dxhat += dxhat[j];
      sum_dxhat_xhat += dxhat[j] * xhat(i, j);
    }
    const double inv_d = 1.0 / static_cast<double>(D);
    for (std::size_t j = 0; j < D; ++j) {
      dx(i, j) = rstd[i] * (dxhat[j] - inv_d * sum_dxhat - xhat(i, j) * inv_d * sum_dxhat_xhat);
    }
  }
  return dx;
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

}  // namespace

Gradients backward(const ModelWeights& weights, const ForwardCache& cache, const Tensor& d_logits) {
  const ModelConfig& cfg = weights.config;
  const std::size_t H = cfg.n_heads, dk = cfg.d_k, D = cfg.d_model;
  if (cache.layers.size() != cfg.n_layers) {
    throw ContractViolation("forward cache does not match the model depth");
  }
  const std::size_t L = cache.x_final.rows();
  if (d_logits.rank() != 2 || d_logits.rows() != L || d_logits.cols() != cfg.vocab_size) {
    throw DimensionError("d_logits has shape " + shape_to_string(d_logits.shape()));
  }

  Gradients g{ModelWeights::zeros(cfg), Tensor({L, D})};
  // zeros() sets layer-norm gains to 1; gradients must start at 0.
  for_each_parameter(g.params, [](const std::string&, Tensor& t) { t.fill(0.0); });

  add_at_b(g.params.w_out, cache.lnf_out, d_logits);
  add_col_sums(g.params.b_out, d_logits);
  const Tensor d_lnf = a_bt(d_logits, weights.w_out);
  Tensor dx = layer_norm_backward(d_lnf, cache.lnf_xhat, cache.lnf_rstd, weights.lnf_gamma,
                                  g.params.lnf_gamma, g.params.lnf_beta);

  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const LayerWeights& W = weights.layers[li];
    LayerWeights& G = g.params.layers[li];
    const LayerCache& c = cache.layers[li];

    // Feed-forward block: x_next = x_mid + gelu(ln2 W1 + b1) W2 + b2.
    add_at_b(G.w2, c.ff_act, dx);
    add_col_sums(G.b2, dx);
    Tensor d_ff = a_bt(dx, W.w2);
    for (std::size_t i = 0; i < d_ff.size(); ++i) {
      d_ff.data()[i] *= detail::gelu_grad(c.ff_pre.data()[i]);
    }
    add_at_b(G.w1, c.ln2_out, d_ff);
    add_col_sums(G.b1, d_ff);
    const Tensor d_ln2 = a_bt(d_ff, W.w1);
    Tensor d_mid = dx;
    add_into(d_mid, layer_norm_backward(d_ln2, c.ln2_xhat, c.ln2_rstd, W.ln2_gamma, G.ln2_gamma,
                                        G.ln2_beta));

    // Attention block: x_mid = x_in + concat(heads) Wo.
    add_at_b(G.wo, c.heads_out, d_mid);
    const Tensor d_heads = a_bt(d_mid, W.wo);
    Tensor dQ({L, D}), dK({L, D}), dV({L, D});
    for (std::size_t h = 0; h < H; ++h) {
      const Tensor d_out = detail::slice_cols(d_heads, h * dk, dk);
      const Tensor& P = c.probs[h];
      const Tensor dP = a_bt(d_out, c.v[h]);  // L x L
      // dV_h = P^T d_out
      Tensor dv({L, dk});
      add_at_b(dv, P, d_out);
      // Softmax backward, then the 1/sqrt(dk) scale.
      Tensor dS({L, L});
      for (std::size_t i = 0; i < L; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
        for (std::size_t j = 0; j <= i; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * scale;
      }
      const Tensor dq = matmul(dS, c.k[h]);
      Tensor dk_h({L, dk});
      add_at_b(dk_h, dS, c.q[h]);
      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t d = 0; d < dk; ++d) {
          dQ(i, h * dk + d) = dq(i, d);
          dK(i, h * dk + d) = dk_h(i, d);
          dV(i, h * dk + d) = dv(i, d);
        }
      }
    }
    add_at_b(G.wq, c.ln1_out, dQ);
    add_at_b(G.wk, c.ln1_out, dK);
    add_at_b(G.wv, c.ln1_out, dV);
    Tensor d_ln1 = a_bt(dQ, W.wq);
    add_into(d_ln1, a_bt(dK, W.wk));
    add_into(d_ln1, a_bt(dV, W.wv));
    dx = d_mid;
    add_into(dx, layer_norm_backward(d_ln1, c.ln1_xhat, c.ln1_rstd, W.ln1_gamma, G.ln1_gamma,
                                     G.ln1_beta));
  }
  g.d_embedded = std::move(dx);
  return g;
}

void accumulate_embedding_gradients(ModelWeights& grads, const SequenceLayout& layout,
                                    const Tensor& image_features, std::span<const TokenId> tokens,
                                    const Tensor& d_embedded) {
  const std::size_t D = grads.config.d_model;
  const std::size_t V = layout.count(SegmentKind::Image);
  const std::size_t image_start = V ? layout.require(SegmentKind::Image).start : 0;
  for (std::size_t pos = 0; pos < layout.length(); ++pos) {
    auto d_row = d_embedded.row(pos);
    if (layout.kind_at(pos) == SegmentKind::Image) {
      auto feat = image_features.row(pos - image_start);
      for (std::size_t p = 0; p < feat.size(); ++p) {
        if (feat[p] == 0.0) continue;
        auto g_row = grads.image_projection.row(p);
        for (std::size_t d = 0; d < D; ++d) g_row[d] += feat[p] * d_row[d];
      }
    } else {
      auto g_row = grads.token_embedding.row(static_cast<std::size_t>(tokens[pos]));
      for (std::size_t d = 0; d < D; ++d) g_row[d] += d_row[d];
    }
  }
}

double cross_entropy(const Tensor& logits, std::span<const std::pair<std::size_t, TokenId>> targets,
                     Tensor* d_logits, double scale) {
  if (targets.empty()) throw ConfigError("cross_entropy needs at least one target");
  if (d_logits) *d_logits = Tensor(logits.shape());
  const double inv_n = 1.0 / static_cast<double>(targets.size());
  double loss = 0.0;
  for (const auto& [pos, target] : targets) {
    auto row = logits.row(pos);
    double max = row[0];
    for (double v : row) max = std::max(max, v);
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - max);
    const double log_z = max + std::log(sum);
    loss += (log_z - row[static_cast<std::size_t>(target)]) * inv_n;
    if (d_logits) {
      auto d_row = d_logits->row(pos);
      for (std::size_t j = 0; j < row.size(); ++j) {
        d_row[j] += std::exp(row[j] - log_z) * inv_n * scale;
      }
      d_row[static_cast<std::size_t>(target)] -= inv_n * scale;
    }
  }
  return loss;
}

}  // namespace madrag
