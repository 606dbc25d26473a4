#include "madrag/transformer.hpp"

#include <cmath>

#include "kernels.hpp"
#include "madrag/backprop.hpp"
#include "madrag/error.hpp"

namespace madrag {

using detail::add_bias_rows;
using detail::gelu;
using detail::layer_norm;
using detail::slice_cols;

Tensor sinusoidal_positions(std::size_t length, std::size_t d_model) {
  Tensor pe({length, d_model});
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double freq =
          std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_model));
      pe(pos, i) = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < d_model) pe(pos, i + 1) = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return pe;
}

Tensor embed_sequence(const ModelWeights& weights, const SequenceLayout& layout,
                      const Tensor& image_features, std::span<const TokenId> tokens) {
  const ModelConfig& cfg = weights.config;
  const std::size_t L = layout.length();
  if (tokens.size() != L) {
    throw LayoutError("token stream has " + std::to_string(tokens.size()) +
                      " entries, layout has " + std::to_string(L));
  }
  const std::size_t V = layout.count(SegmentKind::Image);
  const std::size_t image_start = V ? layout.require(SegmentKind::Image).start : 0;
  if (V > 0 && (image_features.rank() != 2 || image_features.rows() != V ||
                image_features.cols() != cfg.image_patch_dim)) {
    throw LayoutError("layout has " + std::to_string(V) + " image tokens but features are " +
                      shape_to_string(image_features.shape()));
  }
  if (V == 0 && image_features.size() != 0) {
    throw LayoutError("image features supplied for a layout without image tokens");
  }

  Tensor x = sinusoidal_positions(L, cfg.d_model);
  for (std::size_t pos = 0; pos < L; ++pos) {
    auto row = x.row(pos);
    if (layout.kind_at(pos) == SegmentKind::Image) {
      if (tokens[pos] != kImageSlot) {
        throw LayoutError("image position " + std::to_string(pos) + " carries a text token");
      }
      auto feat = image_features.row(pos - image_start);
      for (std::size_t p = 0; p < cfg.image_patch_dim; ++p) {
        const double f = feat[p];
        if (f == 0.0) continue;
        auto proj = weights.image_projection.row(p);
        for (std::size_t d = 0; d < cfg.d_model; ++d) row[d] += f * proj[d];
      }
    } else {
      const TokenId id = tokens[pos];
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
        throw LayoutError("token id " + std::to_string(id) + " at position " +
                          std::to_string(pos) + " outside vocabulary");
      }
      auto emb = weights.token_embedding.row(static_cast<std::size_t>(id));
      for (std::size_t d = 0; d < cfg.d_model; ++d) row[d] += emb[d];
    }
  }
  return x;
}

const AttentionRecord& ForwardTrace::record(std::size_t layer, std::size_t head) const {
  const std::size_t H = n_heads();
  if (H == 0 || layer >= n_layers() || head >= H) {
    throw DimensionError("no attention record for layer " + std::to_string(layer) + ", head " +
                         std::to_string(head));
  }
  return records[layer * H + head];
}

std::size_t ForwardTrace::n_heads() const {
  std::size_t h = 0;
  for (const auto& r : records)
    if (r.layer == 0) ++h;
  return h;
}

std::size_t ForwardTrace::n_layers() const {
  const std::size_t h = n_heads();
  return h ? records.size() / h : 0;
}

namespace {

void apply_hook_result(const HookResult& res, std::size_t H, std::size_t L, std::size_t dk,
                       std::vector<AttentionResult>& att) {
  if (res.outputs.rank() != 3 || res.outputs.dim(0) != H || res.outputs.dim(2) != dk ||
      res.outputs.dim(1) == 0) {
    throw ContractViolation("hook returned outputs of shape " +
                            shape_to_string(res.outputs.shape()) + ", expected [" +
                            std::to_string(H) + "xTx" + std::to_string(dk) + "]");
  }
  const std::size_t T = res.outputs.dim(1);
  if (res.row_begin + T > L) {
    throw ContractViolation("hook rows [" + std::to_string(res.row_begin) + ", " +
                            std::to_string(res.row_begin + T) + ") exceed sequence length " +
                            std::to_string(L));
  }
  const bool has_weights = res.weights.size() != 0;
  if (has_weights && (res.weights.rank() != 3 || res.weights.dim(0) != H ||
                      res.weights.dim(1) != T || res.weights.dim(2) != L)) {
    throw ContractViolation("hook returned weights of shape " +
                            shape_to_string(res.weights.shape()));
  }
  if (!res.outputs.all_finite() || (has_weights && !res.weights.all_finite())) {
    throw ContractViolation("hook returned non-finite values");
  }
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t row = res.row_begin + t;
      for (std::size_t d = 0; d < dk; ++d) att[h].output(row, d) = res.outputs(h, t, d);
      if (!has_weights) continue;
      for (std::size_t j = 0; j < L; ++j) {
        const double w = res.weights(h, t, j);
        if (j > row && w != 0.0) {
          throw ContractViolation("hook placed weight on a future key");
        }
        att[h].weights(row, j) = w;
      }
    }
  }
}

}  // namespace

ForwardTrace forward(const ModelWeights& weights, const Tensor& embedded, const CausalMask& mask,
                     const AttentionHook* hook, bool keep_hidden, ForwardCache* cache) {
  const ModelConfig& cfg = weights.config;
  if (embedded.rank() != 2 || embedded.cols() != cfg.d_model) {
    throw DimensionError("embedded input must be Lx" + std::to_string(cfg.d_model) + ", got " +
                         shape_to_string(embedded.shape()));
  }
  const std::size_t L = embedded.rows();
  if (L == 0) throw DimensionError("forward over an empty sequence");
  if (L > cfg.max_seq) {
    throw LayoutError("sequence length " + std::to_string(L) + " exceeds max_seq " +
                      std::to_string(cfg.max_seq));
  }
  if (mask.length() != L) throw DimensionError("mask length does not match sequence length");
  if (cache && hook) throw ContractViolation("backprop cache cannot be combined with a hook");

  const std::size_t H = cfg.n_heads, dk = cfg.d_k, D = cfg.d_model;
  ForwardTrace trace;
  trace.records.reserve(cfg.n_layers * H);
  if (cache) cache->layers.assign(cfg.n_layers, {});

  Tensor x = embedded;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& W = weights.layers[l];
    auto ln1 = layer_norm(x, W.ln1_gamma, W.ln1_beta);
    const Tensor Q = matmul(ln1.out, W.wq);
    const Tensor K = matmul(ln1.out, W.wk);
    const Tensor Vv = matmul(ln1.out, W.wv);

    std::vector<Tensor> qh(H), kh(H), vh(H);
    std::vector<AttentionResult> att(H);
    for (std::size_t h = 0; h < H; ++h) {
      qh[h] = slice_cols(Q, h * dk, dk);
      kh[h] = slice_cols(K, h * dk, dk);
      vh[h] = slice_cols(Vv, h * dk, dk);
      att[h] = masked_attention(qh[h], kh[h], vh[h], mask);
    }

    if (hook && hook->active_at(l)) {
      std::vector<HeadView> views(H);
      for (std::size_t h = 0; h < H; ++h) views[h] = {&att[h].weights, &vh[h], &att[h].output};
      apply_hook_result(hook->rewrite(l, views), H, L, dk, att);
    }

    Tensor heads_out({L, D});
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t d = 0; d < dk; ++d) heads_out(i, h * dk + d) = att[h].output(i, d);
    }
    const Tensor attn = matmul(heads_out, W.wo);
    Tensor x_mid = x;
    for (std::size_t i = 0; i < x_mid.size(); ++i) x_mid.data()[i] += attn.data()[i];

    auto ln2 = layer_norm(x_mid, W.ln2_gamma, W.ln2_beta);
    Tensor ff_pre = matmul(ln2.out, W.w1);
    add_bias_rows(ff_pre, W.b1);
    Tensor ff_act = ff_pre;
    for (double& v : ff_act.data()) v = gelu(v);
    Tensor ff_out = matmul(ff_act, W.w2);
    add_bias_rows(ff_out, W.b2);
    Tensor x_next = x_mid;
    for (std::size_t i = 0; i < x_next.size(); ++i) x_next.data()[i] += ff_out.data()[i];

    for (std::size_t h = 0; h < H; ++h) trace.records.push_back({l, h, att[h].weights});

    if (cache) {
      LayerCache& c = cache->layers[l];
      c.x_in = std::move(x);
      c.ln1_xhat = std::move(ln1.xhat);
      c.ln1_rstd = std::move(ln1.rstd);
      c.ln1_out = std::move(ln1.out);
      c.q = std::move(qh);
      c.k = std::move(kh);
      c.v = std::move(vh);
      c.probs.resize(H);
      for (std::size_t h = 0; h < H; ++h) c.probs[h] = std::move(att[h].weights);
      c.heads_out = std::move(heads_out);
      c.x_mid = std::move(x_mid);
      c.ln2_xhat = std::move(ln2.xhat);
      c.ln2_rstd = std::move(ln2.rstd);
      c.ln2_out = std::move(ln2.out);
      c.ff_pre = std::move(ff_pre);
      c.ff_act = std::move(ff_act);
    }
    x = std::move(x_next);
    require_finite(x, "residual stream");
    if (keep_hidden) trace.hidden.push_back(x);
  }

  auto lnf = layer_norm(x, weights.lnf_gamma, weights.lnf_beta);
  trace.logits = matmul(lnf.out, weights.w_out);
  add_bias_rows(trace.logits, weights.b_out);
  require_finite(trace.logits, "logits");
  if (cache) {
    cache->x_final = std::move(x);
    cache->lnf_xhat = std::move(lnf.xhat);
    cache->lnf_rstd = std::move(lnf.rstd);
    cache->lnf_out = std::move(lnf.out);
  }
  return trace;
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw DimensionError("argmax of an empty row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

DecodeResult greedy_decode(const ModelWeights& weights, const SequenceLayout& layout,
                           const Tensor& image_features, std::span<const TokenId> tokens,
                           const AttentionHook* hook, const DecodeOptions& options) {
  if (options.max_new_tokens == 0) throw ConfigError("max_new_tokens must be >= 1");
  const std::size_t needed = layout.length() + options.max_new_tokens - 1;
  if (needed > weights.config.max_seq) {
    throw LayoutError("decoding " + std::to_string(options.max_new_tokens) + " tokens after " +
                      std::to_string(layout.length()) + " prompt tokens exceeds max_seq " +
                      std::to_string(weights.config.max_seq));
  }
  std::vector<TokenId> stream(tokens.begin(), tokens.end());
  SequenceLayout current = layout;
  DecodeResult result{{}, layout, {}};
  for (std::size_t step = 0; step < options.max_new_tokens; ++step) {
    const Tensor embedded = embed_sequence(weights, current, image_features, stream);
    result.trace = forward(weights, embedded, CausalMask(current.length()), hook);
    const auto next = static_cast<TokenId>(argmax(result.trace.logits.row(current.length() - 1)));
    result.tokens.push_back(next);
    if ((options.end_token && next == *options.end_token) || step + 1 == options.max_new_tokens) {
      break;
    }
    stream.push_back(next);
    current = current.with_generated(1);
  }
  result.layout = current;
  return result;
}

}  // namespace madrag
