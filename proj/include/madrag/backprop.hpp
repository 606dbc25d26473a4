#pragma once

#include <vector>

#include "madrag/model.hpp"
#include "madrag/tensor.hpp"
#include "madrag/transformer.hpp"

namespace madrag {

// Activations saved by forward() for the backward pass of one sequence.
struct LayerCache {
  Tensor x_in;                    // residual input, L x D
  Tensor ln1_xhat;                // normalised input before gain/bias
  std::vector<double> ln1_rstd;   // 1/sqrt(var + eps) per row
  Tensor ln1_out;                 // L x D
  std::vector<Tensor> q, k, v;    // per head, L x d_k
  std::vector<Tensor> probs;      // per head, L x L
  Tensor heads_out;               // concatenated head outputs, L x D
  Tensor x_mid;                   // residual after attention
  Tensor ln2_xhat;
  std::vector<double> ln2_rstd;
  Tensor ln2_out;
  Tensor ff_pre;                  // L x d_ff before GELU
  Tensor ff_act;                  // L x d_ff after GELU
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Tensor x_final;                  // residual stream entering the final norm
  Tensor lnf_xhat;
  std::vector<double> lnf_rstd;
  Tensor lnf_out;
};

struct Gradients {
  ModelWeights params;   // same layout as the model; embedding tables untouched
  Tensor d_embedded;     // L x D
};

// Backpropagates dL/dlogits (L x vocab) through the stack recorded in `cache`.
Gradients backward(const ModelWeights& weights, const ForwardCache& cache, const Tensor& d_logits);

// Adds the embedding-table and image-projector gradients implied by
// `d_embedded` into `grads`.
void accumulate_embedding_gradients(ModelWeights& grads, const SequenceLayout& layout,
                                    const Tensor& image_features, std::span<const TokenId> tokens,
                                    const Tensor& d_embedded);

// Mean cross-entropy over (position, target) pairs; writes dL/dlogits into
// `d_logits` (resized to match `logits`) scaled by `scale`.
double cross_entropy(const Tensor& logits, std::span<const std::pair<std::size_t, TokenId>> targets,
                     Tensor* d_logits, double scale = 1.0);

}  // namespace madrag
