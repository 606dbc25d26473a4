#pragma once

#include <optional>
#include <span>
#include <vector>

#include "madrag/layout.hpp"
#include "madrag/model.hpp"
#include "madrag/tensor.hpp"

namespace madrag {

// Fixed sinusoidal positional encoding, [length x d_model].
Tensor sinusoidal_positions(std::size_t length, std::size_t d_model);

// Image positions take image_features * image_projection, text positions take
// token_embedding rows; positions are added to both. `tokens` is a full-length
// stream (kImageSlot at image positions) as produced by assemble_tokens.
Tensor embed_sequence(const ModelWeights& weights, const SequenceLayout& layout,
                      const Tensor& image_features, std::span<const TokenId> tokens);

struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  Tensor rows;  // L x L post-softmax weights (post-intervention where applied)
};

// Per-head tensors a hook sees at one layer.
struct HeadView {
  const Tensor* weights;  // L x L
  const Tensor* values;   // L x d_k
  const Tensor* output;   // L x d_k  (weights * values)
};

// Replacement for `outputs.dim(1)` consecutive rows starting at `row_begin`, for
// every head. `weights`, when non-empty, holds the H x T x L attention rows that
// the AttentionRecord should carry for the replaced rows.
struct HookResult {
  std::size_t row_begin = 0;
  Tensor outputs;  // H x T x d_k
  Tensor weights;  // H x T x L, or empty
};

// Rewrites per-head attention outputs before the output projection.
class AttentionHook {
 public:
  virtual ~AttentionHook() = default;
  virtual bool active_at(std::size_t layer) const = 0;
  virtual HookResult rewrite(std::size_t layer, std::span<const HeadView> heads) const = 0;
};

struct ForwardTrace {
  Tensor logits;                         // L x vocab
  std::vector<AttentionRecord> records;  // layer-major: index = layer * n_heads + head
  std::vector<Tensor> hidden;            // residual stream after each layer, when requested

  const AttentionRecord& record(std::size_t layer, std::size_t head) const;
  std::size_t n_layers() const;
  std::size_t n_heads() const;
};

struct ForwardCache;  // activations kept for backprop (backprop.hpp)

// Pre-norm decoder stack. When `hook` is active at a layer, its HookResult
// replaces the corresponding head-output rows before W_O; a result with the
// wrong shape throws ContractViolation. `cache` is filled for backprop and
// cannot be combined with a hook.
ForwardTrace forward(const ModelWeights& weights, const Tensor& embedded, const CausalMask& mask,
                     const AttentionHook* hook = nullptr, bool keep_hidden = false,
                     ForwardCache* cache = nullptr);

struct DecodeOptions {
  std::size_t max_new_tokens = 1;
  std::optional<TokenId> end_token;
};

struct DecodeResult {
  std::vector<TokenId> tokens;
  SequenceLayout layout;  // prompt layout plus the Generated segment that was fed back
  ForwardTrace trace;     // trace of the final forward pass
};

// Greedy decoding with full recomputation each step. Ties go to the lowest
// token id. Generated tokens are fed back as ordinary text tokens; the hook is
// re-applied to prompt rows only, so generated rows are never rewritten.
DecodeResult greedy_decode(const ModelWeights& weights, const SequenceLayout& layout,
                           const Tensor& image_features, std::span<const TokenId> tokens,
                           const AttentionHook* hook, const DecodeOptions& options);

// Index of the largest value; lowest index wins ties.
std::size_t argmax(std::span<const double> values);

}  // namespace madrag
