#pragma once

#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "madrag/layout.hpp"
#include "madrag/tensor.hpp"
#include "madrag/transformer.hpp"

namespace madrag {

// How Q_C rows are rewritten.
//   OutputMix        O_hat = alpha * O(Q_I) + (1 - alpha) * O(Q_C)
//   StrictWeightMix  A_hat = alpha * [A(Q_I, I), 0, 0] + (1 - alpha) * A(Q_C, prefix),
//                    O_hat = A_hat * V
// The two differ by exactly alpha * A(Q_I, non-image keys) * V_non-image.
enum class MixForm { OutputMix, StrictWeightMix };

enum class LayerPreset { All, Early, Middle, Later };

std::string_view to_string(MixForm form);
std::string_view to_string(LayerPreset preset);
MixForm parse_mix_form(std::string_view name);

// Either a named preset or an explicit list of layer indices.
struct LayerSelection {
  std::variant<LayerPreset, std::vector<std::size_t>> value = LayerPreset::All;

  static LayerSelection preset(LayerPreset p) { return {p}; }
  static LayerSelection explicit_layers(std::vector<std::size_t> layers) { return {std::move(layers)}; }
  // "all" | "early" | "middle" | "later" | "0,2,3"
  static LayerSelection parse(std::string_view text);

  // Early/Middle/Later split [0, n) into contiguous thirds with
  // start_k = min(floor(k n / 3), n - 1) and end_k = max(floor((k + 1) n / 3), start_k + 1),
  // so every preset is non-empty (they overlap when n < 3).
  std::set<std::size_t> resolve(std::size_t n_layers) const;
  std::string to_string() const;
};

struct MixConfig {
  double alpha = 0.5;
  LayerSelection layers;
  MixForm form = MixForm::OutputMix;

  // Throws ConfigError for alpha outside [0, 1] or a layer index >= n_layers.
  void validate(std::size_t n_layers) const;
};

// alpha * o_qi + (1 - alpha) * o_qc, both H x T x d_k with Q_I row t paired to
// Q_C row t.
Tensor mix_outputs(const Tensor& o_qi, const Tensor& o_qc, double alpha);

struct MixedAttention {
  Tensor weights;  // H x T x K
  Tensor outputs;  // H x T x d_v, empty until computed against values
};

// a_qi_image: H x T x V attention from Q_I rows onto image keys.
// a_qc_all:   H x T x K attention from Q_C rows onto their causal prefix.
// image_columns[j] is the column of image key j inside a_qc_all.
MixedAttention mix_weights_strict(const Tensor& a_qi_image, const Tensor& a_qc_all, double alpha,
                                  std::span<const std::size_t> image_columns);

// Fills `mixed.outputs` with weights * values; `values` holds one K x d_v
// tensor per head.
void apply_mixed_weights(MixedAttention& mixed, std::span<const Tensor> values);

// Rewrites the Q_C rows of one layer. Layers outside cfg.layers return the
// Q_C rows unchanged. Throws LayoutError for a non-dual-question layout.
HookResult apply_intervention(std::size_t layer, std::span<const HeadView> heads,
                              const SequenceLayout& layout, const MixConfig& cfg,
                              std::size_t n_layers);

// AttentionHook adapter for forward()/greedy_decode().
class MixingHook final : public AttentionHook {
 public:
  MixingHook(SequenceLayout layout, MixConfig cfg, std::size_t n_layers);

  bool active_at(std::size_t layer) const override { return layers_.count(layer) > 0; }
  HookResult rewrite(std::size_t layer, std::span<const HeadView> heads) const override;

 private:
  SequenceLayout layout_;
  MixConfig cfg_;
  std::size_t n_layers_;
  std::set<std::size_t> layers_;
};

}  // namespace madrag
