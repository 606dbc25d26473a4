#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "madrag/layout.hpp"
#include "madrag/tensor.hpp"
#include "madrag/transformer.hpp"

namespace madrag {

// Which attention rows feed a ratio measurement. Defaults follow the
// last-layer, head-averaged protocol.
struct RatioQuery {
  std::optional<std::size_t> layer;  // last layer when empty
  bool average_heads = true;
  std::size_t head = 0;  // used when average_heads is false
};

struct RatioEntry {
  std::size_t step = 0;   // decoding step t >= 1
  std::size_t row = 0;    // query row that produced token t
  std::size_t layer = 0;
  bool head_averaged = true;
  double rho_image = 0.0;
  double rho_context = 0.0;
};

// Step t's token is predicted from row prompt_length + t - 2, so step 1 reads
// the last prompt row. rho_image / rho_context sum that row's mass over
// image / context key columns.
RatioEntry compute_ratios(const ForwardTrace& trace, const SequenceLayout& layout, std::size_t step,
                          const RatioQuery& query = {});

// Mass of one attention row over the columns of every segment of `kind`.
double segment_mass(std::span<const double> row, const SequenceLayout& layout, SegmentKind kind);

enum class SinkStatistic { Median, Mean };

struct SinkFilterConfig {
  double threshold_multiplier = 5.0;  // tau > 1
  SinkStatistic statistic = SinkStatistic::Median;
  bool renormalize = false;

  void validate() const;
};

struct SinkFilterResult {
  std::vector<bool> masked;  // per image token
  Tensor filtered;           // heads x V, masked columns zeroed
};

// Token j is a sink iff its head-averaged mass exceeds tau times the baseline
// statistic of all head-averaged image masses. With `renormalize`, each head
// row's surviving entries are rescaled to sum to 1.
SinkFilterResult filter_sinks(const Tensor& image_attention, const SinkFilterConfig& cfg);

struct HeadScore {
  std::size_t layer = 0;
  std::size_t head = 0;
  double image_mass = 0.0;
  friend bool operator==(const HeadScore&, const HeadScore&) = default;
};

// Ranks (layer, head) pairs by image-key mass of the final query row; ties keep
// (layer, head) order.
std::vector<HeadScore> select_visual_heads(const ForwardTrace& trace, const SequenceLayout& layout,
                                           std::size_t k);

struct Heatmap {
  Tensor raw;   // rows x cols, after optional sink filtering, before normalisation
  Tensor grid;  // min-max normalised to [0, 1]; all zeros when max == min
  std::vector<bool> sink_mask;  // empty when no filtering was requested
  std::string normalization = "minmax";
};

Heatmap export_heatmap(std::span<const double> image_attention, std::size_t grid_rows,
                       std::size_t grid_cols, const std::optional<SinkFilterConfig>& sink_cfg = {});

// PGM (P2, ASCII, maxval 255) with `comment` lines written as '# ...'.
std::string heatmap_to_pgm(const Heatmap& heatmap, std::span<const std::string> comments = {});
std::string heatmap_to_csv(const Heatmap& heatmap);

struct ContextTokenScore {
  std::size_t position = 0;
  TokenId token = 0;
  double mass = 0.0;
  friend bool operator==(const ContextTokenScore&, const ContextTokenScore&) = default;
};

// Top-k context key columns by head-averaged attention from the row that
// produces the first answer token (last prompt row); descending mass, ties by
// position. k larger than the context is clamped.
std::vector<ContextTokenScore> top_context_tokens(const ForwardTrace& trace,
                                                  const SequenceLayout& layout,
                                                  std::span<const TokenId> tokens, std::size_t k,
                                                  std::optional<std::size_t> layer = {});

// Head-averaged (or single-head) attention row from `row` at `layer`.
std::vector<double> attention_row(const ForwardTrace& trace, std::size_t layer, std::size_t row,
                                  std::optional<std::size_t> head = {});

}  // namespace madrag
