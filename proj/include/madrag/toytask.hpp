#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "madrag/instrumentation.hpp"
#include "madrag/intervention.hpp"
#include "madrag/layout.hpp"
#include "madrag/model.hpp"
#include "madrag/tensor.hpp"

namespace madrag {

// Token ids of the lookup task: symbols, then the row and column tokens used
// by context chunks, then one address token per cell, then control tokens.
struct ToyVocabulary {
  std::size_t n_symbols = 8;
  std::size_t rows = 4;
  std::size_t cols = 4;

  TokenId symbol(std::size_t s) const { return static_cast<TokenId>(s); }
  TokenId row_token(std::size_t r) const { return static_cast<TokenId>(n_symbols + r); }
  TokenId col_token(std::size_t c) const { return static_cast<TokenId>(n_symbols + rows + c); }
  TokenId address(std::size_t r, std::size_t c) const {
    return static_cast<TokenId>(n_symbols + rows + cols + r * cols + c);
  }
  TokenId eos() const { return static_cast<TokenId>(n_symbols + rows + cols + rows * cols); }
  TokenId filler() const { return eos() + 1; }
  std::size_t size() const { return n_symbols + rows + cols + rows * cols + 2; }
  // Per-cell feature width: symbol one-hot, row one-hot, column one-hot.
  std::size_t patch_dim() const { return n_symbols + rows + cols; }
  bool is_symbol(TokenId t) const { return t >= 0 && static_cast<std::size_t>(t) < n_symbols; }
};

enum class ChunkKind { Relevant, Distractor };

struct ToySample {
  std::size_t id = 0;
  std::size_t grid_rows = 0, grid_cols = 0;
  std::vector<std::size_t> cells;  // symbol per cell, row-major
  Tensor image_features;           // V x patch_dim
  std::vector<TokenId> question;   // [address]
  TokenId answer = 0;
  std::vector<TokenId> context;    // 3 tokens per chunk: row, col, symbol
  std::vector<ChunkKind> chunks;

  friend bool operator==(const ToySample&, const ToySample&) = default;
};

struct DatasetConfig {
  std::uint64_t seed = 0;
  std::size_t n_samples = 500;
  std::size_t grid_rows = 4;
  std::size_t grid_cols = 4;
  std::size_t n_symbols = 8;
  std::size_t chunks_per_sample = 4;
  double distractor_fraction = 1.0;

  ToyVocabulary vocabulary() const { return {n_symbols, grid_rows, grid_cols}; }
  void validate() const;
};

// Each sample has round(distractor_fraction * chunks) distractors at shuffled
// chunk slots. A distractor names the queried cell or a random cell and
// always asserts a symbol other than the true answer.
std::vector<ToySample> generate_dataset(const DatasetConfig& cfg);

// Reads the answer straight from the features: the cell whose row and column
// one-hots match the question, then its symbol one-hot.
TokenId lookup_answer(const ToySample& sample, const ToyVocabulary& vocab);

std::string dataset_to_jsonl(const std::vector<ToySample>& samples);
std::vector<ToySample> dataset_from_jsonl(const std::string& text);
void save_dataset(const std::vector<ToySample>& samples, const std::filesystem::path& path);
std::vector<ToySample> load_dataset(const std::filesystem::path& path);

// Context variants fall back to the closed-book layout when a sample has no
// context, since every context segment would be empty.
Variant effective_variant(Variant variant, std::size_t context_length);

// Layout and token stream for one sample. `instruction_pad` filler tokens
// form the leading instruction segment.
struct SampleInput {
  SequenceLayout layout;
  std::vector<TokenId> tokens;
};
SampleInput make_input(const ToySample& sample, Variant variant, const ToyVocabulary& vocab,
                       std::size_t instruction_pad = 0, std::size_t max_seq = 0);

struct TrainConfig {
  double learning_rate = 3e-3;
  std::size_t steps = 1500;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  bool gradient_check = false;
  // Filler prefix length drawn uniformly from [0, max_instruction_pad] per
  // training example.
  std::size_t max_instruction_pad = 0;
  double grad_clip = 1.0;  // global norm; 0 disables
  std::size_t log_every = 0;

  void validate() const;
};

struct GradCheckReport {
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::string worst_parameter;
};

struct TrainReport {
  ModelWeights weights;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<GradCheckReport> grad_check;
};

// Mean answer cross-entropy over closed-book inputs, with gradients in `grads`
// when non-null. `pads` gives each sample's instruction pad (all zero if empty).
double batch_loss(const ModelWeights& weights, std::span<const ToySample> batch,
                  const ToyVocabulary& vocab, ModelWeights* grads,
                  std::span<const std::size_t> pads = {});

// |analytic - numeric| / max(|analytic|, |numeric|, floor) over `n_params`
// randomly chosen scalar parameters, central differences with step h.
GradCheckReport gradient_check(const ModelWeights& weights, std::span<const ToySample> batch,
                               const ToyVocabulary& vocab, std::size_t n_params,
                               std::uint64_t seed, double h = 1e-5, double floor = 1e-6);

// Adam on closed-book layouts. Throws NumericError when the loss goes
// non-finite.
TrainReport train(const ModelConfig& config, const std::vector<ToySample>& samples,
                  const TrainConfig& tc);

struct SampleOutcome {
  std::size_t id = 0;
  Variant layout_variant = Variant::ClosedBook;
  TokenId predicted = 0;
  bool correct = false;
  RatioEntry ratios;
  std::vector<double> image_attention;  // head-averaged last-layer row over image keys
};

struct EvalResult {
  Variant variant = Variant::ClosedBook;
  std::vector<SampleOutcome> outcomes;

  double accuracy() const;
  double mean_rho_image() const;
  double mean_rho_context() const;
  std::vector<bool> correctness() const;
};

// Greedy single-token decoding per sample; ratios come from step 1 at the
// last layer, head-averaged. `mix` is required for MADRAG and ignored
// otherwise.
EvalResult evaluate(const ModelWeights& weights, const std::vector<ToySample>& samples,
                    Variant variant, const std::optional<MixConfig>& mix = {},
                    const ToyVocabulary& vocab = {});

}  // namespace madrag
