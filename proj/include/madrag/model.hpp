#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "madrag/tensor.hpp"

namespace madrag {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_model = 32;
  std::size_t d_k = 16;
  std::size_t d_ff = 64;
  std::size_t vocab_size = 64;
  std::size_t max_seq = 128;
  std::size_t image_patch_dim = 16;

  // Throws ConfigError unless d_model == n_heads * d_k and all counts >= 1.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// 2 layers, 2 heads, d_model 32, d_k 16, vocab 64, 4x4 image grid.
ModelConfig tiny_preset();

// Weight matrices are stored [in x out]: y = x * W.
struct LayerWeights {
  Tensor ln1_gamma, ln1_beta;  // [d_model]
  Tensor wq, wk, wv, wo;       // [d_model x d_model]
  Tensor ln2_gamma, ln2_beta;  // [d_model]
  Tensor w1, b1;               // [d_model x d_ff], [d_ff]
  Tensor w2, b2;               // [d_ff x d_model], [d_model]
};

struct ModelWeights {
  ModelConfig config;
  Tensor token_embedding;   // [vocab x d_model]
  Tensor image_projection;  // [image_patch_dim x d_model]
  std::vector<LayerWeights> layers;
  Tensor lnf_gamma, lnf_beta;  // [d_model]
  Tensor w_out, b_out;         // [d_model x vocab], [vocab]

  // Zero-valued weights with shapes taken from `config`; layer-norm gains are 1.
  static ModelWeights zeros(const ModelConfig& config);
  // Deterministic Gaussian initialisation (std 1/sqrt(fan_in) for projections).
  static ModelWeights random(const ModelConfig& config, std::uint64_t seed);

  std::size_t parameter_count() const;
  // Checks every tensor shape against `config` and finiteness.
  void validate() const;
};

// Visits each named parameter tensor in a fixed order.
void for_each_parameter(ModelWeights& w, const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_parameter(const ModelWeights& w,
                        const std::function<void(const std::string&, const Tensor&)>& fn);

// Checkpoint: JSON object {"format", "version", "config", "tensors": {name:
// {"shape": [...], "data": [...]}}}. Doubles are written with round-trip
// precision so save/load is value-exact.
void save_checkpoint(const ModelWeights& weights, const std::filesystem::path& path);
ModelWeights load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_to_string(const ModelWeights& weights);
ModelWeights checkpoint_from_string(const std::string& text);

}  // namespace madrag
