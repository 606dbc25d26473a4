#include "madrag/intervention.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include "madrag/error.hpp"

namespace madrag {

std::string_view to_string(MixForm form) {
  return form == MixForm::OutputMix ? "output" : "strict";
}

std::string_view to_string(LayerPreset preset) {
  switch (preset) {
    case LayerPreset::All: return "all";
    case LayerPreset::Early: return "early";
    case LayerPreset::Middle: return "middle";
    case LayerPreset::Later: return "later";
  }
  return "all";
}

MixForm parse_mix_form(std::string_view name) {
  if (name == "output" || name == "OutputMix") return MixForm::OutputMix;
  if (name == "strict" || name == "StrictWeightMix") return MixForm::StrictWeightMix;
  throw ConfigError("unknown mix form '" + std::string(name) + "' (expected output|strict)");
}

LayerSelection LayerSelection::parse(std::string_view text) {
  if (text == "all") return preset(LayerPreset::All);
  if (text == "early") return preset(LayerPreset::Early);
  if (text == "middle") return preset(LayerPreset::Middle);
  if (text == "later") return preset(LayerPreset::Later);
  std::vector<std::size_t> layers;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    const std::string_view item = text.substr(pos, comma - pos);
    std::size_t value = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), value);
    if (item.empty() || ec != std::errc() || ptr != item.data() + item.size()) {
      throw ConfigError("invalid layer selection '" + std::string(text) + "'");
    }
    layers.push_back(value);
    pos = comma + 1;
  }
  return explicit_layers(std::move(layers));
}

std::set<std::size_t> LayerSelection::resolve(std::size_t n_layers) const {
  if (const auto* list = std::get_if<std::vector<std::size_t>>(&value)) {
    for (std::size_t l : *list) {
      if (l >= n_layers) {
        throw ConfigError("layer " + std::to_string(l) + " out of range for " +
                          std::to_string(n_layers) + " layers");
      }
    }
    return {list->begin(), list->end()};
  }
  const LayerPreset p = std::get<LayerPreset>(value);
  std::set<std::size_t> out;
  if (n_layers == 0) return out;
  if (p == LayerPreset::All) {
    for (std::size_t l = 0; l < n_layers; ++l) out.insert(l);
    return out;
  }
  const std::size_t k = p == LayerPreset::Early ? 0 : p == LayerPreset::Middle ? 1 : 2;
  const std::size_t start = std::min(k * n_layers / 3, n_layers - 1);
  const std::size_t end = std::max((k + 1) * n_layers / 3, start + 1);
  for (std::size_t l = start; l < end; ++l) out.insert(l);
  return out;
}

std::string LayerSelection::to_string() const {
  if (const auto* p = std::get_if<LayerPreset>(&value)) return std::string(madrag::to_string(*p));
  std::ostringstream os;
  const auto& list = std::get<std::vector<std::size_t>>(value);
  for (std::size_t i = 0; i < list.size(); ++i) os << (i ? "," : "") << list[i];
  return os.str();
}

void MixConfig::validate(std::size_t n_layers) const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  layers.resolve(n_layers);
}

Tensor mix_outputs(const Tensor& o_qi, const Tensor& o_qc, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (o_qi.rank() != 3 || o_qc.rank() != 3) throw DimensionError("mix_outputs expects H x T x d");
  if (o_qi.dim(1) != o_qc.dim(1)) {
    throw DimensionError("question segments differ in length: " + std::to_string(o_qi.dim(1)) +
                         " vs " + std::to_string(o_qc.dim(1)));
  }
  if (o_qi.shape() != o_qc.shape()) {
    throw DimensionError("mix_outputs shape mismatch: " + shape_to_string(o_qi.shape()) + " vs " +
                         shape_to_string(o_qc.shape()));
  }
  Tensor out(o_qc.shape());
  const double beta = 1.0 - alpha;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data()[i] = alpha * o_qi.data()[i] + beta * o_qc.data()[i];
  }
  return out;
}

MixedAttention mix_weights_strict(const Tensor& a_qi_image, const Tensor& a_qc_all, double alpha,
                                  std::span<const std::size_t> image_columns) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (a_qi_image.rank() != 3 || a_qc_all.rank() != 3 || a_qi_image.dim(0) != a_qc_all.dim(0) ||
      a_qi_image.dim(1) != a_qc_all.dim(1)) {
    throw DimensionError("mix_weights_strict shape mismatch: " +
                         shape_to_string(a_qi_image.shape()) + " vs " +
                         shape_to_string(a_qc_all.shape()));
  }
  const std::size_t H = a_qc_all.dim(0), T = a_qc_all.dim(1), K = a_qc_all.dim(2);
  const std::size_t V = a_qi_image.dim(2);
  if (image_columns.size() != V) {
    throw DimensionError("key map has " + std::to_string(image_columns.size()) +
                         " image columns, attention has " + std::to_string(V));
  }
  std::vector<bool> seen(K, false);
  for (std::size_t c : image_columns) {
    if (c >= K || seen[c]) throw DimensionError("key map column out of range or repeated");
    seen[c] = true;
  }
  MixedAttention mixed{Tensor({H, T, K}), Tensor()};
  const double beta = 1.0 - alpha;
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < K; ++j) mixed.weights(h, t, j) = beta * a_qc_all(h, t, j);
      for (std::size_t v = 0; v < V; ++v) {
        mixed.weights(h, t, image_columns[v]) += alpha * a_qi_image(h, t, v);
      }
    }
  }
  return mixed;
}

void apply_mixed_weights(MixedAttention& mixed, std::span<const Tensor> values) {
  const std::size_t H = mixed.weights.dim(0), T = mixed.weights.dim(1), K = mixed.weights.dim(2);
  if (values.size() != H) throw DimensionError("one value tensor per head required");
  const std::size_t dv = values[0].cols();
  mixed.outputs = Tensor({H, T, dv});
  for (std::size_t h = 0; h < H; ++h) {
    if (values[h].rows() < K || values[h].cols() != dv) {
      throw DimensionError("value tensor " + shape_to_string(values[h].shape()) +
                           " does not cover " + std::to_string(K) + " keys");
    }
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < K; ++j) {
        const double w = mixed.weights(h, t, j);
        if (w == 0.0) continue;
        for (std::size_t d = 0; d < dv; ++d) mixed.outputs(h, t, d) += w * values[h](j, d);
      }
    }
  }
}

HookResult apply_intervention(std::size_t layer, std::span<const HeadView> heads,
                              const SequenceLayout& layout, const MixConfig& cfg,
                              std::size_t n_layers) {
  if (!is_dual_question(layout.variant())) {
    throw LayoutError("attention mixing requires a dual-question layout, got " +
                      std::string(to_string(layout.variant())));
  }
  if (heads.empty()) throw DimensionError("apply_intervention needs at least one head");
  const Segment qi = layout.require(SegmentKind::ImageQuestion);
  const Segment qc = layout.require(SegmentKind::ContextQuestion);
  if (qi.length != qc.length) throw LayoutError("Q_I and Q_C differ in length");
  const std::size_t H = heads.size(), T = qc.length;
  const std::size_t L = heads[0].weights->rows(), dk = heads[0].output->cols();
  if (qc.end() > L) throw LayoutError("layout extends past the attention rows");

  HookResult res{qc.start, Tensor({H, T, dk}), Tensor({H, T, L})};
  const bool active = layer < n_layers && cfg.layers.resolve(n_layers).count(layer) > 0;
  if (!active) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t d = 0; d < dk; ++d) res.outputs(h, t, d) = (*heads[h].output)(qc.start + t, d);
        for (std::size_t j = 0; j < L; ++j) res.weights(h, t, j) = (*heads[h].weights)(qc.start + t, j);
      }
    }
    return res;
  }

  if (cfg.form == MixForm::OutputMix) {
    Tensor o_qi({H, T, dk}), o_qc({H, T, dk});
    Tensor a_qi({H, T, L}), a_qc({H, T, L});
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t d = 0; d < dk; ++d) {
          o_qi(h, t, d) = (*heads[h].output)(qi.start + t, d);
          o_qc(h, t, d) = (*heads[h].output)(qc.start + t, d);
        }
        for (std::size_t j = 0; j < L; ++j) {
          a_qi(h, t, j) = (*heads[h].weights)(qi.start + t, j);
          a_qc(h, t, j) = (*heads[h].weights)(qc.start + t, j);
        }
      }
    }
    res.outputs = mix_outputs(o_qi, o_qc, cfg.alpha);
    // Effective weights: Q_I's keys are a subset of Q_C's prefix, so the mixed
    // output equals this row combination applied to the values.
    res.weights = mix_outputs(a_qi, a_qc, cfg.alpha);
    return res;
  }

  const Segment img = layout.find(SegmentKind::Image).value_or(Segment{SegmentKind::Image, 0, 0});
  const std::size_t V = img.length, K = qc.end();
  Tensor a_qi_image({H, T, V}), a_qc_all({H, T, K});
  std::vector<std::size_t> image_columns(V);
  for (std::size_t v = 0; v < V; ++v) image_columns[v] = img.start + v;
  std::vector<Tensor> values(H);
  for (std::size_t h = 0; h < H; ++h) {
    values[h] = *heads[h].values;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t v = 0; v < V; ++v) a_qi_image(h, t, v) = (*heads[h].weights)(qi.start + t, img.start + v);
      for (std::size_t j = 0; j < K; ++j) a_qc_all(h, t, j) = (*heads[h].weights)(qc.start + t, j);
    }
  }
  MixedAttention mixed = mix_weights_strict(a_qi_image, a_qc_all, cfg.alpha, image_columns);
  apply_mixed_weights(mixed, values);
  res.outputs = std::move(mixed.outputs);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < K; ++j) res.weights(h, t, j) = mixed.weights(h, t, j);
  return res;
}

MixingHook::MixingHook(SequenceLayout layout, MixConfig cfg, std::size_t n_layers)
    : layout_(std::move(layout)), cfg_(std::move(cfg)), n_layers_(n_layers) {
  if (!is_dual_question(layout_.variant())) {
    throw LayoutError("attention mixing requires a dual-question layout, got " +
                      std::string(to_string(layout_.variant())));
  }
  cfg_.validate(n_layers_);
  layers_ = cfg_.layers.resolve(n_layers_);
}

HookResult MixingHook::rewrite(std::size_t layer, std::span<const HeadView> heads) const {
  return apply_intervention(layer, heads, layout_, cfg_, n_layers_);
}

}  // namespace madrag
