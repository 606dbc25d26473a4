#include "madrag/instrumentation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "madrag/error.hpp"

namespace madrag {

namespace {

std::size_t trace_length(const ForwardTrace& trace) {
  if (trace.records.empty()) throw ContractViolation("trace holds no attention records");
  return trace.records.front().rows.rows();
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<double> attention_row(const ForwardTrace& trace, std::size_t layer, std::size_t row,
                                  std::optional<std::size_t> head) {
  const std::size_t L = trace_length(trace);
  if (row >= L) {
    throw DimensionError("row " + std::to_string(row) + " outside trace of length " +
                         std::to_string(L));
  }
  if (head) {
    auto r = trace.record(layer, *head).rows.row(row);
    return {r.begin(), r.end()};
  }
  const std::size_t H = trace.n_heads();
  std::vector<double> avg(L, 0.0);
  for (std::size_t h = 0; h < H; ++h) {
    auto r = trace.record(layer, h).rows.row(row);
    for (std::size_t j = 0; j < L; ++j) avg[j] += r[j];
  }
  for (double& v : avg) v /= static_cast<double>(H);
  return avg;
}

double segment_mass(std::span<const double> row, const SequenceLayout& layout, SegmentKind kind) {
  double mass = 0.0;
  for (const auto& seg : layout.segments()) {
    if (seg.kind != kind) continue;
    for (std::size_t j = seg.start; j < seg.end() && j < row.size(); ++j) mass += row[j];
  }
  return mass;
}

RatioEntry compute_ratios(const ForwardTrace& trace, const SequenceLayout& layout, std::size_t step,
                          const RatioQuery& query) {
  if (step == 0) throw ConfigError("decoding steps are numbered from 1");
  const std::size_t prompt = layout.prompt_length();
  if (prompt == 0) throw LayoutError("ratio requested for an empty prompt");
  const std::size_t row = prompt + step - 2;
  const std::size_t L = trace_length(trace);
  if (row >= L) {
    throw DimensionError("step " + std::to_string(step) + " needs row " + std::to_string(row) +
                         " but the trace covers " + std::to_string(L) + " positions");
  }
  if (L > layout.length()) throw LayoutError("trace is longer than the layout");
  RatioEntry e;
  e.step = step;
  e.row = row;
  e.layer = query.layer.value_or(trace.n_layers() - 1);
  e.head_averaged = query.average_heads;
  const auto r = attention_row(trace, e.layer, row,
                               query.average_heads ? std::nullopt : std::optional(query.head));
  e.rho_image = segment_mass(r, layout, SegmentKind::Image);
  e.rho_context = segment_mass(r, layout, SegmentKind::Context);
  return e;
}

void SinkFilterConfig::validate() const {
  if (!(threshold_multiplier > 1.0)) {
    throw ConfigError("sink threshold multiplier must exceed 1, got " +
                      std::to_string(threshold_multiplier));
  }
}

SinkFilterResult filter_sinks(const Tensor& image_attention, const SinkFilterConfig& cfg) {
  cfg.validate();
  if (image_attention.rank() != 2 || image_attention.cols() == 0 || image_attention.rows() == 0) {
    throw DimensionError("sink filter expects heads x V with V >= 1, got " +
                         shape_to_string(image_attention.shape()));
  }
  const std::size_t H = image_attention.rows(), V = image_attention.cols();
  std::vector<double> mass(V, 0.0);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t j = 0; j < V; ++j) mass[j] += image_attention(h, j) / static_cast<double>(H);

  const double baseline =
      cfg.statistic == SinkStatistic::Median
          ? median_of(mass)
          : std::accumulate(mass.begin(), mass.end(), 0.0) / static_cast<double>(V);
  const double threshold = cfg.threshold_multiplier * baseline;

  SinkFilterResult r{std::vector<bool>(V, false), image_attention};
  std::size_t n_masked = 0;
  for (std::size_t j = 0; j < V; ++j) {
    if (mass[j] > threshold) {
      r.masked[j] = true;
      ++n_masked;
    }
  }
  if (n_masked == V) throw DegenerateRowError("sink filter masked every image token");
  for (std::size_t h = 0; h < H; ++h) {
    double survivors = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      if (r.masked[j]) r.filtered(h, j) = 0.0;
      survivors += r.filtered(h, j);
    }
    if (cfg.renormalize && survivors > 0.0) {
      for (std::size_t j = 0; j < V; ++j) r.filtered(h, j) /= survivors;
    }
  }
  return r;
}

std::vector<HeadScore> select_visual_heads(const ForwardTrace& trace, const SequenceLayout& layout,
                                           std::size_t k) {
  if (trace.records.empty()) throw ContractViolation("cannot select heads from an empty trace");
  const std::size_t total = trace.records.size();
  if (k > total) {
    throw ConfigError("requested " + std::to_string(k) + " heads, trace has " +
                      std::to_string(total));
  }
  const std::size_t last = trace_length(trace) - 1;
  std::vector<HeadScore> scores;
  scores.reserve(total);
  for (const auto& rec : trace.records) {
    scores.push_back({rec.layer, rec.head, segment_mass(rec.rows.row(last), layout, SegmentKind::Image)});
  }
  std::stable_sort(scores.begin(), scores.end(), [](const HeadScore& a, const HeadScore& b) {
    if (a.image_mass != b.image_mass) return a.image_mass > b.image_mass;
    return std::tie(a.layer, a.head) < std::tie(b.layer, b.head);
  });
  scores.resize(k);
  return scores;
}

Heatmap export_heatmap(std::span<const double> image_attention, std::size_t grid_rows,
                       std::size_t grid_cols, const std::optional<SinkFilterConfig>& sink_cfg) {
  const std::size_t V = image_attention.size();
  if (grid_rows * grid_cols != V || V == 0) {
    throw DimensionError(std::to_string(V) + " image tokens do not fill a " +
                         std::to_string(grid_rows) + "x" + std::to_string(grid_cols) + " grid");
  }
  Heatmap hm;
  hm.raw = Tensor({grid_rows, grid_cols},
                  std::vector<double>(image_attention.begin(), image_attention.end()));
  if (sink_cfg) {
    auto filtered = filter_sinks(Tensor({1, V}, hm.raw.values()), *sink_cfg);
    hm.sink_mask = filtered.masked;
    hm.raw = Tensor({grid_rows, grid_cols}, filtered.filtered.values());
  }
  for (double v : hm.raw.data()) {
    if (v < 0.0) throw NumericError("heatmap values must be nonnegative");
  }
  const auto [lo, hi] = std::minmax_element(hm.raw.data().begin(), hm.raw.data().end());
  hm.grid = Tensor(hm.raw.shape());
  if (*hi > *lo) {
    for (std::size_t i = 0; i < V; ++i) {
      hm.grid.data()[i] = (hm.raw.data()[i] - *lo) / (*hi - *lo);
    }
  }
  return hm;
}

std::string heatmap_to_pgm(const Heatmap& heatmap, std::span<const std::string> comments) {
  std::ostringstream os;
  os << "P2\n";
  for (const auto& c : comments) os << "# " << c << '\n';
  os << heatmap.grid.cols() << ' ' << heatmap.grid.rows() << "\n255\n";
  for (std::size_t i = 0; i < heatmap.grid.rows(); ++i) {
    for (std::size_t j = 0; j < heatmap.grid.cols(); ++j) {
      os << (j ? " " : "") << static_cast<int>(std::lround(heatmap.grid(i, j) * 255.0));
    }
    os << '\n';
  }
  return os.str();
}

std::string heatmap_to_csv(const Heatmap& heatmap) {
  std::ostringstream os;
  os.precision(17);
  os << "row,col,raw,normalized,sink\n";
  for (std::size_t i = 0; i < heatmap.grid.rows(); ++i) {
    for (std::size_t j = 0; j < heatmap.grid.cols(); ++j) {
      const std::size_t idx = i * heatmap.grid.cols() + j;
      const bool sink = !heatmap.sink_mask.empty() && heatmap.sink_mask[idx];
      os << i << ',' << j << ',' << heatmap.raw(i, j) << ',' << heatmap.grid(i, j) << ','
         << (sink ? 1 : 0) << '\n';
    }
  }
  return os.str();
}

std::vector<ContextTokenScore> top_context_tokens(const ForwardTrace& trace,
                                                  const SequenceLayout& layout,
                                                  std::span<const TokenId> tokens, std::size_t k,
                                                  std::optional<std::size_t> layer) {
  if (k == 0) throw ConfigError("top_context_tokens needs k >= 1");
  if (layout.count(SegmentKind::Context) == 0) {
    throw LayoutError("layout has no context tokens to rank");
  }
  const std::size_t row = layout.prompt_length() - 1;
  const auto r = attention_row(trace, layer.value_or(trace.n_layers() - 1), row);
  std::vector<ContextTokenScore> scores;
  for (const auto& seg : layout.segments()) {
    if (seg.kind != SegmentKind::Context) continue;
    for (std::size_t j = seg.start; j < seg.end(); ++j) {
      scores.push_back({j, j < tokens.size() ? tokens[j] : kImageSlot, r[j]});
    }
  }
  std::stable_sort(scores.begin(), scores.end(),
                   [](const ContextTokenScore& a, const ContextTokenScore& b) {
                     if (a.mass != b.mass) return a.mass > b.mass;
                     return a.position < b.position;
                   });
  if (scores.size() > k) scores.resize(k);
  return scores;
}

}  // namespace madrag
