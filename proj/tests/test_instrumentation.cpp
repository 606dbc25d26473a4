#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "madrag/error.hpp"
#include "madrag/instrumentation.hpp"
#include "support.hpp"

using namespace madrag;
using namespace madrag::test;

namespace {

ForwardTrace single_row_trace(const std::vector<double>& last_row) {
  const std::size_t L = last_row.size();
  Tensor rows({L, L});
  for (std::size_t i = 0; i + 1 < L; ++i) rows(i, 0) = 1.0;
  for (std::size_t j = 0; j < L; ++j) rows(L - 1, j) = last_row[j];
  ForwardTrace tr;
  tr.records.push_back({0, 0, rows});
  return tr;
}

std::vector<bool> masked_after(const Tensor& x, const SinkFilterConfig& cfg) {
  return filter_sinks(x, cfg).masked;
}

}  // namespace

TEST(Ratios, ColumnSumExample) {
  // Columns 0-1 are image keys, 2 is the question, 3 is context.
  const SequenceLayout l(Variant::VanillaRAG, {{SegmentKind::Image, 0, 2},
                                               {SegmentKind::Question, 2, 1},
                                               {SegmentKind::Context, 3, 1}});
  const RatioEntry e = compute_ratios(single_row_trace({0.3, 0.2, 0.1, 0.4}), l, 1);
  EXPECT_EQ(e.row, 3u);
  EXPECT_NEAR(e.rho_image, 0.5, 1e-15);
  EXPECT_NEAR(e.rho_context, 0.4, 1e-15);
}

TEST(Ratios, MatchLoopOracleOnRandomTraces) {
  Rng rng(51);
  for (int trial = 0; trial < 50; ++trial) {
    const Variant v = trial % 2 ? Variant::MADRAG : Variant::VanillaRAG;
    const SequenceLayout l = build_layout(v, {1 + rng.below(8), 1 + rng.below(3), 1 + rng.below(8),
                                              rng.below(3)})
                                 .with_generated(rng.below(3));
    const ForwardTrace tr = random_trace(2, 3, l.length(), rng);
    const std::size_t steps = l.count(SegmentKind::Generated) + 1;
    for (std::size_t t = 1; t <= steps; ++t) {
      const std::size_t row = l.prompt_length() + t - 2;
      double img = 0.0, ctx = 0.0;
      for (std::size_t h = 0; h < 3; ++h)
        for (std::size_t j = 0; j < l.length(); ++j) {
          const double a = tr.record(1, h).rows(row, j) / 3.0;
          if (l.kind_at(j) == SegmentKind::Image) img += a;
          if (l.kind_at(j) == SegmentKind::Context) ctx += a;
        }
      const RatioEntry e = compute_ratios(tr, l, t);
      EXPECT_EQ(e.layer, 1u);
      EXPECT_NEAR(e.rho_image, img, 1e-12);
      EXPECT_NEAR(e.rho_context, ctx, 1e-12);
      EXPECT_LE(e.rho_image + e.rho_context, 1.0 + 1e-12);
    }
  }
}

TEST(Ratios, SegmentMassesSumToOne) {
  Rng rng(52);
  const SequenceLayout l = build_layout(Variant::MADRAG, {5, 2, 6, 2}).with_generated(2);
  const ForwardTrace tr = random_trace(2, 2, l.length(), rng);
  for (std::size_t row = 0; row < l.length(); ++row) {
    const auto r = attention_row(tr, 0, row, 1);
    double total = 0.0;
    for (auto k : {SegmentKind::Instruction, SegmentKind::Image, SegmentKind::ImageQuestion,
                   SegmentKind::Context, SegmentKind::ContextQuestion, SegmentKind::Generated})
      total += segment_mass(r, l, k);
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(Ratios, ClosedBookHasNoContextMass) {
  Rng rng(53);
  const SequenceLayout l = build_layout(Variant::ClosedBook, {6, 2, 0, 0});
  const ForwardTrace tr = random_trace(2, 2, l.length(), rng);
  EXPECT_EQ(compute_ratios(tr, l, 1).rho_context, 0.0);
}

TEST(Ratios, SingleHeadAndExplicitLayer) {
  Rng rng(54);
  const SequenceLayout l = build_layout(Variant::ClosedBook, {3, 1, 0, 0});
  const ForwardTrace tr = random_trace(2, 2, l.length(), rng);
  const RatioEntry e = compute_ratios(tr, l, 1, {0, false, 1});
  const auto& rows = tr.record(0, 1).rows;
  EXPECT_NEAR(e.rho_image, rows(3, 0) + rows(3, 1) + rows(3, 2), 1e-15);
  EXPECT_FALSE(e.head_averaged);
}

TEST(Ratios, RejectsStepZeroAndRowsPastTrace) {
  Rng rng(55);
  const SequenceLayout l = build_layout(Variant::ClosedBook, {3, 1, 0, 0});
  const ForwardTrace tr = random_trace(1, 1, l.length(), rng);
  EXPECT_THROW(compute_ratios(tr, l, 0), ConfigError);
  EXPECT_THROW(compute_ratios(tr, l, 2), DimensionError);
}

TEST(Sinks, UniformMassesNeverMasked) {
  const Tensor x = Tensor({2, 6}, std::vector<double>(12, 1.0 / 6));
  for (double tau : {1.0001, 2.0, 5.0}) {
    const auto m = masked_after(x, {tau, SinkStatistic::Median, false});
    EXPECT_EQ(std::count(m.begin(), m.end(), true), 0);
  }
}

TEST(Sinks, SinglePeakMaskedUnderMedian) {
  std::vector<double> v(16, 0.01);
  v[15] = 0.85;
  const SinkFilterResult r = filter_sinks(Tensor({1, 16}, v), {3.0, SinkStatistic::Median, false});
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(r.masked[j], j == 15);
  EXPECT_EQ(r.filtered(0, 15), 0.0);
  EXPECT_EQ(r.filtered(0, 3), 0.01);
}

TEST(Sinks, RenormalizeRescalesSurvivors) {
  std::vector<double> v(8, 0.05);
  v[2] = 0.65;
  const SinkFilterResult r = filter_sinks(Tensor({1, 8}, v), {5.0, SinkStatistic::Mean, true});
  EXPECT_TRUE(r.masked[2]);
  double s = 0.0;
  for (double x : r.filtered.data()) s += x;
  EXPECT_NEAR(s, 1.0, 1e-12);
  EXPECT_NEAR(r.filtered(0, 0), 1.0 / 7.0, 1e-12);
}

TEST(Sinks, DecisionUsesHeadAverage) {
  // Head 0 alone would flag token 0; the average over two heads does not.
  const Tensor x = Tensor::matrix({{0.6, 0.1, 0.1, 0.1, 0.1}, {0.0, 0.25, 0.25, 0.25, 0.25}});
  const auto m = masked_after(x, {3.0, SinkStatistic::Median, false});
  EXPECT_EQ(std::count(m.begin(), m.end(), true), 0);
}

TEST(Sinks, ErrorsAndValidation) {
  EXPECT_THROW(filter_sinks(Tensor({1, 0}), {}), DimensionError);
  EXPECT_THROW(filter_sinks(Tensor({1, 2}, {0.5, 0.5}), {1.0, SinkStatistic::Median, false}),
               ConfigError);
  // Only reachable with a non-positive baseline.
  EXPECT_THROW(filter_sinks(Tensor({1, 2}, {-1.0, -1.0}), {}), DegenerateRowError);
  const Tensor zero_median = Tensor({1, 3}, {0.0, 0.0, 1.0});
  EXPECT_TRUE(filter_sinks(zero_median, {}).masked[2]);
}

TEST(Sinks, IdempotentOnPlantedSinkFixtures) {
  Rng rng(56);
  std::ostringstream violations;
  int n_violations = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t H = 1 + rng.below(4), V = 4 + rng.below(60);
    Tensor x({H, V});
    for (double& v : x.data()) v = rng.uniform(0.5, 1.5);
    // One tier of sinks per fixture; mixed tiers are covered below.
    const std::size_t sinks = rng.below(std::max<std::size_t>(1, V / 8) + 1);
    const double tier = rng.uniform(20.0, 60.0);
    for (std::size_t s = 0; s < sinks; ++s) {
      const std::size_t j = rng.below(V);
      for (std::size_t h = 0; h < H; ++h) x(h, j) = tier * rng.uniform(0.9, 1.1);
    }
    for (std::size_t h = 0; h < H; ++h) {
      double z = 0.0;
      for (std::size_t j = 0; j < V; ++j) z += x(h, j);
      for (std::size_t j = 0; j < V; ++j) x(h, j) /= z;
    }
    const SinkFilterConfig cfg{5.0, trial % 2 ? SinkStatistic::Mean : SinkStatistic::Median, true};
    const SinkFilterResult once = filter_sinks(x, cfg);
    const SinkFilterResult twice = filter_sinks(once.filtered, cfg);
    for (std::size_t j = 0; j < V; ++j) {
      if (twice.masked[j] && !once.masked[j]) {
        ++n_violations;
        violations << "trial " << trial << " token " << j << "\n";
      }
    }
  }
  EXPECT_EQ(n_violations, 0) << violations.str();
}

TEST(Sinks, NotIdempotentWhenSinksAreNested) {
  // Zeroed sinks pull the recomputed median down, exposing a second tier.
  const Tensor x = Tensor({1, 6}, {1, 1, 1, 6, 6, 60});
  const SinkFilterConfig cfg{5.0, SinkStatistic::Median, false};
  const SinkFilterResult once = filter_sinks(x, cfg);
  EXPECT_EQ(once.masked, (std::vector<bool>{false, false, false, false, false, true}));
  const SinkFilterResult twice = filter_sinks(once.filtered, cfg);
  EXPECT_EQ(twice.masked, (std::vector<bool>{false, false, false, true, true, false}));
}

TEST(Sinks, MixedTierFixturesReportNonIdempotence) {
  // Two sink tiers an order of magnitude apart: the first pass can hide the
  // lower tier behind the upper one. Count and print every such fixture.
  Rng rng(60);
  int fixtures = 0, violated = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t V = 16;
    Tensor x({1, V});
    for (double& v : x.data()) v = rng.uniform(0.5, 1.5);
    x(0, rng.below(V)) = rng.uniform(100.0, 200.0);
    x(0, rng.below(V)) = rng.uniform(8.0, 20.0);
    const SinkFilterConfig cfg{5.0, trial % 2 ? SinkStatistic::Mean : SinkStatistic::Median, true};
    const SinkFilterResult once = filter_sinks(x, cfg);
    const SinkFilterResult twice = filter_sinks(once.filtered, cfg);
    ++fixtures;
    bool grew = false;
    for (std::size_t j = 0; j < V; ++j) grew |= twice.masked[j] && !once.masked[j];
    violated += grew;
  }
  std::printf("sink filter non-idempotent on %d of %d mixed-tier fixtures\n", violated, fixtures);
  RecordProperty("non_idempotent_fixtures", violated);
  EXPECT_GT(violated, 0);
}

TEST(VisualHeads, RanksByImageMass) {
  Rng rng(57);
  const SequenceLayout l = build_layout(Variant::ClosedBook, {4, 1, 0, 0});
  ForwardTrace tr = random_trace(2, 2, 5, rng);
  Tensor& dominant = tr.records[3].rows;
  for (std::size_t j = 0; j < 5; ++j) dominant(4, j) = j < 4 ? 0.25 : 0.0;
  const auto top = select_visual_heads(tr, l, 1);
  ASSERT_EQ(top.size(), 1u);
  EXPECT_EQ(top[0].layer, 1u);
  EXPECT_EQ(top[0].head, 1u);
  EXPECT_NEAR(top[0].image_mass, 1.0, 1e-15);

  const auto all = select_visual_heads(tr, l, 4);
  ASSERT_EQ(all.size(), 4u);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_GE(all[i - 1].image_mass, all[i].image_mass);
  EXPECT_TRUE(select_visual_heads(tr, l, 0).empty());
  EXPECT_THROW(select_visual_heads(tr, l, 5), ConfigError);
  EXPECT_THROW(select_visual_heads(ForwardTrace{}, l, 0), ContractViolation);
}

TEST(VisualHeads, TiesKeepLayerHeadOrder) {
  const SequenceLayout l = build_layout(Variant::ClosedBook, {1, 1, 0, 0});
  ForwardTrace tr;
  for (std::size_t layer = 0; layer < 2; ++layer)
    for (std::size_t h = 0; h < 2; ++h) tr.records.push_back({layer, h, Tensor::matrix({{1, 0}, {0.5, 0.5}})});
  const auto r = select_visual_heads(tr, l, 4);
  EXPECT_EQ(r[0], (HeadScore{0, 0, 0.5}));
  EXPECT_EQ(r[1], (HeadScore{0, 1, 0.5}));
  EXPECT_EQ(r[3], (HeadScore{1, 1, 0.5}));
}

TEST(Heatmap, ReshapeExample) {
  const Heatmap h = export_heatmap(std::vector<double>{0, 0, 0, 1}, 2, 2);
  EXPECT_EQ(h.grid, Tensor::matrix({{0, 0}, {0, 1}}));
  EXPECT_TRUE(h.sink_mask.empty());
}

TEST(Heatmap, ConstantRowNormalisesToZeros) {
  const Heatmap h = export_heatmap(std::vector<double>(6, 0.2), 2, 3);
  for (double v : h.grid.data()) EXPECT_EQ(v, 0.0);
}

TEST(Heatmap, RawIsABijectionOfTheInput) {
  Rng rng(58);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t r = 1 + rng.below(6), c = 1 + rng.below(6);
    std::vector<double> x(r * c);
    for (double& v : x) v = rng.uniform();
    const Heatmap h = export_heatmap(x, r, c);
    EXPECT_EQ(h.raw.values(), x);
    EXPECT_EQ(h.raw(r - 1, c - 1), x.back());
    if (r * c > 1) {
      EXPECT_DOUBLE_EQ(*std::max_element(h.grid.data().begin(), h.grid.data().end()), 1.0);
    }
  }
}

TEST(Heatmap, SinkFilteredExportZeroesExactlyMaskedCells) {
  std::vector<double> x(16, 0.02);
  x[5] = 0.7;
  const SinkFilterConfig cfg;
  const Heatmap h = export_heatmap(x, 4, 4, cfg);
  const auto mask = filter_sinks(Tensor({1, 16}, x), cfg).masked;
  EXPECT_EQ(h.sink_mask, mask);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(h.raw.data()[i], mask[i] ? 0.0 : x[i]);
}

TEST(Heatmap, ErrorsAndSerialisation) {
  EXPECT_THROW(export_heatmap(std::vector<double>(5, 0.1), 2, 2), DimensionError);
  EXPECT_THROW(export_heatmap(std::vector<double>{0.1, -0.1}, 1, 2), NumericError);
  const Heatmap h = export_heatmap(std::vector<double>{0.0, 0.5, 1.0, 0.25}, 2, 2);
  const std::string comments[] = {"seed 0"};
  EXPECT_EQ(heatmap_to_pgm(h, comments), "P2\n# seed 0\n2 2\n255\n0 128\n255 64\n");
  const std::string csv = heatmap_to_csv(h);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "row,col,raw,normalized,sink");
  EXPECT_NE(csv.find("1,0,1,1,0\n"), std::string::npos);
}

TEST(TopContext, ExampleAndClamp) {
  // Layout: image(1) question(1) context(3); last prompt row is position 4.
  const SequenceLayout l = build_layout(Variant::VanillaRAG, {1, 1, 3, 0});
  const ForwardTrace tr = single_row_trace({0.0, 0.0, 0.1, 0.5, 0.4});
  const std::vector<TokenId> tokens{kImageSlot, 9, 20, 21, 22};
  const auto top = top_context_tokens(tr, l, tokens, 2);
  ASSERT_EQ(top.size(), 2u);
  EXPECT_EQ(top[0], (ContextTokenScore{3, 21, 0.5}));
  EXPECT_EQ(top[1], (ContextTokenScore{4, 22, 0.4}));
  EXPECT_EQ(top_context_tokens(tr, l, tokens, 10).size(), 3u);
  EXPECT_THROW(top_context_tokens(tr, l, tokens, 0), ConfigError);
  const SequenceLayout cb = build_layout(Variant::ClosedBook, {3, 2, 0, 0});
  EXPECT_THROW(top_context_tokens(tr, cb, tokens, 1), LayoutError);
}

TEST(TopContext, MatchesFullSortOracle) {
  Rng rng(59);
  for (int trial = 0; trial < 30; ++trial) {
    const SequenceLayout l = build_layout(Variant::MADRAG, {2, 1, 3 + rng.below(10), 0});
    const ForwardTrace tr = random_trace(2, 2, l.length(), rng);
    std::vector<TokenId> tokens(l.length());
    std::iota(tokens.begin(), tokens.end(), 0);
    const std::size_t k = 1 + rng.below(5);
    const auto got = top_context_tokens(tr, l, tokens, k);
    const Segment c = l.require(SegmentKind::Context);
    const std::size_t row = l.length() - 1;
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t j = c.start; j < c.end(); ++j)
      all.push_back({-(tr.record(1, 0).rows(row, j) + tr.record(1, 1).rows(row, j)) / 2.0, j});
    std::sort(all.begin(), all.end());
    ASSERT_EQ(got.size(), std::min(k, c.length));
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].position, all[i].second);
      EXPECT_NEAR(got[i].mass, -all[i].first, 1e-15);
    }
  }
}
