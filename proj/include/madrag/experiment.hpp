#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "madrag/instrumentation.hpp"
#include "madrag/intervention.hpp"
#include "madrag/model.hpp"
#include "madrag/toytask.hpp"

namespace madrag {

inline constexpr const char* kArtifactName = "madrag-toy";
inline constexpr const char* kArtifactVersion = "1.0.0";

struct HeatmapConfig {
  std::size_t samples = 2;  // first n samples per variant
  std::optional<SinkFilterConfig> sink_filter = SinkFilterConfig{};
};

struct ExperimentConfig {
  // Master seed. The evaluation set uses it directly, the training set uses
  // train_data_seed(), and the trainer's RNG uses it as well.
  std::uint64_t seed = 0;
  DatasetConfig dataset;  // dataset.seed is ignored in favour of `seed`

  std::string preset = "tiny";
  std::optional<std::filesystem::path> checkpoint;
  bool train_model = true;  // when a checkpoint is also set, it is written after training
  std::size_t train_samples = 4000;
  TrainConfig train;

  std::vector<Variant> variants = {Variant::ClosedBook, Variant::VanillaRAG, Variant::SwapQC,
                                   Variant::DualQuestionNoInt, Variant::MADRAG};
  MixConfig mix;

  std::vector<double> alphas = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  std::vector<LayerSelection> layer_sets = {LayerSelection::preset(LayerPreset::All),
                                            LayerSelection::preset(LayerPreset::Early),
                                            LayerSelection::preset(LayerPreset::Middle),
                                            LayerSelection::preset(LayerPreset::Later)};
  std::vector<std::size_t> chunk_counts = {0, 1, 2, 4, 8};

  std::size_t timing_samples = 100;
  std::size_t timing_warmup = 3;
  std::size_t timing_repeats = 3;

  HeatmapConfig heatmaps;
  std::filesystem::path out_dir;  // empty: nothing is written

  std::uint64_t train_data_seed() const { return seed ^ 0x9E3779B97F4A7C15ULL; }
  DatasetConfig eval_dataset() const;
  DatasetConfig train_dataset() const;
  ModelConfig model_config() const;
  void validate() const;
};

// JSON round trip. Unknown keys and malformed values throw ConfigError.
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
// FNV-1a (64-bit) of config_to_json(cfg), as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

struct QuadrantCell {
  bool cb_correct = false;
  bool rag_correct = false;
  std::size_t n = 0;
  std::optional<double> method_accuracy;  // empty when n == 0
  double baseline_accuracy = 0.0;         // RAG accuracy inside the cell, 1 or 0
  std::optional<double> delta;            // method - baseline, empty when n == 0
  std::string tag;
};

struct QuadrantReport {
  // Ordered (cb, rag) = (1,1), (1,0), (0,1), (0,0).
  std::array<QuadrantCell, 4> cells;
  std::size_t total = 0;
  std::vector<std::size_t> assignment;  // cell index per sample

  const QuadrantCell& cell(bool cb_correct, bool rag_correct) const;
};

inline constexpr const char* kDistractionTag = "attention-distraction cases";

QuadrantReport quadrant_analysis(const std::vector<bool>& cb_correct,
                                 const std::vector<bool>& rag_correct,
                                 const std::vector<bool>& method_correct);

struct TrainSummary {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<GradCheckReport> grad_check;
};

// Trains, loads, or trains-then-saves according to cfg. Throws IoError for a
// missing checkpoint and ConfigError when neither source is configured.
ModelWeights obtain_model(const ExperimentConfig& cfg, std::optional<TrainSummary>* summary = nullptr);

struct VariantRun {
  Variant variant = Variant::ClosedBook;
  EvalResult eval;
};

struct ExperimentResult {
  std::string config_hash;
  std::optional<TrainSummary> training;
  std::vector<VariantRun> runs;
  std::optional<QuadrantReport> quadrant;  // when ClosedBook, VanillaRAG and MADRAG all ran
  std::vector<std::filesystem::path> files;

  const VariantRun& run(Variant v) const;
};

// Evaluates every configured variant on the evaluation set and, when
// cfg.out_dir is set, writes summary.json, samples.csv, stats.csv,
// quadrant.csv and heatmaps/. Samples are reported in id order.
ExperimentResult run_experiment(const ExperimentConfig& cfg);
ExperimentResult run_experiment(const ExperimentConfig& cfg, const ModelWeights& weights,
                                std::optional<TrainSummary> training = {});

struct SweepRow {
  std::string label;
  double alpha = 0.0;
  std::string layers;
  std::size_t chunks = 0;
  double accuracy = 0.0;
  double mean_rho_image = 0.0;
  double mean_rho_context = 0.0;
};

struct AlphaSweep {
  std::vector<SweepRow> rows;  // one MADRAG row per alpha, in input order
  SweepRow dual_question;      // DualQuestionNoInt reference
  SweepRow vanilla;            // VanillaRAG reference
  std::vector<std::vector<bool>> correctness;  // per alpha row
  std::vector<bool> dual_question_correctness;
};

AlphaSweep alpha_sweep(const ExperimentConfig& cfg, const ModelWeights& weights,
                       const std::vector<double>& alphas);

// One MADRAG row per layer selection with cfg.mix.alpha.
std::vector<SweepRow> layer_sweep(const ExperimentConfig& cfg, const ModelWeights& weights,
                                  const std::vector<LayerSelection>& selections);

struct ChunkSweepRow {
  std::size_t chunks = 0;
  double rag_accuracy = 0.0;
  double rag_rho_image = 0.0;
  double madrag_accuracy = 0.0;
  double madrag_rho_image = 0.0;
  double gap() const { return madrag_accuracy - rag_accuracy; }
};

std::vector<ChunkSweepRow> context_quantity_sweep(const ExperimentConfig& cfg,
                                                  const ModelWeights& weights,
                                                  const std::vector<std::size_t>& chunk_counts);

struct TimingRow {
  std::string label;
  double mean_seconds = 0.0;
  double ratio_vs_rag = 0.0;
  std::size_t sequence_length = 0;  // of the first sample
};

struct TimingReport {
  std::vector<TimingRow> rows;  // VanillaRAG, VanillaRAG-matched, DualQuestionNoInt, MADRAG
  std::size_t samples = 0;
  double madrag_vs_matched = 0.0;

  const TimingRow& row(const std::string& label) const;
};

// Wall-clock greedy decoding of one token per sample, interleaving the
// variants per sample. The matched baseline is VanillaRAG whose context is
// padded with T filler tokens so its length equals the dual-question layout.
TimingReport timing_benchmark(const ExperimentConfig& cfg, const ModelWeights& weights);

// CSV/JSON writers shared with the CLI. Every CSV starts with a '#' comment
// line naming the artifact, version, seed and config hash.
std::string provenance_line(const ExperimentConfig& cfg);
std::string alpha_sweep_csv(const ExperimentConfig& cfg, const AlphaSweep& sweep);
std::string layer_sweep_csv(const ExperimentConfig& cfg, const std::vector<SweepRow>& rows);
std::string chunk_sweep_csv(const ExperimentConfig& cfg, const std::vector<ChunkSweepRow>& rows);
std::string timing_csv(const ExperimentConfig& cfg, const TimingReport& report);
std::string quadrant_csv(const ExperimentConfig& cfg, const QuadrantReport& report);
std::string samples_csv(const ExperimentConfig& cfg, const ExperimentResult& result);
std::string stats_csv(const ExperimentConfig& cfg, const ExperimentResult& result);

// Writes `text` to out_dir/name, creating directories.
std::filesystem::path write_artifact(const std::filesystem::path& out_dir, const std::string& name,
                                     const std::string& text);

}  // namespace madrag
