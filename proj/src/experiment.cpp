#include "madrag/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "madrag/error.hpp"
#include "madrag/transformer.hpp"

namespace madrag {

using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : ""; }

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const char* where) {
  if (!obj.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : obj.items()) {
    if (!ok.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace

DatasetConfig ExperimentConfig::eval_dataset() const {
  DatasetConfig d = dataset;
  d.seed = seed;
  return d;
}

DatasetConfig ExperimentConfig::train_dataset() const {
  DatasetConfig d = dataset;
  d.seed = train_data_seed();
  d.n_samples = train_samples;
  d.chunks_per_sample = 0;
  d.distractor_fraction = 0.0;
  return d;
}

ModelConfig ExperimentConfig::model_config() const {
  if (preset != "tiny") throw ConfigError("unknown model preset '" + preset + "'");
  return tiny_preset();
}

void ExperimentConfig::validate() const {
  dataset.validate();
  train.validate();
  const ModelConfig mc = model_config();
  mix.validate(mc.n_layers);
  if (variants.empty()) throw ConfigError("no variants requested");
  if (train_model && train_samples == 0) throw ConfigError("train_samples must be >= 1");
  if (!train_model && !checkpoint) throw ConfigError("either training or a checkpoint is required");
  for (double a : alphas) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("sweep alpha " + num(a) + " outside [0, 1]");
  }
  for (const auto& sel : layer_sets) sel.resolve(mc.n_layers);
  if (heatmaps.sink_filter) heatmaps.sink_filter->validate();
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json variants = json::array();
  for (Variant v : cfg.variants) variants.push_back(std::string(to_string(v)));
  json layers = json::array();
  for (const auto& s : cfg.layer_sets) layers.push_back(s.to_string());
  json sink = nullptr;
  if (cfg.heatmaps.sink_filter) {
    const auto& s = *cfg.heatmaps.sink_filter;
    sink = {{"threshold", s.threshold_multiplier},
            {"statistic", s.statistic == SinkStatistic::Median ? "median" : "mean"},
            {"renormalize", s.renormalize}};
  }
  json j = {
      {"seed", cfg.seed},
      {"dataset",
       {{"n_samples", cfg.dataset.n_samples},
        {"grid_rows", cfg.dataset.grid_rows},
        {"grid_cols", cfg.dataset.grid_cols},
        {"n_symbols", cfg.dataset.n_symbols},
        {"chunks_per_sample", cfg.dataset.chunks_per_sample},
        {"distractor_fraction", cfg.dataset.distractor_fraction}}},
      {"model",
       {{"preset", cfg.preset},
        {"checkpoint", cfg.checkpoint ? json(cfg.checkpoint->string()) : json(nullptr)},
        {"train", cfg.train_model}}},
      {"train",
       {{"samples", cfg.train_samples},
        {"learning_rate", cfg.train.learning_rate},
        {"steps", cfg.train.steps},
        {"batch_size", cfg.train.batch_size},
        {"max_instruction_pad", cfg.train.max_instruction_pad},
        {"grad_clip", cfg.train.grad_clip},
        {"gradient_check", cfg.train.gradient_check}}},
      {"variants", variants},
      {"mix",
       {{"alpha", cfg.mix.alpha},
        {"layers", cfg.mix.layers.to_string()},
        {"form", std::string(to_string(cfg.mix.form))}}},
      {"sweeps", {{"alphas", cfg.alphas}, {"layers", layers}, {"chunks", cfg.chunk_counts}}},
      {"timing",
       {{"samples", cfg.timing_samples},
        {"warmup", cfg.timing_warmup},
        {"repeats", cfg.timing_repeats}}},
      {"heatmaps", {{"samples", cfg.heatmaps.samples}, {"sink_filter", sink}}},
      {"out", cfg.out_dir.string()},
  };
  return j.dump(2);
}

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  try {
    reject_unknown(j, {"seed", "dataset", "model", "train", "variants", "mix", "sweeps", "timing",
                       "heatmaps", "out"},
                   "config");
    read(j, "seed", cfg.seed);
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      reject_unknown(d, {"n_samples", "grid_rows", "grid_cols", "n_symbols", "chunks_per_sample",
                         "distractor_fraction"},
                     "dataset");
      read(d, "n_samples", cfg.dataset.n_samples);
      read(d, "grid_rows", cfg.dataset.grid_rows);
      read(d, "grid_cols", cfg.dataset.grid_cols);
      read(d, "n_symbols", cfg.dataset.n_symbols);
      read(d, "chunks_per_sample", cfg.dataset.chunks_per_sample);
      read(d, "distractor_fraction", cfg.dataset.distractor_fraction);
    }
    if (j.contains("model")) {
      const json& m = j.at("model");
      reject_unknown(m, {"preset", "checkpoint", "train"}, "model");
      read(m, "preset", cfg.preset);
      read(m, "train", cfg.train_model);
      if (m.contains("checkpoint") && !m.at("checkpoint").is_null()) {
        cfg.checkpoint = m.at("checkpoint").get<std::string>();
      }
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      reject_unknown(t, {"samples", "learning_rate", "steps", "batch_size", "max_instruction_pad",
                         "grad_clip", "gradient_check"},
                     "train");
      read(t, "samples", cfg.train_samples);
      read(t, "learning_rate", cfg.train.learning_rate);
      read(t, "steps", cfg.train.steps);
      read(t, "batch_size", cfg.train.batch_size);
      read(t, "max_instruction_pad", cfg.train.max_instruction_pad);
      read(t, "grad_clip", cfg.train.grad_clip);
      read(t, "gradient_check", cfg.train.gradient_check);
    }
    if (j.contains("variants")) {
      cfg.variants.clear();
      for (const auto& v : j.at("variants")) cfg.variants.push_back(parse_variant(v.get<std::string>()));
    }
    if (j.contains("mix")) {
      const json& m = j.at("mix");
      reject_unknown(m, {"alpha", "layers", "form"}, "mix");
      read(m, "alpha", cfg.mix.alpha);
      if (m.contains("layers")) cfg.mix.layers = LayerSelection::parse(m.at("layers").get<std::string>());
      if (m.contains("form")) cfg.mix.form = parse_mix_form(m.at("form").get<std::string>());
    }
    if (j.contains("sweeps")) {
      const json& s = j.at("sweeps");
      reject_unknown(s, {"alphas", "layers", "chunks"}, "sweeps");
      read(s, "alphas", cfg.alphas);
      read(s, "chunks", cfg.chunk_counts);
      if (s.contains("layers")) {
        cfg.layer_sets.clear();
        for (const auto& l : s.at("layers")) cfg.layer_sets.push_back(LayerSelection::parse(l.get<std::string>()));
      }
    }
    if (j.contains("timing")) {
      const json& t = j.at("timing");
      reject_unknown(t, {"samples", "warmup", "repeats"}, "timing");
      read(t, "samples", cfg.timing_samples);
      read(t, "warmup", cfg.timing_warmup);
      read(t, "repeats", cfg.timing_repeats);
    }
    if (j.contains("heatmaps")) {
      const json& h = j.at("heatmaps");
      reject_unknown(h, {"samples", "sink_filter"}, "heatmaps");
      read(h, "samples", cfg.heatmaps.samples);
      if (h.contains("sink_filter")) {
        const json& s = h.at("sink_filter");
        if (s.is_null()) {
          cfg.heatmaps.sink_filter.reset();
        } else {
          reject_unknown(s, {"threshold", "statistic", "renormalize"}, "heatmaps.sink_filter");
          SinkFilterConfig sc;
          read(s, "threshold", sc.threshold_multiplier);
          read(s, "renormalize", sc.renormalize);
          if (s.contains("statistic")) {
            const auto stat = s.at("statistic").get<std::string>();
            if (stat != "median" && stat != "mean") throw ConfigError("unknown sink statistic " + stat);
            sc.statistic = stat == "median" ? SinkStatistic::Median : SinkStatistic::Mean;
          }
          cfg.heatmaps.sink_filter = sc;
        }
      }
    }
    if (j.contains("out")) cfg.out_dir = j.at("out").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config value: ") + e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return config_from_json(ss.str());
}

std::string config_hash(const ExperimentConfig& cfg) {
  // The output location does not change any result, so it is left out.
  ExperimentConfig c = cfg;
  c.out_dir.clear();
  const std::string text = config_to_json(c);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

const QuadrantCell& QuadrantReport::cell(bool cb_correct, bool rag_correct) const {
  return cells[(cb_correct ? 0 : 2) + (rag_correct ? 0 : 1)];
}

QuadrantReport quadrant_analysis(const std::vector<bool>& cb_correct,
                                 const std::vector<bool>& rag_correct,
                                 const std::vector<bool>& method_correct) {
  if (cb_correct.size() != rag_correct.size() || cb_correct.size() != method_correct.size()) {
    throw DimensionError("quadrant vectors differ in length: " + std::to_string(cb_correct.size()) +
                         ", " + std::to_string(rag_correct.size()) + ", " +
                         std::to_string(method_correct.size()));
  }
  QuadrantReport r;
  r.total = cb_correct.size();
  std::array<std::size_t, 4> hits{};
  for (std::size_t i = 0; i < 4; ++i) {
    r.cells[i].cb_correct = i < 2;
    r.cells[i].rag_correct = i % 2 == 0;
    r.cells[i].baseline_accuracy = r.cells[i].rag_correct ? 1.0 : 0.0;
  }
  r.cells[1].tag = kDistractionTag;
  r.assignment.resize(r.total);
  for (std::size_t s = 0; s < r.total; ++s) {
    const std::size_t c = (cb_correct[s] ? 0 : 2) + (rag_correct[s] ? 0 : 1);
    r.assignment[s] = c;
    ++r.cells[c].n;
    hits[c] += method_correct[s];
  }
  for (std::size_t i = 0; i < 4; ++i) {
    QuadrantCell& cell = r.cells[i];
    if (cell.n == 0) continue;
    cell.method_accuracy = static_cast<double>(hits[i]) / static_cast<double>(cell.n);
    cell.delta = *cell.method_accuracy - cell.baseline_accuracy;
  }
  return r;
}

ModelWeights obtain_model(const ExperimentConfig& cfg, std::optional<TrainSummary>* summary) {
  const ModelConfig mc = cfg.model_config();
  if (cfg.train_model) {
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    TrainReport rep = train(mc, generate_dataset(cfg.train_dataset()), tc);
    if (summary) {
      *summary = TrainSummary{rep.initial_loss, rep.final_loss, rep.train_accuracy, rep.grad_check};
    }
    if (cfg.checkpoint) save_checkpoint(rep.weights, *cfg.checkpoint);
    return std::move(rep.weights);
  }
  if (!cfg.checkpoint) throw ConfigError("no checkpoint given and training disabled");
  if (!std::filesystem::exists(*cfg.checkpoint)) {
    throw IoError("checkpoint not found: " + cfg.checkpoint->string());
  }
  ModelWeights w = load_checkpoint(*cfg.checkpoint);
  if (!(w.config == mc)) throw ConfigError("checkpoint model config differs from preset " + cfg.preset);
  if (summary) summary->reset();
  return w;
}

const VariantRun& ExperimentResult::run(Variant v) const {
  for (const auto& r : runs)
    if (r.variant == v) return r;
  throw ConfigError("variant " + std::string(to_string(v)) + " was not run");
}

std::string provenance_line(const ExperimentConfig& cfg) {
  return std::string("# ") + kArtifactName + " " + kArtifactVersion + " seed=" +
         std::to_string(cfg.seed) + " config_hash=" + config_hash(cfg) + "\n";
}

std::filesystem::path write_artifact(const std::filesystem::path& out_dir, const std::string& name,
                                     const std::string& text) {
  const std::filesystem::path path = out_dir / name;
  std::error_code ec;
  std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
  return path;
}

std::string samples_csv(const ExperimentConfig& cfg, const ExperimentResult& result) {
  std::ostringstream os;
  os << provenance_line(cfg) << "sample_id,variant,layout,predicted,correct\n";
  if (result.runs.empty()) return os.str();
  const std::size_t n = result.runs.front().eval.outcomes.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& run : result.runs) {
      const auto& o = run.eval.outcomes[i];
      os << o.id << ',' << to_string(run.variant) << ',' << to_string(o.layout_variant) << ','
         << o.predicted << ',' << (o.correct ? 1 : 0) << '\n';
    }
  }
  return os.str();
}

std::string stats_csv(const ExperimentConfig& cfg, const ExperimentResult& result) {
  std::ostringstream os;
  os << provenance_line(cfg) << "sample_id,variant,step,layer,rho_image,rho_context\n";
  if (result.runs.empty()) return os.str();
  const std::size_t n = result.runs.front().eval.outcomes.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& run : result.runs) {
      const auto& o = run.eval.outcomes[i];
      os << o.id << ',' << to_string(run.variant) << ',' << o.ratios.step << ',' << o.ratios.layer
         << ',' << num(o.ratios.rho_image) << ',' << num(o.ratios.rho_context) << '\n';
    }
  }
  return os.str();
}

std::string quadrant_csv(const ExperimentConfig& cfg, const QuadrantReport& report) {
  std::ostringstream os;
  os << provenance_line(cfg) << "cb_correct,rag_correct,n,method_accuracy,rag_accuracy,delta,tag\n";
  for (const auto& c : report.cells) {
    os << (c.cb_correct ? 1 : 0) << ',' << (c.rag_correct ? 1 : 0) << ',' << c.n << ','
       << opt_num(c.method_accuracy) << ',' << num(c.baseline_accuracy) << ',' << opt_num(c.delta)
       << ',' << c.tag << '\n';
  }
  return os.str();
}

namespace {

json train_json(const std::optional<TrainSummary>& t) {
  if (!t) return nullptr;
  json j = {{"initial_loss", t->initial_loss},
            {"final_loss", t->final_loss},
            {"train_accuracy", t->train_accuracy}};
  if (t->grad_check) {
    j["grad_check"] = {{"checked", t->grad_check->checked},
                       {"max_rel_error", t->grad_check->max_rel_error},
                       {"worst_parameter", t->grad_check->worst_parameter}};
  }
  return j;
}

std::string summary_json(const ExperimentConfig& cfg, const ExperimentResult& result) {
  json variants = json::array();
  for (const auto& run : result.runs) {
    json v = {{"variant", std::string(to_string(run.variant))},
              {"n", run.eval.outcomes.size()},
              {"accuracy", run.eval.accuracy()},
              {"mean_rho_image", run.eval.mean_rho_image()},
              {"mean_rho_context", run.eval.mean_rho_context()}};
    if (run.variant == Variant::MADRAG) {
      v["alpha"] = cfg.mix.alpha;
      v["layers"] = cfg.mix.layers.to_string();
      v["form"] = std::string(to_string(cfg.mix.form));
    }
    variants.push_back(v);
  }
  json quadrant = nullptr;
  if (result.quadrant) {
    quadrant = json::array();
    for (const auto& c : result.quadrant->cells) {
      quadrant.push_back({{"cb_correct", c.cb_correct},
                          {"rag_correct", c.rag_correct},
                          {"n", c.n},
                          {"method_accuracy", c.method_accuracy ? json(*c.method_accuracy) : json()},
                          {"delta", c.delta ? json(*c.delta) : json()},
                          {"tag", c.tag}});
    }
  }
  json j = {{"artifact", kArtifactName},
            {"version", kArtifactVersion},
            {"seed", cfg.seed},
            {"config_hash", result.config_hash},
            {"config", json::parse(config_to_json(cfg))},
            {"training", train_json(result.training)},
            {"variants", variants},
            {"quadrant", quadrant}};
  return j.dump(2) + "\n";
}

std::optional<MixConfig> mix_for(const ExperimentConfig& cfg, Variant v) {
  if (v == Variant::MADRAG) return cfg.mix;
  return std::nullopt;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  std::optional<TrainSummary> training;
  const ModelWeights weights = obtain_model(cfg, &training);
  return run_experiment(cfg, weights, training);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const ModelWeights& weights,
                                std::optional<TrainSummary> training) {
  cfg.validate();
  const ToyVocabulary vocab = cfg.dataset.vocabulary();
  const std::vector<ToySample> samples = generate_dataset(cfg.eval_dataset());
  ExperimentResult result;
  result.config_hash = config_hash(cfg);
  result.training = std::move(training);
  for (Variant v : cfg.variants) {
    result.runs.push_back({v, evaluate(weights, samples, v, mix_for(cfg, v), vocab)});
  }
  auto has = [&](Variant v) {
    for (const auto& r : result.runs)
      if (r.variant == v) return true;
    return false;
  };
  if (has(Variant::ClosedBook) && has(Variant::VanillaRAG) && has(Variant::MADRAG)) {
    result.quadrant = quadrant_analysis(result.run(Variant::ClosedBook).eval.correctness(),
                                        result.run(Variant::VanillaRAG).eval.correctness(),
                                        result.run(Variant::MADRAG).eval.correctness());
  }
  if (cfg.out_dir.empty()) return result;

  result.files.push_back(write_artifact(cfg.out_dir, "summary.json", summary_json(cfg, result)));
  result.files.push_back(write_artifact(cfg.out_dir, "samples.csv", samples_csv(cfg, result)));
  result.files.push_back(write_artifact(cfg.out_dir, "stats.csv", stats_csv(cfg, result)));
  if (result.quadrant) {
    result.files.push_back(
        write_artifact(cfg.out_dir, "quadrant.csv", quadrant_csv(cfg, *result.quadrant)));
  }
  const std::vector<std::string> comments = {
      std::string(kArtifactName) + " " + kArtifactVersion,
      "seed=" + std::to_string(cfg.seed) + " config_hash=" + result.config_hash};
  for (const auto& run : result.runs) {
    const std::size_t n = std::min(cfg.heatmaps.samples, run.eval.outcomes.size());
    for (std::size_t i = 0; i < n; ++i) {
      const auto& o = run.eval.outcomes[i];
      const Heatmap hm = export_heatmap(o.image_attention, cfg.dataset.grid_rows,
                                        cfg.dataset.grid_cols, cfg.heatmaps.sink_filter);
      std::vector<std::string> c = comments;
      c.push_back("variant=" + std::string(to_string(run.variant)) + " sample=" +
                  std::to_string(o.id) + " layer=" + std::to_string(o.ratios.layer) +
                  " row=" + std::to_string(o.ratios.row));
      const std::string stem = "heatmaps/" + std::string(to_string(run.variant)) + "_sample" +
                               std::to_string(o.id);
      result.files.push_back(write_artifact(cfg.out_dir, stem + ".pgm", heatmap_to_pgm(hm, c)));
      result.files.push_back(write_artifact(cfg.out_dir, stem + ".csv",
                                            provenance_line(cfg) + heatmap_to_csv(hm)));
    }
  }
  return result;
}

namespace {

SweepRow row_from(const std::string& label, const EvalResult& e) {
  SweepRow r;
  r.label = label;
  r.accuracy = e.accuracy();
  r.mean_rho_image = e.mean_rho_image();
  r.mean_rho_context = e.mean_rho_context();
  return r;
}

}  // namespace

AlphaSweep alpha_sweep(const ExperimentConfig& cfg, const ModelWeights& weights,
                       const std::vector<double>& alphas) {
  for (double a : alphas) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("sweep alpha " + num(a) + " outside [0, 1]");
  }
  const ToyVocabulary vocab = cfg.dataset.vocabulary();
  const auto samples = generate_dataset(cfg.eval_dataset());
  AlphaSweep sweep;
  const EvalResult dual = evaluate(weights, samples, Variant::DualQuestionNoInt, {}, vocab);
  sweep.dual_question = row_from("DualQuestionNoInt", dual);
  sweep.dual_question_correctness = dual.correctness();
  sweep.vanilla = row_from("VanillaRAG", evaluate(weights, samples, Variant::VanillaRAG, {}, vocab));
  for (double a : alphas) {
    MixConfig m = cfg.mix;
    m.alpha = a;
    const EvalResult e = evaluate(weights, samples, Variant::MADRAG, m, vocab);
    SweepRow r = row_from("MADRAG", e);
    r.alpha = a;
    r.layers = m.layers.to_string();
    sweep.rows.push_back(r);
    sweep.correctness.push_back(e.correctness());
  }
  return sweep;
}

std::vector<SweepRow> layer_sweep(const ExperimentConfig& cfg, const ModelWeights& weights,
                                  const std::vector<LayerSelection>& selections) {
  const ToyVocabulary vocab = cfg.dataset.vocabulary();
  const auto samples = generate_dataset(cfg.eval_dataset());
  std::vector<SweepRow> rows;
  for (const auto& sel : selections) {
    MixConfig m = cfg.mix;
    m.layers = sel;
    SweepRow r = row_from("MADRAG", evaluate(weights, samples, Variant::MADRAG, m, vocab));
    r.alpha = m.alpha;
    r.layers = sel.to_string();
    rows.push_back(r);
  }
  return rows;
}

std::vector<ChunkSweepRow> context_quantity_sweep(const ExperimentConfig& cfg,
                                                  const ModelWeights& weights,
                                                  const std::vector<std::size_t>& chunk_counts) {
  const ToyVocabulary vocab = cfg.dataset.vocabulary();
  std::vector<ChunkSweepRow> rows;
  for (std::size_t chunks : chunk_counts) {
    DatasetConfig d = cfg.eval_dataset();
    d.chunks_per_sample = chunks;
    const auto samples = generate_dataset(d);
    const EvalResult rag = evaluate(weights, samples, Variant::VanillaRAG, {}, vocab);
    const EvalResult mad = evaluate(weights, samples, Variant::MADRAG, cfg.mix, vocab);
    rows.push_back({chunks, rag.accuracy(), rag.mean_rho_image(), mad.accuracy(),
                    mad.mean_rho_image()});
  }
  return rows;
}

const TimingRow& TimingReport::row(const std::string& label) const {
  for (const auto& r : rows)
    if (r.label == label) return r;
  throw ConfigError("no timing row " + label);
}

TimingReport timing_benchmark(const ExperimentConfig& cfg, const ModelWeights& weights) {
  if (cfg.timing_samples == 0) throw ConfigError("timing needs at least one sample");
  const ToyVocabulary vocab = cfg.dataset.vocabulary();
  DatasetConfig d = cfg.eval_dataset();
  d.n_samples = cfg.timing_samples;
  if (d.chunks_per_sample == 0) throw ConfigError("timing needs a non-empty context");
  const auto samples = generate_dataset(d);

  struct Job {
    std::string label;
    SampleInput input;
  };
  auto jobs_for = [&](const ToySample& s) {
    std::vector<Job> jobs;
    jobs.push_back({"VanillaRAG", make_input(s, Variant::VanillaRAG, vocab)});
    ToySample padded = s;
    padded.context.insert(padded.context.end(), s.question.size(), vocab.filler());
    jobs.push_back({"VanillaRAG-matched", make_input(padded, Variant::VanillaRAG, vocab)});
    jobs.push_back({"DualQuestionNoInt", make_input(s, Variant::DualQuestionNoInt, vocab)});
    jobs.push_back({"MADRAG", make_input(s, Variant::MADRAG, vocab)});
    return jobs;
  };
  auto run_job = [&](const Job& job, const ToySample& s, const MixConfig& mix) {
    std::optional<MixingHook> hook;
    if (job.label == "MADRAG") hook.emplace(job.input.layout, mix, weights.config.n_layers);
    return greedy_decode(weights, job.input.layout, s.image_features, job.input.tokens,
                         hook ? &*hook : nullptr, DecodeOptions{})
        .tokens.front();
  };

  TimingReport report;
  report.samples = samples.size();
  std::map<std::string, double> total;
  std::vector<std::string> order;
  volatile TokenId sink = 0;
  for (std::size_t i = 0; i < cfg.timing_warmup; ++i) {
    const auto& s = samples[i % samples.size()];
    for (const auto& job : jobs_for(s)) sink = run_job(job, s, cfg.mix);
  }
  const std::size_t repeats = std::max<std::size_t>(1, cfg.timing_repeats);
  for (const auto& s : samples) {
    const auto jobs = jobs_for(s);
    if (order.empty()) {
      for (const auto& job : jobs) {
        order.push_back(job.label);
        report.rows.push_back({job.label, 0.0, 0.0, job.input.layout.length()});
      }
    }
    for (std::size_t r = 0; r < repeats; ++r) {
      for (std::size_t k = 0; k < jobs.size(); ++k) {
        // Rotate the starting job so no variant always runs first.
        const Job& job = jobs[(k + r) % jobs.size()];
        const auto t0 = std::chrono::steady_clock::now();
        sink = run_job(job, s, cfg.mix);
        const auto t1 = std::chrono::steady_clock::now();
        total[job.label] += std::chrono::duration<double>(t1 - t0).count();
      }
    }
  }
  (void)sink;
  const double denom = static_cast<double>(samples.size() * repeats);
  for (auto& row : report.rows) row.mean_seconds = total[row.label] / denom;
  const double rag = report.row("VanillaRAG").mean_seconds;
  for (auto& row : report.rows) row.ratio_vs_rag = row.mean_seconds / rag;
  report.madrag_vs_matched =
      report.row("MADRAG").mean_seconds / report.row("VanillaRAG-matched").mean_seconds;
  return report;
}

std::string alpha_sweep_csv(const ExperimentConfig& cfg, const AlphaSweep& sweep) {
  std::ostringstream os;
  os << provenance_line(cfg) << "label,alpha,layers,accuracy,mean_rho_image,mean_rho_context\n";
  auto line = [&](const SweepRow& r, const std::string& alpha) {
    os << r.label << ',' << alpha << ',' << r.layers << ',' << num(r.accuracy) << ','
       << num(r.mean_rho_image) << ',' << num(r.mean_rho_context) << '\n';
  };
  line(sweep.vanilla, "");
  line(sweep.dual_question, "");
  for (const auto& r : sweep.rows) line(r, num(r.alpha));
  return os.str();
}

std::string layer_sweep_csv(const ExperimentConfig& cfg, const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << provenance_line(cfg) << "layers,alpha,accuracy,mean_rho_image,mean_rho_context\n";
  for (const auto& r : rows) {
    os << '"' << r.layers << '"' << ',' << num(r.alpha) << ',' << num(r.accuracy) << ','
       << num(r.mean_rho_image) << ',' << num(r.mean_rho_context) << '\n';
  }
  return os.str();
}

std::string chunk_sweep_csv(const ExperimentConfig& cfg, const std::vector<ChunkSweepRow>& rows) {
  std::ostringstream os;
  os << provenance_line(cfg)
     << "chunks,rag_accuracy,rag_rho_image,madrag_accuracy,madrag_rho_image,gap\n";
  for (const auto& r : rows) {
    os << r.chunks << ',' << num(r.rag_accuracy) << ',' << num(r.rag_rho_image) << ','
       << num(r.madrag_accuracy) << ',' << num(r.madrag_rho_image) << ',' << num(r.gap()) << '\n';
  }
  return os.str();
}

std::string timing_csv(const ExperimentConfig& cfg, const TimingReport& report) {
  std::ostringstream os;
  os << provenance_line(cfg) << "label,sequence_length,mean_seconds,ratio_vs_rag\n";
  for (const auto& r : report.rows) {
    os << r.label << ',' << r.sequence_length << ',' << num(r.mean_seconds) << ','
       << num(r.ratio_vs_rag) << '\n';
  }
  os << "# madrag_vs_matched=" << num(report.madrag_vs_matched) << '\n';
  return os.str();
}

}  // namespace madrag
