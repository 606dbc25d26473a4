#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "madrag/error.hpp"
#include "madrag/experiment.hpp"

using namespace madrag;

namespace {

int fail(const std::string& kind, const std::string& message, int code) {
  const nlohmann::json j = {{"error", {{"kind", kind}, {"message", message}}}};
  std::cerr << j.dump() << '\n';
  return code;
}

std::string fmt(double v, int prec = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

void print_table(const ExperimentResult& r) {
  std::printf("%-18s %8s %10s %12s\n", "variant", "accuracy", "rho_image", "rho_context");
  for (const auto& run : r.runs) {
    std::printf("%-18s %8s %10s %12s\n", std::string(to_string(run.variant)).c_str(),
                fmt(run.eval.accuracy()).c_str(), fmt(run.eval.mean_rho_image()).c_str(),
                fmt(run.eval.mean_rho_context()).c_str());
  }
}

void print_quadrant(const QuadrantReport& q) {
  std::printf("%-4s %-4s %6s %10s %8s  %s\n", "cb", "rag", "n", "method", "delta", "tag");
  for (const auto& c : q.cells) {
    std::printf("%-4d %-4d %6zu %10s %8s  %s\n", c.cb_correct ? 1 : 0, c.rag_correct ? 1 : 0, c.n,
                c.method_accuracy ? fmt(*c.method_accuracy).c_str() : "-",
                c.delta ? fmt(*c.delta).c_str() : "-", c.tag.c_str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy-scale attention distraction experiments: variant comparison, attention "
               "mixing, sweeps and timing."};
  app.set_version_flag("--version", kArtifactVersion);

  std::string config_path, report = "table", sweep = "alpha", form, layers, checkpoint;
  std::string dump_dataset;
  std::vector<std::string> modes;
  std::optional<double> alpha, distractor_frac, lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> chunks, samples, steps, timing_samples;
  std::vector<double> alphas;
  std::vector<std::size_t> chunk_counts;
  std::string out;
  bool train_flag = false, dump_config = false;

  app.add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--mode", modes, "variants to run: closedbook, rag, swap, dualq, madrag")
      ->check(CLI::IsMember({"closedbook", "rag", "swap", "dualq", "madrag"}));
  app.add_option("--alpha", alpha, "mixing weight in [0, 1]")->check(CLI::Range(0.0, 1.0));
  app.add_option("--layers", layers, "all, early, middle, later or a list such as 0,1");
  app.add_option("--form", form, "mixing form")->check(CLI::IsMember({"output", "strict"}));
  app.add_option("--seed", seed, "master seed");
  app.add_option("--chunks", chunks, "context chunks per sample");
  app.add_option("--distractor-frac", distractor_frac, "fraction of distractor chunks")
      ->check(CLI::Range(0.0, 1.0));
  app.add_option("--samples", samples, "evaluation samples");
  app.add_option("--out", out, "output directory");
  app.add_flag("--train", train_flag, "train the model (saves to --checkpoint when given)");
  app.add_option("--checkpoint", checkpoint, "checkpoint to load, or to write with --train");
  app.add_option("--steps", steps, "training steps");
  app.add_option("--lr", lr, "training learning rate");
  app.add_option("--report", report, "report type")
      ->check(CLI::IsMember({"table", "quadrant", "sweep", "timing"}));
  app.add_option("--sweep", sweep, "sweep axis for --report sweep")
      ->check(CLI::IsMember({"alpha", "layers", "chunks"}));
  app.add_option("--alphas", alphas, "alpha values for the alpha sweep")->delimiter(',');
  app.add_option("--chunk-counts", chunk_counts, "chunk counts for the chunk sweep")->delimiter(',');
  app.add_option("--timing-samples", timing_samples, "samples for --report timing");
  app.add_option("--dump-dataset", dump_dataset, "write the evaluation set as JSON lines");
  app.add_flag("--dump-config", dump_config, "print the resolved config and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    if (!modes.empty()) {
      cfg.variants.clear();
      for (const auto& m : modes) cfg.variants.push_back(parse_variant(m));
    }
    if (alpha) cfg.mix.alpha = *alpha;
    if (!layers.empty()) cfg.mix.layers = LayerSelection::parse(layers);
    if (!form.empty()) cfg.mix.form = parse_mix_form(form);
    if (seed) cfg.seed = *seed;
    if (chunks) cfg.dataset.chunks_per_sample = *chunks;
    if (distractor_frac) cfg.dataset.distractor_fraction = *distractor_frac;
    if (samples) cfg.dataset.n_samples = *samples;
    if (steps) cfg.train.steps = *steps;
    if (lr) cfg.train.learning_rate = *lr;
    if (timing_samples) cfg.timing_samples = *timing_samples;
    if (!alphas.empty()) cfg.alphas = alphas;
    if (!chunk_counts.empty()) cfg.chunk_counts = chunk_counts;
    if (!out.empty()) cfg.out_dir = out;
    if (!checkpoint.empty()) {
      cfg.checkpoint = checkpoint;
      cfg.train_model = train_flag;
    } else if (train_flag) {
      cfg.train_model = true;
    }
    if (report == "quadrant") {
      for (Variant v : {Variant::ClosedBook, Variant::VanillaRAG, Variant::MADRAG}) {
        if (std::find(cfg.variants.begin(), cfg.variants.end(), v) == cfg.variants.end()) {
          cfg.variants.push_back(v);
        }
      }
    }
    cfg.validate();

    if (dump_config) {
      std::cout << config_to_json(cfg) << '\n';
      return 0;
    }
    if (!dump_dataset.empty()) save_dataset(generate_dataset(cfg.eval_dataset()), dump_dataset);

    std::optional<TrainSummary> training;
    const ModelWeights weights = obtain_model(cfg, &training);
    if (training) {
      std::printf("trained: loss %.4f -> %.4f, train accuracy %.4f\n", training->initial_loss,
                  training->final_loss, training->train_accuracy);
    }

    if (report == "table" || report == "quadrant") {
      const ExperimentResult r = run_experiment(cfg, weights, training);
      print_table(r);
      if (report == "quadrant") print_quadrant(*r.quadrant);
      for (const auto& f : r.files) std::printf("wrote %s\n", f.string().c_str());
      return 0;
    }

    std::string csv, name;
    if (report == "timing") {
      const TimingReport t = timing_benchmark(cfg, weights);
      std::printf("%-20s %6s %14s %8s\n", "label", "length", "mean_seconds", "ratio");
      for (const auto& row : t.rows) {
        std::printf("%-20s %6zu %14.6e %8s\n", row.label.c_str(), row.sequence_length,
                    row.mean_seconds, fmt(row.ratio_vs_rag, 3).c_str());
      }
      std::printf("MADRAG / matched-length VanillaRAG: %s\n", fmt(t.madrag_vs_matched, 3).c_str());
      csv = timing_csv(cfg, t);
      name = "timing.csv";
    } else if (sweep == "alpha") {
      const AlphaSweep s = alpha_sweep(cfg, weights, cfg.alphas);
      std::printf("%-18s %6s %8s %10s\n", "label", "alpha", "accuracy", "rho_image");
      for (const SweepRow* r : {&s.vanilla, &s.dual_question}) {
        std::printf("%-18s %6s %8s %10s\n", r->label.c_str(), "-", fmt(r->accuracy).c_str(),
                    fmt(r->mean_rho_image).c_str());
      }
      for (const auto& r : s.rows) {
        std::printf("%-18s %6s %8s %10s\n", r.label.c_str(), fmt(r.alpha, 2).c_str(),
                    fmt(r.accuracy).c_str(), fmt(r.mean_rho_image).c_str());
      }
      csv = alpha_sweep_csv(cfg, s);
      name = "sweep_alpha.csv";
    } else if (sweep == "layers") {
      const auto rows = layer_sweep(cfg, weights, cfg.layer_sets);
      std::printf("%-10s %8s %10s\n", "layers", "accuracy", "rho_image");
      for (const auto& r : rows) {
        std::printf("%-10s %8s %10s\n", r.layers.c_str(), fmt(r.accuracy).c_str(),
                    fmt(r.mean_rho_image).c_str());
      }
      csv = layer_sweep_csv(cfg, rows);
      name = "sweep_layers.csv";
    } else {
      const auto rows = context_quantity_sweep(cfg, weights, cfg.chunk_counts);
      std::printf("%6s %8s %10s %8s %10s %8s\n", "chunks", "rag_acc", "rag_rho_i", "mad_acc",
                  "mad_rho_i", "gap");
      for (const auto& r : rows) {
        std::printf("%6zu %8s %10s %8s %10s %8s\n", r.chunks, fmt(r.rag_accuracy).c_str(),
                    fmt(r.rag_rho_image).c_str(), fmt(r.madrag_accuracy).c_str(),
                    fmt(r.madrag_rho_image).c_str(), fmt(r.gap()).c_str());
      }
      csv = chunk_sweep_csv(cfg, rows);
      name = "sweep_chunks.csv";
    }
    if (!cfg.out_dir.empty()) {
      std::printf("wrote %s\n", write_artifact(cfg.out_dir, name, csv).string().c_str());
    }
    return 0;
  } catch (const Error& e) {
    return fail(e.kind(), e.what(), 1);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
}
