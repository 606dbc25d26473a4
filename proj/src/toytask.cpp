#include "madrag/toytask.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "madrag/backprop.hpp"
#include "madrag/error.hpp"
#include "madrag/rng.hpp"
#include "madrag/transformer.hpp"

namespace madrag {

using nlohmann::json;

void DatasetConfig::validate() const {
  if (n_symbols < 2) throw ConfigError("n_symbols must be >= 2");
  if (grid_rows == 0 || grid_cols == 0) throw ConfigError("grid must have at least one cell");
  if (!(distractor_fraction >= 0.0 && distractor_fraction <= 1.0)) {
    throw ConfigError("distractor_fraction must lie in [0, 1]");
  }
}

std::vector<ToySample> generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  const ToyVocabulary vocab = cfg.vocabulary();
  const std::size_t V = cfg.grid_rows * cfg.grid_cols;
  const auto n_distract = static_cast<std::size_t>(
      std::llround(cfg.distractor_fraction * static_cast<double>(cfg.chunks_per_sample)));
  Rng rng(cfg.seed);
  std::vector<ToySample> out;
  out.reserve(cfg.n_samples);
  for (std::size_t id = 0; id < cfg.n_samples; ++id) {
    ToySample s;
    s.id = id;
    s.grid_rows = cfg.grid_rows;
    s.grid_cols = cfg.grid_cols;
    s.cells.resize(V);
    s.image_features = Tensor({V, vocab.patch_dim()});
    for (std::size_t c = 0; c < V; ++c) {
      s.cells[c] = rng.below(cfg.n_symbols);
      s.image_features(c, s.cells[c]) = 1.0;
      s.image_features(c, cfg.n_symbols + c / cfg.grid_cols) = 1.0;
      s.image_features(c, cfg.n_symbols + cfg.grid_rows + c % cfg.grid_cols) = 1.0;
    }
    const std::size_t qr = rng.below(cfg.grid_rows), qc = rng.below(cfg.grid_cols);
    const std::size_t truth = s.cells[qr * cfg.grid_cols + qc];
    s.question = {vocab.address(qr, qc)};
    s.answer = vocab.symbol(truth);

    s.chunks.assign(cfg.chunks_per_sample, ChunkKind::Relevant);
    std::fill_n(s.chunks.begin(), n_distract, ChunkKind::Distractor);
    for (std::size_t i = s.chunks.size(); i > 1; --i) {
      std::swap(s.chunks[i - 1], s.chunks[rng.below(i)]);
    }
    for (ChunkKind kind : s.chunks) {
      if (kind == ChunkKind::Relevant) {
        s.context.insert(s.context.end(), {vocab.row_token(qr), vocab.col_token(qc), s.answer});
        continue;
      }
      std::size_t r = qr, c = qc;
      if (rng.below(2) == 1) {
        r = rng.below(cfg.grid_rows);
        c = rng.below(cfg.grid_cols);
      }
      std::size_t sym = rng.below(cfg.n_symbols - 1);
      if (sym >= truth) ++sym;
      s.context.insert(s.context.end(), {vocab.row_token(r), vocab.col_token(c), vocab.symbol(sym)});
    }
    out.push_back(std::move(s));
  }
  return out;
}

TokenId lookup_answer(const ToySample& sample, const ToyVocabulary& vocab) {
  if (sample.question.size() != 1) throw ConfigError("question must be one address token");
  const auto base = static_cast<std::size_t>(vocab.address(0, 0));
  const auto q = static_cast<std::size_t>(sample.question[0]);
  if (q < base || q >= base + vocab.rows * vocab.cols) throw ConfigError("question is not an address");
  const std::size_t qr = (q - base) / vocab.cols, qc = (q - base) % vocab.cols;
  const Tensor& f = sample.image_features;
  for (std::size_t cell = 0; cell < f.rows(); ++cell) {
    if (f(cell, vocab.n_symbols + qr) != 1.0) continue;
    if (f(cell, vocab.n_symbols + vocab.rows + qc) != 1.0) continue;
    for (std::size_t s = 0; s < vocab.n_symbols; ++s) {
      if (f(cell, s) == 1.0) return vocab.symbol(s);
    }
  }
  throw ConfigError("sample " + std::to_string(sample.id) + " has no cell at the queried address");
}

std::string dataset_to_jsonl(const std::vector<ToySample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    json chunks = json::array();
    for (ChunkKind k : s.chunks) chunks.push_back(k == ChunkKind::Relevant ? "relevant" : "distractor");
    json j = {{"id", s.id},
              {"grid_rows", s.grid_rows},
              {"grid_cols", s.grid_cols},
              {"cells", s.cells},
              {"patch_dim", s.image_features.cols()},
              {"image_features", s.image_features.values()},
              {"question", s.question},
              {"answer", s.answer},
              {"context", s.context},
              {"chunks", chunks}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<ToySample> dataset_from_jsonl(const std::string& text) {
  std::vector<ToySample> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      ToySample s;
      s.id = j.at("id").get<std::size_t>();
      s.grid_rows = j.at("grid_rows").get<std::size_t>();
      s.grid_cols = j.at("grid_cols").get<std::size_t>();
      s.cells = j.at("cells").get<std::vector<std::size_t>>();
      const auto patch = j.at("patch_dim").get<std::size_t>();
      s.image_features = Tensor({s.grid_rows * s.grid_cols, patch},
                                j.at("image_features").get<std::vector<double>>());
      s.question = j.at("question").get<std::vector<TokenId>>();
      s.answer = j.at("answer").get<TokenId>();
      s.context = j.at("context").get<std::vector<TokenId>>();
      for (const auto& k : j.at("chunks")) {
        const auto name = k.get<std::string>();
        if (name != "relevant" && name != "distractor") throw ConfigError("bad chunk kind " + name);
        s.chunks.push_back(name == "relevant" ? ChunkKind::Relevant : ChunkKind::Distractor);
      }
      if (s.context.size() != 3 * s.chunks.size()) throw ConfigError("context/chunk count mismatch");
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw IoError("dataset line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw IoError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_dataset(const std::vector<ToySample>& samples, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << dataset_to_jsonl(samples);
}

std::vector<ToySample> load_dataset(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return dataset_from_jsonl(ss.str());
}

Variant effective_variant(Variant variant, std::size_t context_length) {
  return context_length == 0 ? Variant::ClosedBook : variant;
}

SampleInput make_input(const ToySample& sample, Variant variant, const ToyVocabulary& vocab,
                       std::size_t instruction_pad, std::size_t max_seq) {
  const std::size_t cn = variant == Variant::ClosedBook ? 0 : sample.context.size();
  LayoutSizes sizes{sample.image_features.rows(), sample.question.size(), cn, instruction_pad};
  SequenceLayout layout = build_layout(variant, sizes, max_seq);
  SegmentTokens seg{std::vector<TokenId>(instruction_pad, vocab.filler()), sample.question,
                    cn ? sample.context : std::vector<TokenId>{}};
  std::vector<TokenId> tokens = assemble_tokens(layout, seg);
  return {std::move(layout), std::move(tokens)};
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  if (steps == 0) throw ConfigError("steps must be >= 1");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0");
}

namespace {

std::vector<Tensor*> parameter_list(ModelWeights& w) {
  std::vector<Tensor*> out;
  for_each_parameter(w, [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<std::string> parameter_names(const ModelWeights& w) {
  std::vector<std::string> out;
  for_each_parameter(w, [&](const std::string& name, const Tensor&) { out.push_back(name); });
  return out;
}

ModelWeights zero_grads(const ModelConfig& cfg) {
  ModelWeights g = ModelWeights::zeros(cfg);
  for_each_parameter(g, [](const std::string&, Tensor& t) { t.fill(0.0); });
  return g;
}

void check_compatible(const ModelConfig& cfg, const ToyVocabulary& vocab) {
  if (vocab.size() > cfg.vocab_size) {
    throw ConfigError("task vocabulary of " + std::to_string(vocab.size()) +
                      " tokens exceeds the model's " + std::to_string(cfg.vocab_size));
  }
  if (vocab.patch_dim() != cfg.image_patch_dim) {
    throw ConfigError("task patch width " + std::to_string(vocab.patch_dim()) +
                      " differs from the model's image_patch_dim " +
                      std::to_string(cfg.image_patch_dim));
  }
}

}  // namespace

double batch_loss(const ModelWeights& weights, std::span<const ToySample> batch,
                  const ToyVocabulary& vocab, ModelWeights* grads,
                  std::span<const std::size_t> pads) {
  if (batch.empty()) throw ConfigError("empty batch");
  if (!pads.empty() && pads.size() != batch.size()) throw ConfigError("one pad per sample required");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  std::vector<Tensor*> acc;
  if (grads) acc = parameter_list(*grads);
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const ToySample& s = batch[i];
    const SampleInput in =
        make_input(s, Variant::ClosedBook, vocab, pads.empty() ? 0 : pads[i], weights.config.max_seq);
    const Tensor x = embed_sequence(weights, in.layout, s.image_features, in.tokens);
    const std::pair<std::size_t, TokenId> target{in.layout.length() - 1, s.answer};
    if (!grads) {
      const ForwardTrace tr = forward(weights, x, CausalMask(in.layout.length()));
      loss += cross_entropy(tr.logits, std::span(&target, 1), nullptr) * inv_b;
      continue;
    }
    ForwardCache cache;
    const ForwardTrace tr = forward(weights, x, CausalMask(in.layout.length()), nullptr, false, &cache);
    Tensor d_logits;
    loss += cross_entropy(tr.logits, std::span(&target, 1), &d_logits, inv_b) * inv_b;
    Gradients g = backward(weights, cache, d_logits);
    accumulate_embedding_gradients(g.params, in.layout, s.image_features, in.tokens, g.d_embedded);
    const auto src = parameter_list(g.params);
    for (std::size_t p = 0; p < acc.size(); ++p) {
      auto dst = acc[p]->data();
      auto from = src[p]->data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += from[k];
    }
  }
  return loss;
}

GradCheckReport gradient_check(const ModelWeights& weights, std::span<const ToySample> batch,
                               const ToyVocabulary& vocab, std::size_t n_params,
                               std::uint64_t seed, double h, double floor) {
  ModelWeights grads = zero_grads(weights.config);
  batch_loss(weights, batch, vocab, &grads);
  ModelWeights probe = weights;
  const auto params = parameter_list(probe);
  const auto analytic = parameter_list(grads);
  const auto names = parameter_names(weights);
  std::size_t total = 0;
  for (const Tensor* t : params) total += t->size();

  Rng rng(seed);
  GradCheckReport report;
  for (std::size_t n = 0; n < n_params; ++n) {
    std::size_t flat = rng.below(total), p = 0;
    while (flat >= params[p]->size()) flat -= params[p++]->size();
    double& slot = params[p]->data()[flat];
    const double orig = slot;
    slot = orig + h;
    const double up = batch_loss(probe, batch, vocab, nullptr);
    slot = orig - h;
    const double down = batch_loss(probe, batch, vocab, nullptr);
    slot = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic[p]->data()[flat];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    ++report.checked;
    if (rel >= report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_parameter = names[p] + "[" + std::to_string(flat) + "]";
    }
  }
  return report;
}

TrainReport train(const ModelConfig& config, const std::vector<ToySample>& samples,
                  const TrainConfig& tc) {
  config.validate();
  tc.validate();
  if (samples.empty()) throw ConfigError("training set is empty");
  const ToyVocabulary vocab{samples.front().image_features.cols() -
                                samples.front().grid_rows - samples.front().grid_cols,
                            samples.front().grid_rows, samples.front().grid_cols};
  check_compatible(config, vocab);

  Rng rng(tc.seed);
  TrainReport report{ModelWeights::random(config, rng.bits()), 0, 0, 0, std::nullopt};
  ModelWeights& w = report.weights;

  const std::size_t probe_n = std::min<std::size_t>(samples.size(), 256);
  const std::span<const ToySample> probe(samples.data(), probe_n);
  report.initial_loss = batch_loss(w, probe, vocab, nullptr);

  if (tc.gradient_check) {
    report.grad_check = gradient_check(w, std::span(samples.data(), std::min<std::size_t>(4, samples.size())),
                                       vocab, 64, rng.bits());
  }

  ModelWeights m = zero_grads(config), v = zero_grads(config);
  const auto wp = parameter_list(w), mp = parameter_list(m), vp = parameter_list(v);
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<ToySample> batch(tc.batch_size);
  std::vector<std::size_t> pads(tc.batch_size);
  for (std::size_t step = 1; step <= tc.steps; ++step) {
    for (std::size_t b = 0; b < tc.batch_size; ++b) {
      batch[b] = samples[rng.below(samples.size())];
      pads[b] = tc.max_instruction_pad ? rng.below(tc.max_instruction_pad + 1) : 0;
    }
    ModelWeights g = zero_grads(config);
    const double loss = batch_loss(w, batch, vocab, &g, pads);
    if (!std::isfinite(loss)) {
      throw NumericError("training diverged at step " + std::to_string(step) + " (loss " +
                         std::to_string(loss) + ", lr " + std::to_string(tc.learning_rate) + ")");
    }
    const auto gp = parameter_list(g);
    double scale = 1.0;
    if (tc.grad_clip > 0.0) {
      double sq = 0.0;
      for (const Tensor* t : gp)
        for (double x : t->data()) sq += x * x;
      const double norm = std::sqrt(sq);
      if (norm > tc.grad_clip) scale = tc.grad_clip / norm;
    }
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t p = 0; p < wp.size(); ++p) {
      auto wd = wp[p]->data(), md = mp[p]->data(), vd = vp[p]->data(), gd = gp[p]->data();
      for (std::size_t k = 0; k < wd.size(); ++k) {
        const double gk = gd[k] * scale;
        md[k] = beta1 * md[k] + (1.0 - beta1) * gk;
        vd[k] = beta2 * vd[k] + (1.0 - beta2) * gk * gk;
        wd[k] -= tc.learning_rate * (md[k] / c1) / (std::sqrt(vd[k] / c2) + eps);
      }
    }
    if (tc.log_every && step % tc.log_every == 0) {
      std::fprintf(stderr, "step %zu loss %.5f\n", step, loss);
    }
  }
  w.validate();
  report.final_loss = batch_loss(w, probe, vocab, nullptr);
  std::size_t hits = 0;
  for (const auto& s : samples) {
    const SampleInput in = make_input(s, Variant::ClosedBook, vocab, 0, config.max_seq);
    const ForwardTrace tr = forward(w, embed_sequence(w, in.layout, s.image_features, in.tokens),
                                    CausalMask(in.layout.length()));
    hits += argmax(tr.logits.row(in.layout.length() - 1)) == static_cast<std::size_t>(s.answer);
  }
  report.train_accuracy = static_cast<double>(hits) / static_cast<double>(samples.size());
  return report;
}

double EvalResult::accuracy() const {
  if (outcomes.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& o : outcomes) hits += o.correct;
  return static_cast<double>(hits) / static_cast<double>(outcomes.size());
}

double EvalResult::mean_rho_image() const {
  if (outcomes.empty()) return 0.0;
  double s = 0.0;
  for (const auto& o : outcomes) s += o.ratios.rho_image;
  return s / static_cast<double>(outcomes.size());
}

double EvalResult::mean_rho_context() const {
  if (outcomes.empty()) return 0.0;
  double s = 0.0;
  for (const auto& o : outcomes) s += o.ratios.rho_context;
  return s / static_cast<double>(outcomes.size());
}

std::vector<bool> EvalResult::correctness() const {
  std::vector<bool> out;
  out.reserve(outcomes.size());
  for (const auto& o : outcomes) out.push_back(o.correct);
  return out;
}

EvalResult evaluate(const ModelWeights& weights, const std::vector<ToySample>& samples,
                    Variant variant, const std::optional<MixConfig>& mix,
                    const ToyVocabulary& vocab) {
  check_compatible(weights.config, vocab);
  if (variant == Variant::MADRAG && !mix) throw ConfigError("MADRAG evaluation needs a MixConfig");
  EvalResult result{variant, {}};
  result.outcomes.reserve(samples.size());
  for (const auto& s : samples) {
    const Variant v = effective_variant(variant, s.context.size());
    const SampleInput in = make_input(s, v, vocab, 0, weights.config.max_seq);
    std::optional<MixingHook> hook;
    if (v == Variant::MADRAG) hook.emplace(in.layout, *mix, weights.config.n_layers);
    const DecodeResult dec = greedy_decode(weights, in.layout, s.image_features, in.tokens,
                                           hook ? &*hook : nullptr, DecodeOptions{});
    SampleOutcome o;
    o.id = s.id;
    o.layout_variant = v;
    o.predicted = dec.tokens.front();
    o.correct = o.predicted == s.answer;
    o.ratios = compute_ratios(dec.trace, in.layout, 1);
    const auto row = attention_row(dec.trace, o.ratios.layer, o.ratios.row);
    const Segment img = in.layout.require(SegmentKind::Image);
    o.image_attention.assign(row.begin() + static_cast<std::ptrdiff_t>(img.start),
                             row.begin() + static_cast<std::ptrdiff_t>(img.end()));
    result.outcomes.push_back(std::move(o));
  }
  return result;
}

}  // namespace madrag
