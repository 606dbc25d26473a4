#include "madrag/model.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "madrag/error.hpp"
#include "madrag/rng.hpp"

namespace madrag {

using nlohmann::json;

namespace {

constexpr const char* kCheckpointFormat = "madrag-toy-checkpoint";
constexpr int kCheckpointVersion = 1;

Tensor vec(std::size_t n, double value = 0.0) {
  Tensor t({n});
  t.fill(value);
  return t;
}

void fill_normal(Tensor& t, Rng& rng, double stddev) {
  for (double& x : t.data()) x = rng.normal(0.0, stddev);
}

json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},       {"d_model", c.d_model},
          {"d_k", c.d_k},           {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size},
          {"max_seq", c.max_seq},   {"image_patch_dim", c.image_patch_dim}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.d_k = j.at("d_k").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  c.image_patch_dim = j.at("image_patch_dim").get<std::size_t>();
  return c;
}

template <typename W, typename Fn>
void visit(W& w, Fn&& fn) {
  fn("token_embedding", w.token_embedding);
  fn("image_projection", w.image_projection);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    fn(p + "ln1_gamma", L.ln1_gamma);
    fn(p + "ln1_beta", L.ln1_beta);
    fn(p + "wq", L.wq);
    fn(p + "wk", L.wk);
    fn(p + "wv", L.wv);
    fn(p + "wo", L.wo);
    fn(p + "ln2_gamma", L.ln2_gamma);
    fn(p + "ln2_beta", L.ln2_beta);
    fn(p + "w1", L.w1);
    fn(p + "b1", L.b1);
    fn(p + "w2", L.w2);
    fn(p + "b2", L.b2);
  }
  fn("lnf_gamma", w.lnf_gamma);
  fn("lnf_beta", w.lnf_beta);
  fn("w_out", w.w_out);
  fn("b_out", w.b_out);
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_k == 0 || d_ff == 0 ||
      vocab_size == 0 || max_seq == 0 || image_patch_dim == 0) {
    throw ConfigError("model config counts must all be >= 1");
  }
  if (d_model != n_heads * d_k) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must equal n_heads * d_k (" +
                      std::to_string(n_heads * d_k) + ")");
  }
}

ModelConfig tiny_preset() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 32;
  c.d_k = 16;
  c.d_ff = 64;
  c.vocab_size = 64;
  c.max_seq = 128;
  c.image_patch_dim = 16;
  return c;
}

ModelWeights ModelWeights::zeros(const ModelConfig& config) {
  config.validate();
  const std::size_t D = config.d_model, F = config.d_ff;
  ModelWeights w;
  w.config = config;
  w.token_embedding = Tensor({config.vocab_size, D});
  w.image_projection = Tensor({config.image_patch_dim, D});
  w.layers.resize(config.n_layers);
  for (auto& L : w.layers) {
    L.ln1_gamma = vec(D, 1.0);
    L.ln1_beta = vec(D);
    L.wq = Tensor({D, D});
    L.wk = Tensor({D, D});
    L.wv = Tensor({D, D});
    L.wo = Tensor({D, D});
    L.ln2_gamma = vec(D, 1.0);
    L.ln2_beta = vec(D);
    L.w1 = Tensor({D, F});
    L.b1 = vec(F);
    L.w2 = Tensor({F, D});
    L.b2 = vec(D);
  }
  w.lnf_gamma = vec(D, 1.0);
  w.lnf_beta = vec(D);
  w.w_out = Tensor({D, config.vocab_size});
  w.b_out = vec(config.vocab_size);
  return w;
}

ModelWeights ModelWeights::random(const ModelConfig& config, std::uint64_t seed) {
  ModelWeights w = zeros(config);
  Rng rng(seed);
  const double D = static_cast<double>(config.d_model);
  const double F = static_cast<double>(config.d_ff);
  fill_normal(w.token_embedding, rng, 1.0);
  fill_normal(w.image_projection, rng, 1.0 / std::sqrt(double(config.image_patch_dim)));
  for (auto& L : w.layers) {
    fill_normal(L.wq, rng, 1.0 / std::sqrt(D));
    fill_normal(L.wk, rng, 1.0 / std::sqrt(D));
    fill_normal(L.wv, rng, 1.0 / std::sqrt(D));
    fill_normal(L.wo, rng, 1.0 / std::sqrt(D));
    fill_normal(L.w1, rng, 1.0 / std::sqrt(D));
    fill_normal(L.w2, rng, 1.0 / std::sqrt(F));
  }
  fill_normal(w.w_out, rng, 1.0 / std::sqrt(D));
  return w;
}

std::size_t ModelWeights::parameter_count() const {
  std::size_t n = 0;
  for_each_parameter(*this, [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

void ModelWeights::validate() const {
  const ModelWeights ref = zeros(config);
  if (layers.size() != ref.layers.size()) throw ConfigError("layer count mismatch");
  std::map<std::string, Shape> expected;
  for_each_parameter(ref, [&](const std::string& n, const Tensor& t) { expected[n] = t.shape(); });
  for_each_parameter(*this, [&](const std::string& n, const Tensor& t) {
    if (t.shape() != expected.at(n)) {
      throw DimensionError("weight " + n + " has shape " + shape_to_string(t.shape()) +
                           ", expected " + shape_to_string(expected.at(n)));
    }
    require_finite(t, n.c_str());
  });
}

void for_each_parameter(ModelWeights& w,
                        const std::function<void(const std::string&, Tensor&)>& fn) {
  visit(w, fn);
}

void for_each_parameter(const ModelWeights& w,
                        const std::function<void(const std::string&, const Tensor&)>& fn) {
  visit(w, fn);
}

std::string checkpoint_to_string(const ModelWeights& weights) {
  json tensors = json::object();
  for_each_parameter(weights, [&](const std::string& name, const Tensor& t) {
    tensors[name] = {{"shape", t.shape()}, {"data", t.values()}};
  });
  json doc = {{"format", kCheckpointFormat},
              {"version", kCheckpointVersion},
              {"config", config_to_json(weights.config)},
              {"tensors", std::move(tensors)}};
  return doc.dump();
}

ModelWeights checkpoint_from_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  if (doc.value("format", "") != kCheckpointFormat) throw IoError("not a madrag checkpoint");
  if (doc.value("version", 0) != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + doc.value("version", json()).dump());
  }
  try {
    ModelWeights w = ModelWeights::zeros(config_from_json(doc.at("config")));
    const json& tensors = doc.at("tensors");
    for_each_parameter(w, [&](const std::string& name, Tensor& t) {
      if (!tensors.contains(name)) throw IoError("checkpoint is missing tensor " + name);
      const json& entry = tensors.at(name);
      t = Tensor(entry.at("shape").get<Shape>(), entry.at("data").get<std::vector<double>>());
    });
    w.validate();
    return w;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const ModelWeights& weights, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << checkpoint_to_string(weights);
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

ModelWeights load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_string(ss.str());
}

}  // namespace madrag
