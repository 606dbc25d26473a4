#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "madrag/experiment.hpp"
#include "madrag/rng.hpp"
#include "madrag/tensor.hpp"
#include "madrag/toytask.hpp"
#include "madrag/transformer.hpp"

namespace madrag::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, sd);
  return t;
}

// Random row-stochastic causal attention, H x L x L, optionally peaked on a
// few columns to mimic sinks.
inline Tensor random_causal_rows(std::size_t L, Rng& rng) {
  Tensor a({L, L});
  for (std::size_t i = 0; i < L; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j <= i; ++j) s += a(i, j) = rng.uniform() + 1e-3;
    for (std::size_t j = 0; j <= i; ++j) a(i, j) /= s;
  }
  return a;
}

inline ForwardTrace random_trace(std::size_t layers, std::size_t heads, std::size_t L, Rng& rng) {
  ForwardTrace tr;
  for (std::size_t l = 0; l < layers; ++l)
    for (std::size_t h = 0; h < heads; ++h) tr.records.push_back({l, h, random_causal_rows(L, rng)});
  return tr;
}

// Small toy model for behavioural tests. ctest runs each test in its own
// process, so the weights are cached on disk after the first training.
inline const ModelWeights& small_trained_model() {
  static const ModelWeights w = [] {
    const auto path = std::filesystem::temp_directory_path() / "madrag_test_model_v1.json";
    if (std::filesystem::exists(path)) return load_checkpoint(path);
    DatasetConfig d;
    d.seed = 77;
    d.n_samples = 1000;
    d.chunks_per_sample = 0;
    TrainConfig tc;
    tc.steps = 400;
    ModelWeights trained = train(tiny_preset(), generate_dataset(d), tc).weights;
    const auto tmp = path.string() + "." + std::to_string(::getpid());
    save_checkpoint(trained, tmp);
    std::filesystem::rename(tmp, path);
    return trained;
  }();
  return w;
}

// Straight-line forward pass written from the definitions, one scalar loop per
// operation. Returns logits; `attention` receives [layer][head] L x L rows.
inline Tensor reference_forward(const ModelWeights& w, const Tensor& x0,
                                std::vector<std::vector<Tensor>>* attention = nullptr) {
  const ModelConfig& c = w.config;
  const std::size_t L = x0.rows(), D = c.d_model, H = c.n_heads, dk = c.d_k;
  auto norm = [&](const Tensor& x, const Tensor& g, const Tensor& b) {
    Tensor y({L, D});
    for (std::size_t i = 0; i < L; ++i) {
      double mu = 0.0, var = 0.0;
      for (std::size_t j = 0; j < D; ++j) mu += x(i, j) / double(D);
      for (std::size_t j = 0; j < D; ++j) var += (x(i, j) - mu) * (x(i, j) - mu) / double(D);
      for (std::size_t j = 0; j < D; ++j)
        y(i, j) = (x(i, j) - mu) / std::sqrt(var + 1e-5) * g.data()[j] + b.data()[j];
    }
    return y;
  };
  auto mul = [](const Tensor& a, const Tensor& b) {
    Tensor y({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < b.cols(); ++j)
        for (std::size_t k = 0; k < a.cols(); ++k) y(i, j) += a(i, k) * b(k, j);
    return y;
  };
  Tensor x = x0;
  if (attention) attention->assign(c.n_layers, std::vector<Tensor>(H));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    const Tensor h1 = norm(x, lw.ln1_gamma, lw.ln1_beta);
    const Tensor q = mul(h1, lw.wq), k = mul(h1, lw.wk), v = mul(h1, lw.wv);
    Tensor cat({L, D});
    for (std::size_t h = 0; h < H; ++h) {
      Tensor a({L, L});
      for (std::size_t i = 0; i < L; ++i) {
        std::vector<double> s(i + 1);
        double mx = -1e300, z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          for (std::size_t t = 0; t < dk; ++t) s[j] += q(i, h * dk + t) * k(j, h * dk + t);
          s[j] /= std::sqrt(double(dk));
          mx = std::max(mx, s[j]);
        }
        for (std::size_t j = 0; j <= i; ++j) z += std::exp(s[j] - mx);
        for (std::size_t j = 0; j <= i; ++j) a(i, j) = std::exp(s[j] - mx) / z;
        for (std::size_t t = 0; t < dk; ++t)
          for (std::size_t j = 0; j <= i; ++j) cat(i, h * dk + t) += a(i, j) * v(j, h * dk + t);
      }
      if (attention) (*attention)[l][h] = a;
    }
    const Tensor o = mul(cat, lw.wo);
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += o.data()[i];
    Tensor f = mul(norm(x, lw.ln2_gamma, lw.ln2_beta), lw.w1);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < c.d_ff; ++j) {
        const double u = f(i, j) + lw.b1.data()[j];
        f(i, j) = 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / 3.14159265358979323846) *
                                             (u + 0.044715 * u * u * u)));
      }
    const Tensor g = mul(f, lw.w2);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < D; ++j) x(i, j) += g(i, j) + lw.b2.data()[j];
  }
  Tensor logits = mul(norm(x, w.lnf_gamma, w.lnf_beta), w.w_out);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < c.vocab_size; ++j) logits(i, j) += w.b_out.data()[j];
  return logits;
}

// Random weights with non-trivial norms and biases, so no parameter is inert.
inline ModelWeights perturbed_weights(const ModelConfig& cfg, std::uint64_t seed) {
  ModelWeights w = ModelWeights::random(cfg, seed);
  Rng rng(seed + 1);
  for_each_parameter(w, [&](const std::string& name, Tensor& t) {
    const bool gain = name.find("gamma") != std::string::npos;
    const bool bias = name.find("beta") != std::string::npos || name.find(".b") != std::string::npos ||
                      name == "b_out";
    if (gain) for (double& v : t.data()) v = 1.0 + rng.normal(0.0, 0.2);
    if (bias && !gain) for (double& v : t.data()) v = rng.normal(0.0, 0.1);
  });
  return w;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace madrag::test
