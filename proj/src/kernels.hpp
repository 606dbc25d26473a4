#pragma once

// Row-wise kernels shared by the forward and backward passes.

#include <cmath>
#include <numbers>
#include <vector>

#include "madrag/tensor.hpp"

namespace madrag::detail {

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormOut {
  Tensor out;
  Tensor xhat;
  std::vector<double> rstd;
};

inline LayerNormOut layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const std::size_t L = x.rows(), D = x.cols();
  LayerNormOut r{Tensor({L, D}), Tensor({L, D}), std::vector<double>(L)};
  for (std::size_t i = 0; i < L; ++i) {
    auto row = x.row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(D);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(D);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    r.rstd[i] = rstd;
    for (std::size_t j = 0; j < D; ++j) {
      const double xh = (row[j] - mean) * rstd;
      r.xhat(i, j) = xh;
      r.out(i, j) = xh * gamma.data()[j] + beta.data()[j];
    }
  }
  return r;
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

// Copies columns [col, col + width) of `x` into a new L x width tensor.
inline Tensor slice_cols(const Tensor& x, std::size_t col, std::size_t width) {
  Tensor r({x.rows(), width});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < width; ++j) r(i, j) = x(i, col + j);
  return r;
}

inline void add_bias_rows(Tensor& x, const Tensor& bias) {
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) x(i, j) += bias.data()[j];
}

}  // namespace madrag::detail
