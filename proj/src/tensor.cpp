#include "madrag/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

#include "madrag/error.hpp"

namespace madrag {

namespace {

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

bool is_masked_logit(double x) { return x <= kMaskedLogit / 2; }

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " must be rank 2, got " +
                         shape_to_string(t.shape()));
  }
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(product(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (product(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_to_string(shape_) + " holds " +
                         std::to_string(product(shape_)) + " values, got " +
                         std::to_string(data_.size()));
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n_rows = rows.size();
  const std::size_t n_cols = n_rows ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(n_rows * n_cols);
  for (const auto& r : rows) {
    if (r.size() != n_cols) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({n_rows, n_cols}, std::move(data));
}

void Tensor::throw_bad_axis(std::size_t axis) const {
  throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                       shape_to_string(shape_));
}

std::span<double> Tensor::row(std::size_t i) {
  return std::span<double>(data_).subspan(i * shape_[1], shape_[1]);
}

std::span<const double> Tensor::row(std::size_t i) const {
  return std::span<const double>(data_).subspan(i * shape_[1], shape_[1]);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value in ") + what);
  }
}

CausalMask::CausalMask(std::size_t length) : length_(length) {}

bool CausalMask::admissible(std::size_t i, std::size_t j) const {
  if (j > i) return false;
  return blocked_.empty() || !blocked_[i * length_ + j];
}

void CausalMask::block(std::size_t row, std::size_t col_begin, std::size_t col_end) {
  if (row >= length_ || col_begin > col_end || col_end > length_) {
    throw DimensionError("mask block out of range");
  }
  if (blocked_.empty()) blocked_.assign(length_ * length_, false);
  for (std::size_t j = col_begin; j < col_end; ++j) blocked_[row * length_ + j] = true;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul lhs");
  require_rank2(b, "matmul rhs");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul shape mismatch: " + shape_to_string(a.shape()) +
                         " x " + shape_to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = pb + p * n;
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  require_finite(c, "matmul");
  return c;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  Tensor t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Tensor softmax_rows(const Tensor& x) {
  require_rank2(x, "softmax_rows input");
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto out = y.row(i);
    double max = -std::numeric_limits<double>::infinity();
    for (double v : in) {
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
        throw NumericError("softmax_rows: non-finite logit in row " + std::to_string(i));
      }
      if (!is_masked_logit(v)) max = std::max(max, v);
    }
    if (max == -std::numeric_limits<double>::infinity()) {
      throw DegenerateRowError("softmax_rows: row " + std::to_string(i) +
                               " is entirely masked");
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      out[j] = is_masked_logit(in[j]) ? 0.0 : std::exp(in[j] - max);
      sum += out[j];
    }
    for (double& v : out) v /= sum;
  }
  return y;
}

AttentionResult masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const CausalMask& mask) {
  require_rank2(q, "attention q");
  require_rank2(k, "attention k");
  require_rank2(v, "attention v");
  const std::size_t L = q.rows();
  if (L == 0) throw DimensionError("attention over an empty sequence");
  if (k.rows() != L || v.rows() != L || q.cols() != k.cols() || mask.length() != L) {
    throw DimensionError("attention shape mismatch: q " + shape_to_string(q.shape()) +
                         ", k " + shape_to_string(k.shape()) + ", v " +
                         shape_to_string(v.shape()) + ", mask length " +
                         std::to_string(mask.length()));
  }
  const std::size_t dk = q.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Tensor logits({L, L});
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < L; ++j) {
      if (!mask.admissible(i, j)) {
        logits(i, j) = kMaskedLogit;
        continue;
      }
      double dot = 0.0;
      for (std::size_t d = 0; d < dk; ++d) dot += q(i, d) * k(j, d);
      logits(i, j) = dot * scale;
    }
  }
  AttentionResult r;
  r.weights = softmax_rows(logits);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = i + 1; j < L; ++j)
      if (r.weights(i, j) != 0.0) throw NumericError("causal weight did not underflow to 0");
  r.output = matmul(r.weights, v);
  return r;
}

}  // namespace madrag
