#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace madrag {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

// Dense row-major array of doubles. No broadcasting anywhere: every operation
// checks shapes explicitly.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  // Rank-2 convenience: Tensor::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw_bad_axis(axis);
    return shape_[axis];
  }
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Row i of a rank-2 tensor.
  std::span<double> row(std::size_t i);
  std::span<const double> row(std::size_t i) const;

  void fill(double value);
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  [[noreturn]] void throw_bad_axis(std::size_t axis) const;

  Shape shape_;
  std::vector<double> data_;
};

// Large finite stand-in for negative infinity. exp(kMaskedLogit - max)
// underflows to exactly 0.
inline constexpr double kMaskedLogit = -1e30;

// Additive attention mask. Constructed causal: entry (i, j) is 0 for j <= i and
// kMaskedLogit for j > i. `block` can additionally forbid admissible entries
// (used to build constrained fixtures); it can never re-open a future key.
class CausalMask {
 public:
  explicit CausalMask(std::size_t length);

  std::size_t length() const noexcept { return length_; }
  bool admissible(std::size_t i, std::size_t j) const;
  double value(std::size_t i, std::size_t j) const {
    return admissible(i, j) ? 0.0 : kMaskedLogit;
  }
  // Forbid keys [col_begin, col_end) for query row `row`.
  void block(std::size_t row, std::size_t col_begin, std::size_t col_end);
  bool is_pure_causal() const noexcept { return blocked_.empty(); }

 private:
  std::size_t length_;
  std::vector<bool> blocked_;  // L*L, empty while pure causal
};

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Row-wise softmax with max subtraction. Entries <= kMaskedLogit / 2 (or -inf)
// are treated as masked and get exactly zero weight. A row with no unmasked
// entry throws DegenerateRowError.
Tensor softmax_rows(const Tensor& x);

struct AttentionResult {
  Tensor weights;  // L x L
  Tensor output;   // L x d_v
};

// softmax(q k^T / sqrt(d_k) + mask) v
AttentionResult masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const CausalMask& mask);

// Throws NumericError naming `what` if any entry is NaN or infinite.
void require_finite(const Tensor& t, const char* what);

}  // namespace madrag
