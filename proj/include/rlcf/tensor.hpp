#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rlcf {

/// Raised for contract violations: bad shapes, out-of-range indices,
/// degenerate inputs.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a computation produces a NaN or infinity.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Dense row-major matrix of doubles. Vectors are 1×n.
class Tensor2 {
 public:
  Tensor2() = default;
  Tensor2(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor2 row_vector(std::span<const double> values);
  static Tensor2 row_vector(std::initializer_list<double> values);
  static Tensor2 scalar(double value) { return Tensor2(1, 1, value); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool same_shape(const Tensor2& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& data() const { return data_; }

  double item() const;
  bool all_finite() const;
  std::string shape_string() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Plain (non-differentiable) linear algebra used by the tape and by
// inference-only paths.
Tensor2 matmul(const Tensor2& a, const Tensor2& b);
/// a · bᵀ
Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b);
/// aᵀ · b
Tensor2 matmul_tn(const Tensor2& a, const Tensor2& b);
Tensor2 transpose(const Tensor2& a);
Tensor2 select_rows(const Tensor2& a, std::span<const std::size_t> rows);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);

/// Max-subtracted softmax. Throws Error("empty logits") on empty input.
std::vector<double> softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);

/// Shannon entropy in nats with 0·ln 0 = 0.
double entropy(std::span<const double> probs);

/// Throws Error("degenerate embedding") when either input has zero norm.
double cosine(std::span<const double> u, std::span<const double> v);

std::vector<double> l2_normalize(std::span<const double> v);

std::size_t argmax(std::span<const double> v);

}  // namespace rlcf
