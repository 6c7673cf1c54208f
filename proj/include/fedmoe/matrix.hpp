#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace fedmoe {

/// Row-major dense matrix of doubles. Vectors are 1×n matrices or plain
/// std::vector<double>, whichever reads better at the call site.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  void fill(double v);
  bool same_shape(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }
  bool all_finite() const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// a·b
Matrix transpose(const Matrix& m);
Matrix matmul(const Matrix& a, const Matrix& b);
// a·bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// aᵀ·b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// acc += aᵀ·b, the usual weight-gradient accumulation
void accumulate_tn(Matrix& acc, const Matrix& a, const Matrix& b);

void add_inplace(Matrix& acc, const Matrix& other, double scale = 1.0);
void add_row_inplace(Matrix& acc, std::span<const double> row);
std::vector<double> column_sums(const Matrix& m);

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> indices);
Matrix vstack(const Matrix& top, const Matrix& bottom);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);

void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, const char* what);

}  // namespace fedmoe
