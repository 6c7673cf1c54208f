#include "fedmoe/matrix.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fedmoe {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                " does not match " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw std::invalid_argument("Matrix: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

void Matrix::fill(double v) {
  for (auto& x : data_) x = v;
}

bool Matrix::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(rows) + "x" +
                                std::to_string(cols) + ", got " + std::to_string(m.rows()) + "x" +
                                std::to_string(m.cols()));
  }
}

Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  }
  return out;
}

namespace {

// o[j] += c[0]·rows[0][j], then c[1]·rows[1][j], ... in that order for every
// j. Four terms per pass keep o[j] in a register; the rounding sequence is
// the same as one term at a time.
void chain_axpy(double* __restrict o, std::size_t n, const double* c, const double* const* rows,
                std::size_t m) {
  std::size_t t = 0;
  for (; t + 4 <= m; t += 4) {
    const double c0 = c[t], c1 = c[t + 1], c2 = c[t + 2], c3 = c[t + 3];
    const double* __restrict r0 = rows[t];
    const double* __restrict r1 = rows[t + 1];
    const double* __restrict r2 = rows[t + 2];
    const double* __restrict r3 = rows[t + 3];
    for (std::size_t j = 0; j < n; ++j) {
      double v = o[j];
      v += c0 * r0[j];
      v += c1 * r1[j];
      v += c2 * r2[j];
      v += c3 * r3[j];
      o[j] = v;
    }
  }
  for (; t < m; ++t) {
    const double ct = c[t];
    const double* __restrict r = rows[t];
    for (std::size_t j = 0; j < n; ++j) o[j] += ct * r[j];
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix out(a.rows(), b.cols());
  std::vector<const double*> rows(b.rows());
  for (std::size_t k = 0; k < b.rows(); ++k) rows[k] = b.row(k).data();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    chain_axpy(out.row(i).data(), b.cols(), a.row(i).data(), rows.data(), a.cols());
  }
  return out;
}

// Same per-entry summation order as dot(a.row(i), b.row(j)), laid out so the
// inner loop runs over independent outputs.
Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  return matmul(a, transpose(b));
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  Matrix out(a.cols(), b.cols());
  accumulate_tn(out, a, b);
  return out;
}

void accumulate_tn(Matrix& acc, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("accumulate_tn: row count mismatch");
  require_shape(acc, a.cols(), b.cols(), "accumulate_tn accumulator");
  // acc(i, :) takes the nonzero a(r, i)·b(r, :) terms in increasing r.
  std::vector<double> coef(a.rows());
  std::vector<const double*> rows(a.rows());
  for (std::size_t i = 0; i < a.cols(); ++i) {
    std::size_t m = 0;
    for (std::size_t r = 0; r < a.rows(); ++r) {
      const double ai = a(r, i);
      if (ai == 0.0) continue;
      coef[m] = ai;
      rows[m++] = b.row(r).data();
    }
    chain_axpy(acc.row(i).data(), b.cols(), coef.data(), rows.data(), m);
  }
}

void add_inplace(Matrix& acc, const Matrix& other, double scale) {
  if (!acc.same_shape(other)) throw std::invalid_argument("add_inplace: shape mismatch");
  auto a = acc.values();
  auto b = other.values();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += scale * b[i];
}

void add_row_inplace(Matrix& acc, std::span<const double> row) {
  if (row.size() != acc.cols()) throw std::invalid_argument("add_row_inplace: width mismatch");
  for (std::size_t r = 0; r < acc.rows(); ++r) {
    auto o = acc.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) o[j] += row[j];
  }
}

std::vector<double> column_sums(const Matrix& m) {
  std::vector<double> out(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += row[j];
  }
  return out;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), m.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= m.rows()) throw std::out_of_range("gather_rows: index out of range");
    auto src = m.row(indices[i]);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) dst[j] = src[j];
  }
  return out;
}

Matrix vstack(const Matrix& top, const Matrix& bottom) {
  if (top.empty()) return bottom;
  if (bottom.empty()) return top;
  if (top.cols() != bottom.cols()) throw std::invalid_argument("vstack: width mismatch");
  std::vector<double> data(top.values().begin(), top.values().end());
  data.insert(data.end(), bottom.values().begin(), bottom.values().end());
  return Matrix(top.rows() + bottom.rows(), top.cols(), std::move(data));
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

}  // namespace fedmoe
