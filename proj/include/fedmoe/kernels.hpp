#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "fedmoe/matrix.hpp"

namespace fedmoe {

/// Numerically stable softmax (max-subtracted). Throws on empty input.
std::vector<double> softmax(std::span<const double> v);

/// Row-wise softmax of a matrix.
Matrix softmax_rows(const Matrix& m);

/// Cosine similarity; 0 when either vector has zero norm.
double cosine_sim(std::span<const double> a, std::span<const double> b);

struct HuberResult {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d pred
};

/// Elementwise Huber loss averaged over all elements.
HuberResult huber_loss(std::span<const double> pred, std::span<const double> target,
                       double delta = 1.0);

/// Indices of the k largest scores in descending order, lower index first on ties.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

/// Index of the largest entry, lowest index on ties.
std::size_t argmax(std::span<const double> v);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Matrix first_moment;
  Matrix second_moment;
  long step = 0;

  static AdamState for_shape(const Matrix& param);
};

/// One bias-corrected Adam step, in place on `param` and `state`.
void adam_update(Matrix& param, const Matrix& grad, AdamState& state, const AdamConfig& cfg);

/// Central finite-difference gradient of `f` at `x`.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double eps = 1e-5);

// Standard normal cdf Φ and density φ; gelu(x) = x·Φ(x).
double gelu_cdf(double x);
double gelu_pdf(double x);
double gelu(double x);
double gelu_derivative(double x);

}  // namespace fedmoe
