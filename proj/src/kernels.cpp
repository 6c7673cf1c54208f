#include "fedmoe/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace fedmoe {

std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("softmax: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    total += out[i];
  }
  for (auto& x : out) x /= total;
  return out;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto p = softmax(m.row(r));
    std::copy(p.begin(), p.end(), out.row(r).begin());
  }
  return out;
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_sim: length mismatch");
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

HuberResult huber_loss(std::span<const double> pred, std::span<const double> target, double delta) {
  if (delta <= 0.0) throw std::invalid_argument("huber_loss: delta must be positive");
  if (pred.size() != target.size()) throw std::invalid_argument("huber_loss: length mismatch");
  if (pred.empty()) throw std::invalid_argument("huber_loss: empty input");
  const double n = static_cast<double>(pred.size());
  HuberResult res;
  res.grad.resize(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double r = pred[i] - target[i];
    const double a = std::abs(r);
    if (a <= delta) {
      res.loss += 0.5 * r * r;
      res.grad[i] = r / n;
    } else {
      res.loss += delta * (a - 0.5 * delta);
      res.grad[i] = (r > 0 ? delta : -delta) / n;
    }
  }
  res.loss /= n;
  return res;
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  if (k == 0) throw std::invalid_argument("top_k_indices: k must be at least 1");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t take = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  idx.resize(take);
  return idx;
}

std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

AdamState AdamState::for_shape(const Matrix& param) {
  return AdamState{Matrix(param.rows(), param.cols()), Matrix(param.rows(), param.cols()), 0};
}

void adam_update(Matrix& param, const Matrix& grad, AdamState& state, const AdamConfig& cfg) {
  if (!param.same_shape(grad) || !param.same_shape(state.first_moment) ||
      !param.same_shape(state.second_moment)) {
    throw std::invalid_argument("adam_update: shape mismatch");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  auto p = param.values();
  auto g = grad.values();
  auto m = state.first_moment.values();
  auto v = state.second_moment.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("finite_diff_grad: eps must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(probe);
    probe[i] = orig - eps;
    const double down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::domain_error("finite_diff_grad: objective is not finite near x");
    }
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

double gelu_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

double gelu(double x) { return x * gelu_cdf(x); }

double gelu_derivative(double x) { return gelu_cdf(x) + x * gelu_pdf(x); }

}  // namespace fedmoe
