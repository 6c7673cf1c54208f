#include "fedmoe/layers.hpp"

#include <cmath>
#include <stdexcept>

#include "fedmoe/kernels.hpp"

namespace fedmoe {

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = rng.normal(0.0, stddev);
  return m;
}

}  // namespace

// ---------------------------------------------------------------- Linear

Linear::Linear(const std::string& role, int layer, std::size_t in, std::size_t out, Rng& rng,
               double init_scale)
    : weight(role + ".weight", layer,
             random_matrix(out, in, init_scale / std::sqrt(static_cast<double>(in)), rng)),
      bias(role + ".bias", layer, Matrix(1, out)) {}

Matrix Linear::forward(const Matrix& x, Cache* cache) const {
  if (x.cols() != in_features()) {
    throw std::invalid_argument(weight.role + ": input width " + std::to_string(x.cols()) +
                                " != " + std::to_string(in_features()));
  }
  Matrix y = matmul_nt(x, weight.value);
  add_row_inplace(y, bias.value.row(0));
  if (cache) cache->input = x;
  return y;
}

Matrix Linear::backward(const Cache& cache, const Matrix& dy) {
  accumulate_tn(weight.grad, dy, cache.input);
  auto db = column_sums(dy);
  for (std::size_t j = 0; j < db.size(); ++j) bias.grad[j] += db[j];
  return matmul(dy, weight.value);
}

void Linear::collect(ParamRefs& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

// ---------------------------------------------------------------- LayerNorm

LayerNorm::LayerNorm(const std::string& role, int layer, std::size_t dim)
    : gain(role + ".gain", layer, Matrix(1, dim, 1.0)), bias(role + ".bias", layer, Matrix(1, dim)) {}

Matrix LayerNorm::forward(const Matrix& x, Cache* cache) const {
  const std::size_t d = x.cols();
  if (d != gain.value.cols()) throw std::invalid_argument(gain.role + ": width mismatch");
  Matrix y(x.rows(), d);
  Matrix normalized(x.rows(), d);
  std::vector<double> inv_std(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      normalized(r, j) = (row[j] - mean) * inv;
      y(r, j) = gain.value[j] * normalized(r, j) + bias.value[j];
    }
  }
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Matrix LayerNorm::backward(const Cache& cache, const Matrix& dy) {
  const std::size_t d = dy.cols();
  const double n = static_cast<double>(d);
  Matrix dx(dy.rows(), d);
  std::vector<double> dxhat(d);
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    double sum_dxhat = 0.0;
    double sum_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = cache.normalized(r, j);
      gain.grad[j] += dy(r, j) * xh;
      bias.grad[j] += dy(r, j);
      dxhat[j] = dy(r, j) * gain.value[j];
      sum_dxhat += dxhat[j];
      sum_dxhat_xhat += dxhat[j] * xh;
    }
    const double inv = cache.inv_std[r];
    for (std::size_t j = 0; j < d; ++j) {
      dx(r, j) = inv / n * (n * dxhat[j] - sum_dxhat - cache.normalized(r, j) * sum_dxhat_xhat);
    }
  }
  return dx;
}

void LayerNorm::collect(ParamRefs& out) {
  out.push_back(&gain);
  out.push_back(&bias);
}

// ---------------------------------------------------------------- attention

MultiHeadAttention::MultiHeadAttention(const std::string& role, int layer, std::size_t dim,
                                       std::size_t heads, Rng& rng)
    : heads_(heads),
      q_proj_(role + ".q", layer, dim, dim, rng),
      k_proj_(role + ".k", layer, dim, dim, rng),
      v_proj_(role + ".v", layer, dim, dim, rng),
      out_proj_(role + ".out", layer, dim, dim, rng) {
  if (heads == 0 || dim % heads != 0) {
    throw std::invalid_argument(role + ": model width must be divisible by head count");
  }
}

Matrix MultiHeadAttention::forward(const Matrix& x, Cache* cache) const {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  const std::size_t dh = d / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix q = q_proj_.forward(x, cache ? &cache->q_in : nullptr);
  Matrix k = k_proj_.forward(x, cache ? &cache->k_in : nullptr);
  Matrix v = v_proj_.forward(x, cache ? &cache->v_in : nullptr);

  Matrix mixed(n, d);
  if (cache) cache->probs.assign(heads_, Matrix());
  for (std::size_t h = 0; h < heads_; ++h) {
    const std::size_t off = h * dh;
    Matrix probs(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q(i, off + c) * k(j, off + c);
        probs(i, j) = s * scale;
      }
    }
    probs = softmax_rows(probs);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double p = probs(i, j);
        for (std::size_t c = 0; c < dh; ++c) mixed(i, off + c) += p * v(j, off + c);
      }
    }
    if (cache) cache->probs[h] = std::move(probs);
  }
  if (cache) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
  }
  return out_proj_.forward(mixed, cache ? &cache->out_in : nullptr);
}

Matrix MultiHeadAttention::backward(const Cache& cache, const Matrix& dy) {
  const Matrix dmixed = out_proj_.backward(cache.out_in, dy);
  const std::size_t n = dy.rows();
  const std::size_t d = dy.cols();
  const std::size_t dh = d / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix dq(n, d), dk(n, d), dv(n, d);
  Matrix dprobs(n, n);
  for (std::size_t h = 0; h < heads_; ++h) {
    const std::size_t off = h * dh;
    const Matrix& probs = cache.probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) {
          s += dmixed(i, off + c) * cache.v(j, off + c);
          dv(j, off + c) += probs(i, j) * dmixed(i, off + c);
        }
        dprobs(i, j) = s;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      double inner = 0.0;
      for (std::size_t j = 0; j < n; ++j) inner += dprobs(i, j) * probs(i, j);
      for (std::size_t j = 0; j < n; ++j) {
        const double ds = probs(i, j) * (dprobs(i, j) - inner) * scale;
        if (ds == 0.0) continue;
        for (std::size_t c = 0; c < dh; ++c) {
          dq(i, off + c) += ds * cache.k(j, off + c);
          dk(j, off + c) += ds * cache.q(i, off + c);
        }
      }
    }
  }
  Matrix dx = q_proj_.backward(cache.q_in, dq);
  add_inplace(dx, k_proj_.backward(cache.k_in, dk));
  add_inplace(dx, v_proj_.backward(cache.v_in, dv));
  return dx;
}

void MultiHeadAttention::collect(ParamRefs& out) {
  q_proj_.collect(out);
  k_proj_.collect(out);
  v_proj_.collect(out);
  out_proj_.collect(out);
}

// ---------------------------------------------------------------- expert FFN

ExpertFFN::ExpertFFN(const std::string& role, int layer, std::size_t dim, std::size_t hidden,
                     Rng& rng)
    : fc1(role + ".fc1", layer, dim, hidden, rng), fc2(role + ".fc2", layer, hidden, dim, rng) {}

Matrix ExpertFFN::forward(const Matrix& x, Cache* cache) const {
  Matrix pre = fc1.forward(x, cache ? &cache->fc1_in : nullptr);
  // gelu(x) = x·Φ(x); Φ is kept for the backward pass.
  Matrix act(pre.rows(), pre.cols());
  Matrix cdf(pre.rows(), pre.cols());
  for (std::size_t i = 0; i < pre.size(); ++i) {
    cdf[i] = gelu_cdf(pre[i]);
    act[i] = pre[i] * cdf[i];
  }
  if (cache) {
    cache->pre_activation = std::move(pre);
    cache->cdf = std::move(cdf);
  }
  return fc2.forward(act, cache ? &cache->fc2_in : nullptr);
}

Matrix ExpertFFN::backward(const Cache& cache, const Matrix& dy) {
  Matrix dact = fc2.backward(cache.fc2_in, dy);
  for (std::size_t i = 0; i < dact.size(); ++i) {
    const double x = cache.pre_activation[i];
    dact[i] *= cache.cdf[i] + x * gelu_pdf(x);
  }
  return fc1.backward(cache.fc1_in, dact);
}

void ExpertFFN::collect(ParamRefs& out) {
  fc1.collect(out);
  fc2.collect(out);
}

}  // namespace fedmoe
