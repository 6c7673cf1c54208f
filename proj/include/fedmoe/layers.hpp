#pragma once

#include <string>
#include <vector>

#include "fedmoe/matrix.hpp"
#include "fedmoe/params.hpp"
#include "fedmoe/random.hpp"

namespace fedmoe {

// Layers follow one convention: `forward` is const and fills an optional
// cache; `backward` consumes that cache, accumulates parameter gradients and
// returns the gradient with respect to the input.

/// y = x·Wᵀ + b, W is out×in.
class Linear {
 public:
  struct Cache {
    Matrix input;
  };

  Linear() = default;
  Linear(const std::string& role, int layer, std::size_t in, std::size_t out, Rng& rng,
         double init_scale = 1.0);

  Matrix forward(const Matrix& x, Cache* cache = nullptr) const;
  Matrix backward(const Cache& cache, const Matrix& dy);
  void collect(ParamRefs& out);

  std::size_t in_features() const { return weight.value.cols(); }
  std::size_t out_features() const { return weight.value.rows(); }
  std::size_t parameter_count() const { return weight.value.size() + bias.value.size(); }

  Parameter weight;
  Parameter bias;
};

class LayerNorm {
 public:
  struct Cache {
    Matrix normalized;
    std::vector<double> inv_std;
  };

  LayerNorm() = default;
  LayerNorm(const std::string& role, int layer, std::size_t dim);

  Matrix forward(const Matrix& x, Cache* cache = nullptr) const;
  Matrix backward(const Cache& cache, const Matrix& dy);
  void collect(ParamRefs& out);

  Parameter gain;
  Parameter bias;
  double eps = 1e-5;
};

/// Multi-head self-attention without masking.
class MultiHeadAttention {
 public:
  struct Cache {
    Linear::Cache q_in, k_in, v_in, out_in;
    Matrix q, k, v;
    std::vector<Matrix> probs;  // one tokens×tokens matrix per head
  };

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& role, int layer, std::size_t dim, std::size_t heads,
                     Rng& rng);

  Matrix forward(const Matrix& x, Cache* cache = nullptr) const;
  Matrix backward(const Cache& cache, const Matrix& dy);
  void collect(ParamRefs& out);

  std::size_t heads() const { return heads_; }

 private:
  std::size_t heads_ = 1;
  Linear q_proj_, k_proj_, v_proj_, out_proj_;
};

/// Two-layer GELU feed-forward network: D -> hidden -> D.
class ExpertFFN {
 public:
  struct Cache {
    Linear::Cache fc1_in;
    Matrix pre_activation;
    Matrix cdf;  // Φ(pre_activation)
    Linear::Cache fc2_in;
  };

  ExpertFFN() = default;
  ExpertFFN(const std::string& role, int layer, std::size_t dim, std::size_t hidden, Rng& rng);

  Matrix forward(const Matrix& x, Cache* cache = nullptr) const;
  Matrix backward(const Cache& cache, const Matrix& dy);
  void collect(ParamRefs& out);

  std::size_t parameter_count() const { return fc1.parameter_count() + fc2.parameter_count(); }

  Linear fc1;
  Linear fc2;
};

}  // namespace fedmoe
