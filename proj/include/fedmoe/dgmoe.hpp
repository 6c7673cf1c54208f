#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedmoe/layers.hpp"
#include "fedmoe/matrix.hpp"
#include "fedmoe/params.hpp"
#include "fedmoe/random.hpp"

namespace fedmoe {

/// L×K activation counts: counts(l, k) is how many times expert k of layer l
/// processed a token since the last reset.
class SelectionMatrix {
 public:
  SelectionMatrix() = default;
  SelectionMatrix(std::size_t layers, std::size_t experts);

  std::size_t layers() const { return layers_; }
  std::size_t experts() const { return experts_; }

  std::uint64_t& at(std::size_t layer, std::size_t expert);
  std::uint64_t at(std::size_t layer, std::size_t expert) const;
  std::span<const std::uint64_t> row(std::size_t layer) const;

  void add(const SelectionMatrix& other);
  void reset();
  std::uint64_t total() const;

  bool operator==(const SelectionMatrix&) const = default;

 private:
  std::size_t layers_ = 0;
  std::size_t experts_ = 0;
  std::vector<std::uint64_t> counts_;
};

SelectionMatrix reset_counts(SelectionMatrix selection);

struct Density {
  std::vector<double> per_layer;
  double overall = 0.0;
};

/// Average number of activated experts per processed token.
Density density_per_token(const SelectionMatrix& selection, std::uint64_t tokens_processed);

/// Token-side gate: router W_t (K×D) plus, past the first layer, a residual
/// mixer W_g (K×K) applied to the previous layer's raw scores.
struct TokenGate {
  Parameter router;
  std::optional<Parameter> residual;
};

/// Expert-side gate: per-expert trainable thresholds W_e scaled by lambda.
struct ExpertGate {
  Parameter thresholds;  // 1×K
  double lambda = 0.5;
};

Matrix token_gate_scores(const Matrix& x, const TokenGate& gate, const Matrix* carry);
Matrix token_selection_probs(const Matrix& raw_scores);

/// sign(s_t - lambda·W_e) per expert, in {-1, 0, +1}.
std::vector<int> expert_gate_decision(std::span<const double> probs, const ExpertGate& gate);

/// Experts with a positive decision keep their token probability; all others
/// get 0. If nothing is accepted the argmax expert is used as a fallback.
std::vector<double> select_experts(std::span<const double> probs, std::span<const int> decision);

struct DGMoEConfig {
  std::size_t dim = 64;
  std::size_t experts = 8;
  std::size_t hidden = 256;
  bool residual_gate = false;
  double lambda = 0.5;
  double ste_band = 0.1;
  double threshold_init = 0.375;
  double router_init_scale = 1.0;
};

class DGMoELayer {
 public:
  struct ExpertRoute {
    std::vector<std::size_t> tokens;
    std::vector<double> weights;
    ExpertFFN::Cache ffn;
    Matrix outputs;
    // Rejected assignments inside the STE band: their expert outputs are
    // needed for the threshold gradient but never enter y.
    std::vector<std::size_t> shadow_tokens;
    Matrix shadow_outputs;
  };

  struct Cache {
    Matrix input;
    std::optional<Matrix> carry;
    Matrix probs;
    Matrix margins;
    std::vector<std::size_t> fallback;  // per token: fallback expert or npos
    std::vector<ExpertRoute> routes;
  };

  struct Output {
    Matrix tokens;
    Matrix scores;  // raw gate scores, the next layer's carry
  };

  struct InputGrads {
    Matrix tokens;
    std::optional<Matrix> carry;
  };

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  DGMoELayer() = default;
  /// `param_layer` tags parameters (-1 for non-federated); `count_row` is the
  /// SelectionMatrix row this layer increments.
  DGMoELayer(const std::string& role, int param_layer, std::size_t count_row,
             const DGMoEConfig& cfg, Rng& rng);

  /// Sparse forward: only accepted experts run. With `masked_dense` every
  /// expert runs on every token and rejected outputs are multiplied by 0,
  /// which must give the same bits.
  Output forward(const Matrix& x, const Matrix* carry, SelectionMatrix* counts, Cache* cache,
                 bool masked_dense = false) const;

  InputGrads backward(const Cache* cache, const Matrix& dy, const Matrix* dscores_out);

  void collect(ParamRefs& out);

  const DGMoEConfig& config() const { return cfg_; }
  std::size_t count_row() const { return count_row_; }
  std::size_t parameter_count() const;

  TokenGate token_gate;
  ExpertGate expert_gate;
  std::vector<ExpertFFN> experts;

 private:
  DGMoEConfig cfg_;
  std::size_t count_row_ = 0;
};

/// Hidden width of a single dense FFN whose parameter count matches a DGMoE
/// layer built from `cfg`.
std::size_t matched_dense_hidden(const DGMoEConfig& cfg);

}  // namespace fedmoe
