#include "fedmoe/dgmoe.hpp"

#include <cmath>
#include <stdexcept>

#include "fedmoe/kernels.hpp"

namespace fedmoe {

// ---------------------------------------------------------------- counts

SelectionMatrix::SelectionMatrix(std::size_t layers, std::size_t experts)
    : layers_(layers), experts_(experts), counts_(layers * experts, 0) {}

std::uint64_t& SelectionMatrix::at(std::size_t layer, std::size_t expert) {
  if (layer >= layers_ || expert >= experts_) throw std::out_of_range("SelectionMatrix::at");
  return counts_[layer * experts_ + expert];
}

std::uint64_t SelectionMatrix::at(std::size_t layer, std::size_t expert) const {
  if (layer >= layers_ || expert >= experts_) throw std::out_of_range("SelectionMatrix::at");
  return counts_[layer * experts_ + expert];
}

std::span<const std::uint64_t> SelectionMatrix::row(std::size_t layer) const {
  if (layer >= layers_) throw std::out_of_range("SelectionMatrix::row: layer out of range");
  return {counts_.data() + layer * experts_, experts_};
}

void SelectionMatrix::add(const SelectionMatrix& other) {
  if (other.layers_ != layers_ || other.experts_ != experts_) {
    throw std::invalid_argument("SelectionMatrix::add: shape mismatch");
  }
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

void SelectionMatrix::reset() {
  for (auto& c : counts_) c = 0;
}

std::uint64_t SelectionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

SelectionMatrix reset_counts(SelectionMatrix selection) {
  selection.reset();
  return selection;
}

Density density_per_token(const SelectionMatrix& selection, std::uint64_t tokens_processed) {
  if (tokens_processed == 0) throw std::invalid_argument("density_per_token: no tokens processed");
  Density d;
  d.per_layer.reserve(selection.layers());
  double sum = 0.0;
  for (std::size_t l = 0; l < selection.layers(); ++l) {
    std::uint64_t row_total = 0;
    for (auto c : selection.row(l)) row_total += c;
    const double v = static_cast<double>(row_total) / static_cast<double>(tokens_processed);
    d.per_layer.push_back(v);
    sum += v;
  }
  d.overall = selection.layers() == 0 ? 0.0 : sum / static_cast<double>(selection.layers());
  return d;
}

// ---------------------------------------------------------------- gates

Matrix token_gate_scores(const Matrix& x, const TokenGate& gate, const Matrix* carry) {
  const Matrix& router = gate.router.value;
  if (x.cols() != router.cols()) throw std::invalid_argument("token_gate_scores: token width mismatch");
  Matrix scores = matmul_nt(x, router);
  if (carry && gate.residual) {
    require_shape(*carry, x.rows(), router.rows(), "token_gate_scores carry");
    add_inplace(scores, matmul_nt(*carry, gate.residual->value));
  }
  return scores;
}

Matrix token_selection_probs(const Matrix& raw_scores) { return softmax_rows(raw_scores); }

std::vector<int> expert_gate_decision(std::span<const double> probs, const ExpertGate& gate) {
  const auto thresholds = gate.thresholds.value.values();
  if (probs.size() != thresholds.size()) {
    throw std::invalid_argument("expert_gate_decision: row length mismatch");
  }
  std::vector<int> out(probs.size());
  for (std::size_t k = 0; k < probs.size(); ++k) {
    const double u = probs[k] - gate.lambda * thresholds[k];
    out[k] = (u > 0.0) - (u < 0.0);
  }
  return out;
}

std::vector<double> select_experts(std::span<const double> probs, std::span<const int> decision) {
  if (probs.size() != decision.size()) throw std::invalid_argument("select_experts: length mismatch");
  std::vector<double> g(probs.size(), 0.0);
  bool any = false;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    if (decision[k] > 0) {
      g[k] = probs[k];
      any = true;
    }
  }
  if (!any) {
    const std::size_t best = argmax(probs);
    g[best] = probs[best];
  }
  return g;
}

// ---------------------------------------------------------------- layer

DGMoELayer::DGMoELayer(const std::string& role, int param_layer, std::size_t count_row,
                       const DGMoEConfig& cfg, Rng& rng)
    : cfg_(cfg), count_row_(count_row) {
  if (cfg.experts == 0) throw std::invalid_argument(role + ": need at least one expert");
  if (cfg.lambda <= 0.0) throw std::invalid_argument(role + ": lambda must be positive");
  Matrix router(cfg.experts, cfg.dim);
  const double stddev = cfg.router_init_scale / std::sqrt(static_cast<double>(cfg.dim));
  for (auto& v : router.values()) v = rng.normal(0.0, stddev);
  token_gate.router = Parameter(role + ".token_gate", param_layer, std::move(router));
  if (cfg.residual_gate) {
    // Starts as identity so inherited scores pass through unchanged.
    Matrix mix(cfg.experts, cfg.experts);
    for (std::size_t k = 0; k < cfg.experts; ++k) mix(k, k) = 1.0;
    token_gate.residual = Parameter(role + ".residual_gate", param_layer, std::move(mix));
  }
  expert_gate.thresholds =
      Parameter(role + ".expert_gate", param_layer, Matrix(1, cfg.experts, cfg.threshold_init));
  expert_gate.lambda = cfg.lambda;
  experts.reserve(cfg.experts);
  for (std::size_t k = 0; k < cfg.experts; ++k) {
    experts.emplace_back(role + ".expert" + std::to_string(k), param_layer, cfg.dim, cfg.hidden, rng);
  }
}

DGMoELayer::Output DGMoELayer::forward(const Matrix& x, const Matrix* carry, SelectionMatrix* counts,
                                       Cache* cache, bool masked_dense) const {
  const std::size_t n = x.rows();
  const std::size_t kk = cfg_.experts;
  if (x.cols() != cfg_.dim) throw std::invalid_argument("DGMoELayer: token width mismatch");
  if (counts && (count_row_ >= counts->layers() || counts->experts() != kk)) {
    throw std::invalid_argument("DGMoELayer: selection matrix has no row for this layer");
  }

  Output out;
  out.scores = token_gate_scores(x, token_gate, carry);
  const Matrix probs = token_selection_probs(out.scores);
  const auto thresholds = expert_gate.thresholds.value.values();

  Matrix weights(n, kk);
  Matrix margins(n, kk);
  std::vector<std::size_t> fallback(n, npos);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = probs.row(i);
    for (std::size_t k = 0; k < kk; ++k) margins(i, k) = row[k] - expert_gate.lambda * thresholds[k];
    const auto decision = expert_gate_decision(row, expert_gate);
    const auto g = select_experts(row, decision);
    bool any = false;
    for (std::size_t k = 0; k < kk; ++k) {
      weights(i, k) = g[k];
      any = any || decision[k] > 0;
    }
    if (!any) fallback[i] = argmax(row);
  }

  out.tokens = Matrix(n, cfg_.dim);
  if (cache) cache->routes.assign(kk, ExpertRoute{});
  for (std::size_t k = 0; k < kk; ++k) {
    std::vector<std::size_t> routed;
    std::vector<std::size_t> shadow;
    for (std::size_t i = 0; i < n; ++i) {
      if (masked_dense || weights(i, k) > 0.0) {
        routed.push_back(i);
      } else if (cache && fallback[i] == npos && std::abs(margins(i, k)) <= cfg_.ste_band) {
        shadow.push_back(i);
      }
    }
    if (counts) {
      for (std::size_t i : routed) {
        if (weights(i, k) > 0.0) ++counts->at(count_row_, k);
      }
    }
    ExpertRoute* route = cache ? &cache->routes[k] : nullptr;
    if (!routed.empty()) {
      const Matrix in = gather_rows(x, routed);
      Matrix y = experts[k].forward(in, route ? &route->ffn : nullptr);
      for (std::size_t r = 0; r < routed.size(); ++r) {
        const double w = weights(routed[r], k);
        auto dst = out.tokens.row(routed[r]);
        auto src = y.row(r);
        for (std::size_t j = 0; j < cfg_.dim; ++j) dst[j] += w * src[j];
      }
      if (route) {
        route->weights.reserve(routed.size());
        for (std::size_t i : routed) route->weights.push_back(weights(i, k));
        route->outputs = std::move(y);
        route->tokens = std::move(routed);
      }
    }
    if (route && !shadow.empty()) {
      route->shadow_outputs = experts[k].forward(gather_rows(x, shadow));
      route->shadow_tokens = std::move(shadow);
    }
  }

  if (cache) {
    cache->input = x;
    cache->carry = (carry && token_gate.residual) ? std::optional<Matrix>(*carry) : std::nullopt;
    cache->probs = probs;
    cache->margins = std::move(margins);
    cache->fallback = std::move(fallback);
  }
  return out;
}

DGMoELayer::InputGrads DGMoELayer::backward(const Cache* cache, const Matrix& dy,
                                            const Matrix* dscores_out) {
  if (!cache || cache->routes.size() != cfg_.experts) {
    throw std::logic_error("DGMoELayer::backward: no forward cache for this batch");
  }
  const std::size_t n = cache->input.rows();
  const std::size_t kk = cfg_.experts;
  require_shape(dy, n, cfg_.dim, "DGMoELayer::backward upstream gradient");
  const double lambda = expert_gate.lambda;

  InputGrads grads;
  grads.tokens = Matrix(n, cfg_.dim);
  Matrix dprobs(n, kk);

  auto straight_through = [&](std::size_t i, std::size_t k, double dmask) {
    // sign() is treated as identity inside the band: u = s_t - lambda·W_e.
    dprobs(i, k) += dmask;
    expert_gate.thresholds.grad[k] -= lambda * dmask;
  };

  for (std::size_t k = 0; k < kk; ++k) {
    const ExpertRoute& route = cache->routes[k];
    if (!route.tokens.empty()) {
      Matrix dout(route.tokens.size(), cfg_.dim);
      for (std::size_t r = 0; r < route.tokens.size(); ++r) {
        const std::size_t i = route.tokens[r];
        const double w = route.weights[r];
        const auto up = dy.row(i);
        for (std::size_t j = 0; j < cfg_.dim; ++j) dout(r, j) = w * up[j];
        const double dg = dot(up, route.outputs.row(r));
        if (w > 0.0) dprobs(i, k) += dg;
        if (cache->fallback[i] == npos && std::abs(cache->margins(i, k)) <= cfg_.ste_band) {
          straight_through(i, k, cache->probs(i, k) * dg);
        }
      }
      const Matrix dx = experts[k].backward(route.ffn, dout);
      for (std::size_t r = 0; r < route.tokens.size(); ++r) {
        auto dst = grads.tokens.row(route.tokens[r]);
        auto src = dx.row(r);
        for (std::size_t j = 0; j < cfg_.dim; ++j) dst[j] += src[j];
      }
    }
    for (std::size_t r = 0; r < route.shadow_tokens.size(); ++r) {
      const std::size_t i = route.shadow_tokens[r];
      const double dg = dot(dy.row(i), route.shadow_outputs.row(r));
      straight_through(i, k, cache->probs(i, k) * dg);
    }
  }

  Matrix dscores(n, kk);
  for (std::size_t i = 0; i < n; ++i) {
    double inner = 0.0;
    for (std::size_t k = 0; k < kk; ++k) inner += dprobs(i, k) * cache->probs(i, k);
    for (std::size_t k = 0; k < kk; ++k) {
      dscores(i, k) = cache->probs(i, k) * (dprobs(i, k) - inner);
    }
  }
  if (dscores_out) add_inplace(dscores, *dscores_out);

  accumulate_tn(token_gate.router.grad, dscores, cache->input);
  add_inplace(grads.tokens, matmul(dscores, token_gate.router.value));
  if (cache->carry) {
    accumulate_tn(token_gate.residual->grad, dscores, *cache->carry);
    grads.carry = matmul(dscores, token_gate.residual->value);
  }
  return grads;
}

void DGMoELayer::collect(ParamRefs& out) {
  out.push_back(&token_gate.router);
  if (token_gate.residual) out.push_back(&*token_gate.residual);
  out.push_back(&expert_gate.thresholds);
  for (auto& e : experts) e.collect(out);
}

std::size_t DGMoELayer::parameter_count() const {
  std::size_t total = token_gate.router.value.size() + expert_gate.thresholds.value.size();
  if (token_gate.residual) total += token_gate.residual->value.size();
  for (const auto& e : experts) total += e.parameter_count();
  return total;
}

std::size_t matched_dense_hidden(const DGMoEConfig& cfg) {
  const std::size_t d = cfg.dim;
  const std::size_t k = cfg.experts;
  const std::size_t per_expert = 2 * cfg.hidden * d + cfg.hidden + d;
  std::size_t total = k * per_expert + k * d + k;
  if (cfg.residual_gate) total += k * k;
  // dense FFN with hidden h has 2·h·d + h + d parameters
  const double h = static_cast<double>(total - d) / static_cast<double>(2 * d + 1);
  return static_cast<std::size_t>(std::llround(h));
}

}  // namespace fedmoe
