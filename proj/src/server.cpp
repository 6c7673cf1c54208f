#include "fedmoe/server.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "fedmoe/kernels.hpp"

namespace fedmoe {

std::string to_string(AggregationMode mode) {
  return mode == AggregationMode::eda ? "eda" : "fedavg";
}

AggregationMode parse_aggregation_mode(const std::string& text) {
  if (text == "eda") return AggregationMode::eda;
  if (text == "fedavg") return AggregationMode::fedavg;
  throw std::invalid_argument("unknown aggregation mode: " + text);
}

std::vector<double> selection_vector(const SelectionMatrix& selection, std::size_t layer) {
  if (layer >= selection.layers()) throw std::out_of_range("selection_vector: layer out of range");
  const auto row = selection.row(layer);
  return std::vector<double>(row.begin(), row.end());
}

Matrix pairwise_similarity(std::span<const std::vector<double>> vectors) {
  if (vectors.empty()) throw std::invalid_argument("pairwise_similarity: no clients");
  const std::size_t n = vectors.size();
  for (const auto& v : vectors) {
    if (v.size() != vectors[0].size()) {
      throw std::invalid_argument("pairwise_similarity: selection vectors differ in length");
    }
  }
  Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    s(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      // counts are non-negative, so only rounding could push this below 0
      const double c = std::clamp(cosine_sim(vectors[i], vectors[j]), 0.0, 1.0);
      s(i, j) = c;
      s(j, i) = c;
    }
  }
  return s;
}

std::vector<double> aggregation_weights(const Matrix& similarity) {
  const std::size_t n = similarity.rows();
  if (n == 0 || similarity.cols() != n) {
    throw std::invalid_argument("aggregation_weights: similarity must be square and non-empty");
  }
  if (!similarity.all_finite()) throw std::invalid_argument("aggregation_weights: non-finite entry");
  std::vector<double> rows(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) rows[i] += similarity(i, j);
    total += rows[i];
  }
  if (!(total > 0.0)) return std::vector<double>(n, 1.0 / static_cast<double>(n));
  for (auto& r : rows) r /= total;
  return rows;
}

TensorList aggregate_trunk(std::span<const TensorList> trunks,
                           std::span<const std::vector<double>> weights) {
  if (trunks.empty()) throw std::invalid_argument("aggregate_trunk: no submissions");
  const TensorList& first = trunks[0];
  for (const auto& t : trunks) {
    if (t.size() != first.size()) throw std::invalid_argument("aggregate_trunk: tensor count mismatch");
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i].role != first[i].role || t[i].layer != first[i].layer ||
          !t[i].value.same_shape(first[i].value)) {
        throw std::invalid_argument("aggregate_trunk: shape mismatch at " + first[i].role);
      }
    }
  }
  for (const auto& w : weights) {
    if (w.size() != trunks.size()) throw std::invalid_argument("aggregate_trunk: weight count mismatch");
  }

  TensorList out = first;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int layer = out[i].layer;
    if (layer < 0 || static_cast<std::size_t>(layer) >= weights.size()) {
      throw std::invalid_argument("aggregate_trunk: no weights for layer of " + out[i].role);
    }
    const auto& w = weights[static_cast<std::size_t>(layer)];
    auto dst = out[i].value.values();
    for (std::size_t e = 0; e < dst.size(); ++e) {
      double acc = 0.0;
      double lo = trunks[0][i].value[e];
      double hi = lo;
      for (std::size_t c = 0; c < trunks.size(); ++c) {
        const double v = trunks[c][i].value[e];
        acc += w[c] * v;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      dst[e] = std::clamp(acc, lo, hi);
    }
  }
  return out;
}

namespace {

void sort_by_id(std::vector<RoundSubmission>& subs) {
  std::sort(subs.begin(), subs.end(),
            [](const RoundSubmission& a, const RoundSubmission& b) { return a.client_id < b.client_id; });
  for (std::size_t i = 1; i < subs.size(); ++i) {
    if (subs[i].client_id == subs[i - 1].client_id) {
      throw std::invalid_argument("aggregate: duplicate client id");
    }
  }
}

std::vector<TensorList> trunks_of(const std::vector<RoundSubmission>& subs) {
  std::vector<TensorList> out;
  out.reserve(subs.size());
  for (const auto& s : subs) out.push_back(s.trunk);
  return out;
}

std::size_t trunk_layers(const TensorList& trunk) {
  int top = -1;
  for (const auto& t : trunk) top = std::max(top, t.layer);
  return static_cast<std::size_t>(top + 1);
}

}  // namespace

TensorList fedavg_aggregate(std::span<const RoundSubmission> submissions) {
  if (submissions.empty()) throw std::invalid_argument("fedavg_aggregate: no submissions");
  std::vector<RoundSubmission> subs(submissions.begin(), submissions.end());
  sort_by_id(subs);
  const std::vector<double> uniform(subs.size(), 1.0 / static_cast<double>(subs.size()));
  const std::vector<std::vector<double>> weights(trunk_layers(subs[0].trunk), uniform);
  return aggregate_trunk(trunks_of(subs), weights);
}

Aggregation aggregate(std::vector<RoundSubmission> submissions, AggregationMode mode) {
  if (submissions.empty()) throw std::invalid_argument("aggregate: no submissions");
  sort_by_id(submissions);
  const std::size_t layers = submissions[0].selection.layers();
  for (const auto& s : submissions) {
    if (s.selection.layers() != layers || s.selection.experts() != submissions[0].selection.experts()) {
      throw std::invalid_argument("aggregate: selection matrices differ in shape");
    }
  }
  if (trunk_layers(submissions[0].trunk) != layers) {
    throw std::invalid_argument("aggregate: selection rows do not match trunk layers");
  }

  Aggregation out;
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<std::vector<double>> vectors;
    for (const auto& s : submissions) vectors.push_back(selection_vector(s.selection, l));
    out.similarity.push_back(pairwise_similarity(vectors));
    if (mode == AggregationMode::eda) {
      out.weights.push_back(aggregation_weights(out.similarity.back()));
    } else {
      out.weights.emplace_back(submissions.size(), 1.0 / static_cast<double>(submissions.size()));
    }
  }
  out.trunk = mode == AggregationMode::eda ? aggregate_trunk(trunks_of(submissions), out.weights)
                                           : fedavg_aggregate(submissions);
  return out;
}

RoundMetrics run_round(std::vector<FederatedClient>& clients, TensorList& global_trunk,
                       std::size_t round, const RoundOptions& options) {
  if (clients.empty()) throw std::invalid_argument("run_round: no clients");
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = clients.size();
  std::vector<LocalTrainResult> results(n);
  std::vector<std::exception_ptr> errors(n);
  auto work = [&](std::size_t i) {
    try {
      results[i] = clients[i].train_round(global_trunk, round);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (options.parallel && n > 1) {
    std::vector<std::thread> threads;
    threads.reserve(n);
    for (std::size_t i = 0; i < n; ++i) threads.emplace_back(work, i);
    for (auto& t : threads) t.join();
  } else {
    for (std::size_t i = 0; i < n; ++i) work(i);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      throw std::runtime_error("round " + std::to_string(round) + ", client " +
                               std::to_string(clients[i].id) + ": " + e.what());
    }
  }

  std::vector<RoundSubmission> subs;
  subs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    subs.push_back({clients[i].id, results[i].trunk, results[i].selection});
  }
  Aggregation agg = aggregate(std::move(subs), options.mode);
  global_trunk = std::move(agg.trunk);
  for (auto& c : clients) apply_global_trunk(c.model, global_trunk);

  RoundMetrics m;
  m.round = round;
  m.mode = options.mode;
  m.weights = std::move(agg.weights);
  m.similarity = std::move(agg.similarity);
  for (std::size_t i = 0; i < n; ++i) {
    ClientRoundMetrics cm;
    cm.client_id = clients[i].id;
    cm.train_loss = results[i].train_loss;
    cm.val_loss = clients[i].validation_loss();
    cm.tokens_processed = results[i].tokens_processed;
    cm.density = density_per_token(results[i].selection, results[i].tokens_processed);
    cm.selection = std::move(results[i].selection);
    m.clients.push_back(std::move(cm));
  }
  std::sort(m.clients.begin(), m.clients.end(),
            [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
  m.trunk_hash = hash_hex(tensor_hash(global_trunk));
  m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

std::string round_log_line(const RoundMetrics& metrics) {
  nlohmann::ordered_json j;
  j["round"] = metrics.round;
  j["mode"] = to_string(metrics.mode);
  j["weights"] = metrics.weights;
  std::vector<double> mean_off;
  for (const auto& s : metrics.similarity) {
    const std::size_t n = s.rows();
    double sum = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = 0; b < n; ++b) {
        if (a != b) sum += s(a, b);
      }
    }
    mean_off.push_back(n > 1 ? sum / static_cast<double>(n * (n - 1)) : 1.0);
  }
  j["mean_offdiag_similarity"] = mean_off;
  j["trunk_hash"] = metrics.trunk_hash;
  return j.dump();
}

}  // namespace fedmoe
