// Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
// if any fails. Pass criterion numbers as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedmoe/harness.hpp"
#include "fedmoe/kernels.hpp"
#include "fixtures.hpp"
#include "grad_check.hpp"

using namespace fedmoe;
namespace fs = std::filesystem;

namespace {

// Tolerances and sizes, pinned.
constexpr double kGradEps = 1e-5;
constexpr double kGradRtol = 1e-4;
constexpr double kGradSeconds = 10.0;
constexpr std::size_t kGateTokens = 10'000;
constexpr double kRowSumTol = 1e-12;
constexpr double kWeightSumTol = 1e-9;
constexpr double kReductionTol = 1e-12;
constexpr std::size_t kSparseInputs = 1'000;
constexpr double kDensityCeiling = 2.0;  // fixed density of a top-2 baseline
constexpr std::size_t kSeeds = 5;
constexpr std::size_t kSeedsRequired = 4;
constexpr std::size_t kLastRounds = 10;
constexpr double kAblationSlack = 1.05;
constexpr double kSweepSeconds = 15.0 * 60.0;

struct Outcome {
  bool pass;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.same_shape(b) && std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

bool bitwise_equal(const TensorList& a, const TensorList& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].role != b[i].role || a[i].layer != b[i].layer || !bitwise_equal(a[i].value, b[i].value)) return false;
  }
  return true;
}

// ------------------------------------------------------------------ 1

Outcome gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  ModelDims dims;
  dims.layers = 1;
  dims.experts = 2;
  dims.dim = 4;
  dims.heads = 2;
  dims.action_dim = 2;
  dims.action_steps = 2;
  dims.proprio_dim = 2;
  dims.image_tokens = 1;  // 2 tokens with proprioception

  std::size_t clean = 0, banded = 0, checked = 0, mismatches = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 60 && clean < 5; ++seed) {
    auto provider = std::make_shared<SyntheticEmbeddingProvider>(dims.dim, 100 + seed);
    ClientModel model(dims, ModelOptions{}, provider, seed);
    Rng rng(seed + 50);
    const PreparedSample s = model.prepare(testing::make_sample(rng, *provider, dims), testing::kVocab);
    ClientModel::ForwardCache cache;
    model.forward(s, nullptr, &cache);
    bool in_band = false;
    auto scan = [&](const DGMoELayer::Cache& c) {
      for (double m : c.margins.values()) in_band = in_band || std::abs(m) < model.options().ste_band;
    };
    if (cache.grouped > 0) scan(cache.stem_moe);
    for (const auto& b : cache.blocks) scan(b.moe);
    if (in_band) {
      ++banded;
      continue;
    }
    ++clean;
    model.zero_grad();
    accumulate_sample_gradient(model, s, 1.0, 1.0, nullptr);
    auto objective = [&] {
      return huber_loss(model.forward(s).values(), s.sample.actions.values(), 1.0).loss;
    };
    const auto r = testing::check_gradients(model.all_params(), objective, kGradEps, kGradRtol);
    checked += r.checked;
    mismatches += r.mismatches.size();
    worst = std::max(worst, r.worst_relative);
  }
  const double secs = seconds_since(t0);
  return {clean == 5 && mismatches == 0 && checked > 0 && secs < kGradSeconds,
          std::to_string(checked) + " entries over " + std::to_string(clean) + " models (" +
              std::to_string(banded) + " in-band draws skipped), worst rel " + fmt("%.2e", worst) + ", " +
              fmt("%.2f", secs) + " s"};
}

// ------------------------------------------------------------------ 2

Outcome gate_invariants() {
  Rng rng(2024);
  std::size_t tokens = 0, bad_sum = 0, bad_support = 0, bad_density = 0;
  double worst_sum = 0.0;
  while (tokens < kGateTokens) {
    DGMoEConfig cfg;
    cfg.dim = 8;
    cfg.experts = 1 + rng.uniform_int(0, 15);
    cfg.hidden = 4 * cfg.dim;
    cfg.threshold_init = rng.uniform(0.0, 3.0 / static_cast<double>(cfg.experts));
    cfg.router_init_scale = rng.uniform(0.25, 4.0);
    cfg.residual_gate = rng.uniform() < 0.5;
    DGMoELayer layer("moe", cfg.residual_gate ? 1 : 0, 0, cfg, rng);
    const std::size_t n = 50;
    Matrix x(n, cfg.dim);
    for (auto& v : x.values()) v = rng.normal(0.0, rng.uniform(0.1, 3.0));
    Matrix carry(n, cfg.experts);
    for (auto& v : carry.values()) v = rng.normal();
    SelectionMatrix counts(1, cfg.experts);
    DGMoELayer::Cache cache;
    layer.forward(x, cfg.residual_gate ? &carry : nullptr, &counts, &cache);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = cache.probs.row(i);
      double sum = 0.0;
      for (double p : row) sum += p;
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      bad_sum += std::abs(sum - 1.0) > kRowSumTol;
      const auto decision = expert_gate_decision(row, layer.expert_gate);
      const auto g = select_experts(row, decision);
      std::size_t accepted = 0, support = 0;
      for (std::size_t e = 0; e < cfg.experts; ++e) accepted += decision[e] > 0;
      for (std::size_t e = 0; e < cfg.experts; ++e) {
        if (g[e] == 0.0) continue;
        ++support;
        const bool in_accepted = decision[e] > 0;
        const bool is_fallback = accepted == 0 && e == argmax(row) && cache.fallback[i] == e;
        bad_support += !(in_accepted || is_fallback);
      }
      bad_support += support == 0;
      bad_support += accepted == 0 && support != 1;
    }
    const double d = density_per_token(counts, n).overall;
    bad_density += d < 1.0 || d > static_cast<double>(cfg.experts);
    tokens += n;
  }
  return {bad_sum == 0 && bad_support == 0 && bad_density == 0,
          std::to_string(tokens) + " tokens, worst |sum-1| " + fmt("%.1e", worst_sum) + ", support violations " +
              std::to_string(bad_support) + ", density violations " + std::to_string(bad_density)};
}

// ------------------------------------------------------------------ 3

TensorList random_trunk(Rng& rng, std::size_t layers) {
  TensorList t;
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix m(3, 4);
    for (auto& v : m.values()) v = rng.normal();
    t.push_back({static_cast<int>(l), "trunk.w", m});
  }
  return t;
}

Outcome eda_algebra() {
  Rng rng(33);
  std::size_t failures = 0;
  double worst_weight = 0.0, worst_reduction = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.uniform_int(0, 7);
    const std::size_t layers = 1 + rng.uniform_int(0, 3);
    const std::size_t k = 1 + rng.uniform_int(0, 9);
    std::vector<RoundSubmission> subs;
    for (std::size_t c = 0; c < n; ++c) {
      RoundSubmission s;
      s.client_id = c;
      s.trunk = random_trunk(rng, layers);
      s.selection = SelectionMatrix(layers, k);
      for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t e = 0; e < k; ++e) {
          if (rng.uniform() < 0.7) s.selection.at(l, e) = rng.uniform_int(0, 500);
        }
      }
      subs.push_back(std::move(s));
    }
    const auto agg = aggregate(subs, AggregationMode::eda);
    for (std::size_t l = 0; l < layers; ++l) {
      double sum = 0.0;
      for (double w : agg.weights[l]) {
        sum += w;
        failures += w < 0.0;
      }
      worst_weight = std::max(worst_weight, std::abs(sum - 1.0));
      failures += std::abs(sum - 1.0) > kWeightSumTol;
      const Matrix& s = agg.similarity[l];
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          failures += s(i, j) != s(j, i) || s(i, j) < 0.0 || s(i, j) > 1.0;
        }
      }
    }
    // identical selections reduce to FedAvg
    auto same = subs;
    for (auto& s : same) s.selection = subs[0].selection;
    const auto eda = aggregate(same, AggregationMode::eda).trunk;
    const auto avg = fedavg_aggregate(same);
    for (std::size_t t = 0; t < eda.size(); ++t) {
      for (std::size_t i = 0; i < eda[t].value.size(); ++i) {
        worst_reduction = std::max(worst_reduction, std::abs(eda[t].value[i] - avg[t].value[i]));
      }
    }
  }
  failures += worst_reduction > kReductionTol;

  // Counts (1,1,1,1), (1,0,0,0), (0,1,0,0): cosines 1/2, 1/2, 0, so the
  // similarity row sums are 2, 1.5, 1.5 out of 5.
  const std::vector<std::vector<std::uint64_t>> counts{{1, 1, 1, 1}, {1, 0, 0, 0}, {0, 1, 0, 0}};
  std::vector<RoundSubmission> hand;
  for (std::size_t c = 0; c < 3; ++c) {
    RoundSubmission s;
    s.client_id = c;
    s.trunk = random_trunk(rng, 1);
    s.selection = SelectionMatrix(1, 4);
    for (std::size_t e = 0; e < 4; ++e) s.selection.at(0, e) = counts[c][e];
    hand.push_back(std::move(s));
  }
  const auto w = aggregate(hand, AggregationMode::eda).weights[0];
  const bool example = w == std::vector<double>{0.4, 0.3, 0.3};
  failures += !example;
  return {failures == 0, "500 random rounds, worst |sum w - 1| " + fmt("%.1e", worst_weight) +
                             ", worst EDA-FedAvg gap " + fmt("%.1e", worst_reduction) + ", N=3 example " +
                             (example ? "(0.4, 0.3, 0.3)" : "wrong")};
}

// ------------------------------------------------------------------ 4

Outcome sparse_equivalence() {
  Rng rng(44);
  std::size_t mismatches = 0;
  for (std::size_t trial = 0; trial < kSparseInputs; ++trial) {
    DGMoEConfig cfg;
    cfg.dim = 4 + rng.uniform_int(0, 8);
    cfg.experts = 1 + rng.uniform_int(0, 9);
    cfg.hidden = 4 * cfg.dim;
    cfg.threshold_init = rng.uniform(0.0, 3.0 / static_cast<double>(cfg.experts));
    cfg.residual_gate = rng.uniform() < 0.5;
    DGMoELayer layer("moe", cfg.residual_gate ? 1 : 0, 0, cfg, rng);
    Matrix x(1 + rng.uniform_int(0, 11), cfg.dim);
    for (auto& v : x.values()) v = rng.normal();
    Matrix carry(x.rows(), cfg.experts);
    for (auto& v : carry.values()) v = rng.normal();
    const Matrix* c = cfg.residual_gate ? &carry : nullptr;
    SelectionMatrix a(1, cfg.experts), b(1, cfg.experts);
    const auto sparse = layer.forward(x, c, &a, nullptr, false);
    const auto dense = layer.forward(x, c, &b, nullptr, true);
    mismatches += !bitwise_equal(sparse.tokens, dense.tokens) || !bitwise_equal(sparse.scores, dense.scores) || a != b;
  }
  return {mismatches == 0, std::to_string(kSparseInputs) + " inputs, " + std::to_string(mismatches) + " differ"};
}

// ------------------------------------------------------------------ 5-7

// Desk profile: 4 clients in 2 clusters, K=8, 30 rounds.
ExperimentConfig desk_config(std::uint64_t seed) {
  ExperimentConfig c;
  c.clients = 4;
  c.rounds = 30;
  c.dims.dim = 16;
  c.dims.layers = 2;
  c.dims.experts = 8;
  c.dims.action_steps = 4;
  c.train.local_epochs = 2;
  c.data.clusters = 2;
  c.seed = seed;
  return c;
}

struct Sweep {
  // [variant][seed]
  std::vector<std::vector<std::vector<RoundMetrics>>> runs;
  double seconds = 0.0;
};

const std::vector<std::string> kVariants{"full", "no_iosp", "no_dgmoe", "no_eda"};

const Sweep& sweep() {
  static const Sweep s = [] {
    Sweep out;
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& v : kVariants) {
      std::vector<std::vector<RoundMetrics>> per_seed;
      for (std::size_t seed = 1; seed <= kSeeds; ++seed) {
        auto c = desk_config(seed);
        c.no_iosp = v == "no_iosp";
        c.no_dgmoe = v == "no_dgmoe";
        c.no_eda = v == "no_eda";
        per_seed.push_back(run_experiment(c).rounds);
      }
      out.runs.push_back(std::move(per_seed));
    }
    out.seconds = seconds_since(t0);
    return out;
  }();
  return s;
}

Outcome density() {
  const auto& full = sweep().runs[0];
  bool ok = true;
  std::string detail = "final-round density per seed:";
  for (const auto& rounds : full) {
    double d = 0.0;
    for (const auto& c : rounds.back().clients) d += c.density.overall;
    d /= static_cast<double>(rounds.back().clients.size());
    ok = ok && d >= 1.0 && d < kDensityCeiling && rounds.size() >= 30;
    detail += fmt(" %.3f", d);
  }
  return {ok, detail};
}

Outcome clustering() {
  const auto& full = sweep().runs[0];
  std::size_t seeds_ok = 0;
  std::string detail;
  for (const auto& rounds : full) {
    const std::size_t layers = rounds.back().similarity.size();
    std::size_t wins = 0;
    for (std::size_t l = 0; l < layers; ++l) {
      double within = 0.0, cross = 0.0;
      std::size_t nw = 0, nc = 0;
      for (std::size_t r = rounds.size() - kLastRounds; r < rounds.size(); ++r) {
        const Matrix& s = rounds[r].similarity[l];
        for (std::size_t i = 0; i < 4; ++i) {
          for (std::size_t j = i + 1; j < 4; ++j) {
            if (i / 2 == j / 2) {
              within += s(i, j);
              ++nw;
            } else {
              cross += s(i, j);
              ++nc;
            }
          }
        }
      }
      within /= static_cast<double>(nw);
      cross /= static_cast<double>(nc);
      wins += within > cross;
      detail += fmt(" %.3f", within) + fmt("/%.3f", cross);
    }
    seeds_ok += 2 * wins > layers;
    detail += " |";
  }
  return {seeds_ok >= kSeedsRequired,
          std::to_string(seeds_ok) + "/" + std::to_string(kSeeds) + " seeds; within/cross per layer:" + detail};
}

Outcome ablations() {
  const auto& s = sweep();
  std::vector<double> mean(kVariants.size(), 0.0);
  for (std::size_t v = 0; v < kVariants.size(); ++v) {
    for (const auto& rounds : s.runs[v]) mean[v] += final_mean_val_loss(rounds) / static_cast<double>(kSeeds);
  }
  bool ok = s.seconds <= kSweepSeconds;
  std::string detail = "mean final val loss:";
  for (std::size_t v = 0; v < kVariants.size(); ++v) {
    detail += " " + kVariants[v] + fmt(" %.4f", mean[v]);
    if (v > 0) ok = ok && mean[0] <= kAblationSlack * mean[v];
  }
  detail += fmt("; %.0f s for 20 runs", s.seconds);
  return {ok, detail};
}

// ------------------------------------------------------------------ 8

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Outcome determinism() {
  auto c = desk_config(7);
  c.rounds = 3;
  const fs::path base = fs::temp_directory_path() / "fedmoe_acceptance_det";
  fs::remove_all(base);
  run_experiment(c, RunOptions{base / "a", false});
  run_experiment(c, RunOptions{base / "b", false});
  const std::string a = slurp(base / "a" / "metrics.csv");
  const std::string b = slurp(base / "b" / "metrics.csv");
  return {!a.empty() && a == b, std::to_string(a.size()) + " bytes, " + (a == b ? "identical" : "differ")};
}

// ------------------------------------------------------------------ 9

Outcome hygiene() {
  auto c = desk_config(9);
  c.rounds = 2;
  const auto provider = make_provider(c);
  const auto data = generate_clients(c.clients, c.data, c.dims, *provider, experiment_seeds(c.seed).data);
  auto clients = build_clients(c, data, provider);
  TensorList global = clients[0].model.trunk();
  std::size_t violations = 0;
  for (std::size_t round = 0; round < c.rounds; ++round) {
    for (auto& cl : clients) {
      const auto trained = local_train(cl.model, cl.optimizer, cl.train, cl.config, global,
                                       derive_seed(cl.config.seed, cl.id, round));
      (void)trained;
    }
    std::vector<RoundSubmission> subs;
    for (auto& cl : clients) subs.push_back({cl.id, cl.model.trunk(), SelectionMatrix(c.dims.layers, c.dims.experts)});
    global = aggregate(subs, AggregationMode::fedavg).trunk;
    for (auto& cl : clients) {
      const auto stem = tensor_hash(cl.model.stem());
      const auto head = tensor_hash(cl.model.head());
      apply_global_trunk(cl.model, global);
      violations += tensor_hash(cl.model.stem()) != stem || tensor_hash(cl.model.head()) != head;
      violations += !bitwise_equal(cl.model.trunk(), global);
    }
  }
  const auto bytes = serialize_tensors(global);
  const bool round_trip = bitwise_equal(deserialize_tensors(bytes), global);
  const fs::path file = fs::temp_directory_path() / "fedmoe_acceptance_trunk.bin";
  write_tensor_file(file, global);
  const bool file_trip = bitwise_equal(read_tensor_file(file), global);
  return {violations == 0 && round_trip && file_trip,
          std::to_string(c.rounds * c.clients) + " broadcasts, " + std::to_string(violations) +
              " stem/head changes; trunk serialization " + (round_trip && file_trip ? "bit-exact" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient check", gradient_check},
      {"gate invariants", gate_invariants},
      {"EDA algebra", eda_algebra},
      {"sparse execution equivalence", sparse_equivalence},
      {"expert density below top-2", density},
      {"within-cluster routing similarity", clustering},
      {"ablation ordering", ablations},
      {"determinism", determinism},
      {"federation hygiene", hygiene},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::stoul(argv[i])));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Outcome o{false, ""};
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("[%s] %zu. %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
