#pragma once

// Small hand-built samples and models shared by the client and server tests.

#include <memory>
#include <string>
#include <vector>

#include "fedmoe/client.hpp"
#include "fedmoe/random.hpp"

namespace fedmoe::testing {

inline const std::vector<std::string> kVocab{"drawer", "cup", "plate", "table"};

inline Sample make_sample(Rng& rng, const EmbeddingProvider& p, const ModelDims& dims) {
  Sample s;
  s.observation.tokens = Matrix(dims.image_tokens, dims.dim);
  for (auto& v : s.observation.tokens.values()) v = rng.normal(0.0, 0.3);
  const std::vector<std::string> labels{"cup", "plate", "table"};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto e = p.text_embed(labels[i]);
    const std::size_t r = i % dims.image_tokens;
    for (std::size_t j = 0; j < dims.dim; ++j) s.observation.tokens(r, j) += e[j];
    s.observation.detections.push_back({labels[i], i < 2, 0.9});
  }
  s.instruction = "pick up the cup";
  s.proprioception.resize(dims.proprio_dim);
  for (auto& v : s.proprioception) v = rng.normal();
  s.actions = Matrix(dims.action_steps, dims.action_dim);
  for (auto& v : s.actions.values()) v = rng.normal(0.0, 0.5);
  return s;
}

inline ModelDims small_dims() {
  ModelDims d;
  d.layers = 2;
  d.experts = 4;
  d.dim = 8;
  d.heads = 2;
  d.action_dim = 2;
  d.action_steps = 3;
  d.proprio_dim = 3;
  d.image_tokens = 6;
  return d;
}

inline std::vector<PreparedSample> make_dataset(const ClientModel& m, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PreparedSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(m.prepare(make_sample(rng, m.provider(), m.dims()), kVocab));
  return out;
}

/// N clients over one shared init seed, each with its own data stream.
inline std::vector<FederatedClient> make_clients(std::size_t n, const ModelDims& dims,
                                                 std::shared_ptr<const EmbeddingProvider> provider,
                                                 std::size_t samples, std::uint64_t seed) {
  std::vector<FederatedClient> out;
  for (std::size_t i = 0; i < n; ++i) {
    ClientModel model(dims, ModelOptions{}, provider, seed);
    auto train = make_dataset(model, samples, derive_seed(seed, i, 1));
    auto val = make_dataset(model, 3, derive_seed(seed, i, 2));
    auto opt = OptimizerState::for_model(model);
    TrainConfig cfg;
    cfg.local_epochs = 1;
    cfg.batch_size = 4;
    cfg.seed = seed;
    out.push_back(FederatedClient{i, std::move(model), std::move(opt), std::move(train), std::move(val), cfg});
  }
  return out;
}

}  // namespace fedmoe::testing
