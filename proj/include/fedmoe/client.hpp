#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedmoe/dgmoe.hpp"
#include "fedmoe/kernels.hpp"
#include "fedmoe/layers.hpp"
#include "fedmoe/params.hpp"
#include "fedmoe/scene.hpp"

namespace fedmoe {

struct ModelDims {
  std::size_t layers = 4;
  std::size_t experts = 8;
  std::size_t dim = 64;
  std::size_t heads = 2;
  std::size_t action_dim = 4;
  std::size_t action_steps = 8;
  std::size_t proprio_dim = 4;
  std::size_t image_tokens = 24;
  std::size_t ffn_mult = 4;

  std::size_t sequence_length() const { return image_tokens + 1; }
  bool operator==(const ModelDims&) const = default;
};

struct ModelOptions {
  bool use_dgmoe = true;  // false swaps every DGMoE for a dense FFN of matched size
  double lambda = 0.5;
  double ste_band = 0.1;
  double threshold_init = 0.5;  // lambda·W_e starts at 2/K for K=8
  double router_init_scale = 1.0;
  SceneConfig scene;
};

/// One training example: observation, instruction, proprioception, and the
/// action chunk to imitate (steps × A).
struct Sample {
  Observation observation;
  std::string instruction;
  std::vector<double> proprioception;
  Matrix actions;

  bool operator==(const Sample&) const = default;
};

/// A sample with its scene plan resolved once; the plan depends only on the
/// frozen encoders, never on trainable weights.
struct PreparedSample {
  Sample sample;
  ScenePlan plan;
};

/// Activation counts gathered during training forwards.
struct RoutingStats {
  SelectionMatrix trunk;
  SelectionMatrix stem;
  std::uint64_t trunk_tokens = 0;  // tokens seen by each trunk layer
  std::uint64_t stem_tokens = 0;
};

/// Stem (personalized) -> trunk of L attention+MoE blocks (federated) ->
/// head (personalized).
class ClientModel {
 public:
  struct BlockCache {
    LayerNorm::Cache ln1;
    MultiHeadAttention::Cache attn;
    LayerNorm::Cache ln2;
    DGMoELayer::Cache moe;
    ExpertFFN::Cache dense;
  };

  struct ForwardCache {
    Linear::Cache proprio;
    std::size_t grouped = 0;
    DGMoELayer::Cache stem_moe;
    ExpertFFN::Cache stem_dense;
    Linear::Cache image;
    std::vector<BlockCache> blocks;
    LayerNorm::Cache final_norm;
    Matrix normalized;
    std::vector<double> pool_weights;
    Linear::Cache head;
  };

  ClientModel(const ModelDims& dims, const ModelOptions& options,
              std::shared_ptr<const EmbeddingProvider> provider, std::uint64_t init_seed);

  ClientModel(const ClientModel&) = delete;
  ClientModel& operator=(const ClientModel&) = delete;
  ClientModel(ClientModel&&) = default;
  ClientModel& operator=(ClientModel&&) = default;

  ScenePlan plan(const Sample& sample, std::span<const std::string> vocabulary) const;
  PreparedSample prepare(const Sample& sample, std::span<const std::string> vocabulary) const;

  /// Parsed input sequence before the stem embedders: enhanced group tokens,
  /// remaining tokens, embedded proprioception. The forward pass adds the raw
  /// group tokens back onto the enhanced ones before embedding.
  Matrix parsed_sequence(const PreparedSample& sample) const;

  /// Predicted action chunk (steps × A).
  Matrix forward(const PreparedSample& sample, RoutingStats* stats = nullptr,
                 ForwardCache* cache = nullptr) const;
  void backward(const ForwardCache& cache, const Matrix& d_actions);

  RoutingStats make_stats() const;

  ParamRefs stem_params();
  ParamRefs trunk_params();
  ParamRefs head_params();
  ParamRefs all_params();
  void zero_grad();

  TensorList stem() const;
  TensorList trunk() const;
  TensorList head() const;

  const ModelDims& dims() const { return dims_; }
  const ModelOptions& options() const { return options_; }
  const EmbeddingProvider& provider() const { return *provider_; }
  /// Null when the model was built without DGMoE.
  const DGMoELayer* stem_moe() const { return group_moe_ ? &*group_moe_ : nullptr; }

 private:
  struct TrunkBlock {
    LayerNorm ln1;
    MultiHeadAttention attn;
    LayerNorm ln2;
    std::optional<DGMoELayer> moe;
    std::optional<ExpertFFN> dense;
  };

  Matrix stem_forward(const PreparedSample& s, RoutingStats* stats, ForwardCache* cache,
                      bool embed) const;

  ModelDims dims_;
  ModelOptions options_;
  std::shared_ptr<const EmbeddingProvider> provider_;

  Linear proprio_embed_;
  std::optional<DGMoELayer> group_moe_;
  std::optional<ExpertFFN> group_dense_;
  Linear image_embed_;
  Parameter position_;

  std::vector<TrunkBlock> blocks_;

  LayerNorm final_norm_;
  Parameter pool_logits_;
  Linear head_out_;
};

struct TrainConfig {
  std::size_t local_epochs = 5;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double huber_delta = 1.0;
  std::uint64_t seed = 0;
};

/// Adam moments for every parameter of a model, in `all_params()` order.
struct OptimizerState {
  std::vector<AdamState> slots;

  static OptimizerState for_model(ClientModel& model);
  TensorList to_tensors(ClientModel& model) const;
  void load(ClientModel& model, const TensorList& tensors);
};

struct LocalTrainResult {
  TensorList trunk;
  SelectionMatrix selection;
  std::uint64_t tokens_processed = 0;
  double train_loss = 0.0;  // mean over the last local epoch
};

/// Loss and gradient for one sample, gradients accumulated into the model.
double accumulate_sample_gradient(ClientModel& model, const PreparedSample& sample,
                                  double huber_delta, double grad_scale, RoutingStats* stats);

/// Loads the global trunk, then runs E_c epochs of minibatch Adam over stem,
/// trunk and head. `shuffle_seed` fixes the minibatch order.
LocalTrainResult local_train(ClientModel& model, OptimizerState& optimizer,
                             std::span<const PreparedSample> dataset, const TrainConfig& config,
                             const TensorList& global_trunk, std::uint64_t shuffle_seed);

/// Mean per-sample Huber loss; touches neither parameters nor counts.
double evaluate(const ClientModel& model, std::span<const PreparedSample> validation,
                double huber_delta);

void apply_global_trunk(ClientModel& model, const TensorList& trunk);

/// Everything one simulated client owns. Stem, head and optimizer state stay
/// here; only the trunk and selection counts leave.
struct FederatedClient {
  std::size_t id = 0;
  ClientModel model;
  OptimizerState optimizer;
  std::vector<PreparedSample> train;
  std::vector<PreparedSample> validation;
  TrainConfig config;

  /// Minibatch order for a round: derive_seed(config.seed, id, round).
  LocalTrainResult train_round(const TensorList& global_trunk, std::size_t round);
  double validation_loss() const;
};

}  // namespace fedmoe
