#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedmoe/client.hpp"
#include "fedmoe/dgmoe.hpp"
#include "fedmoe/matrix.hpp"
#include "fedmoe/params.hpp"

namespace fedmoe {

enum class AggregationMode { eda, fedavg };

std::string to_string(AggregationMode mode);
AggregationMode parse_aggregation_mode(const std::string& text);

struct RoundSubmission {
  std::size_t client_id = 0;
  TensorList trunk;
  SelectionMatrix selection;
};

/// Row `layer` of V as reals.
std::vector<double> selection_vector(const SelectionMatrix& selection, std::size_t layer);

/// N×N cosine similarities. Diagonal is 1 for every client, zero vectors
/// included; off-diagonal entries touching a zero vector are 0.
Matrix pairwise_similarity(std::span<const std::vector<double>> vectors);

/// Row sums of S over the grand total; uniform 1/N if the total is 0.
std::vector<double> aggregation_weights(const Matrix& similarity);

/// Each tensor tagged with trunk layer l is averaged with weights[l] over the
/// submissions, in submission order. Entries are clamped into the clients'
/// [min, max] so rounding cannot leave the convex hull.
TensorList aggregate_trunk(std::span<const TensorList> trunks,
                           std::span<const std::vector<double>> weights);

/// Uniform mean over submissions sorted by client id.
TensorList fedavg_aggregate(std::span<const RoundSubmission> submissions);

struct ClientRoundMetrics {
  std::size_t client_id = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::uint64_t tokens_processed = 0;
  SelectionMatrix selection;
  Density density;
};

struct RoundMetrics {
  std::size_t round = 0;
  AggregationMode mode = AggregationMode::eda;
  std::vector<std::vector<double>> weights;  // [layer][client], clients by id
  std::vector<Matrix> similarity;            // per layer
  std::vector<ClientRoundMetrics> clients;   // by id
  std::string trunk_hash;
  double wall_seconds = 0.0;
};

/// Aggregates one round's submissions. Similarity is computed in both modes;
/// only EDA turns it into weights, FedAvg uses 1/N.
struct Aggregation {
  TensorList trunk;
  std::vector<std::vector<double>> weights;
  std::vector<Matrix> similarity;
};
Aggregation aggregate(std::vector<RoundSubmission> submissions, AggregationMode mode);

struct RoundOptions {
  AggregationMode mode = AggregationMode::eda;
  bool parallel = false;  // one thread per client; results are identical either way
};

/// Local training on every client, aggregation, broadcast, then validation
/// with the new trunk. Any client failure aborts the round.
RoundMetrics run_round(std::vector<FederatedClient>& clients, TensorList& global_trunk,
                       std::size_t round, const RoundOptions& options);

/// One JSON object per line: round, mode, weights, mean off-diagonal
/// similarity per layer, trunk hash.
std::string round_log_line(const RoundMetrics& metrics);

}  // namespace fedmoe
