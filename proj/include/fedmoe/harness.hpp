#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmoe/client.hpp"
#include "fedmoe/scene.hpp"
#include "fedmoe/server.hpp"

namespace fedmoe {

// ---------------------------------------------------------------- synthetic data

struct DataConfig {
  std::size_t clusters = 2;
  std::size_t episodes_min = 30;
  std::size_t episodes_max = 80;
  std::size_t steps_min = 20;
  std::size_t steps_max = 100;
  std::size_t sample_stride = 25;  // one keyframe every `sample_stride` steps
  double action_noise = 0.05;
  double token_noise = 0.05;
  double cluster_perturbation = 0.1;  // client map = cluster map + this × fresh draw
  double scene_context = 1.0;         // norm of the per-cluster appearance offset on every image token
  double validation_fraction = 0.2;
};

/// Hidden task of one client: action chunk = object_map · mean(target tokens)
/// + proprio_map · s + noise.
struct SyntheticTaskSpec {
  std::size_t cluster = 0;
  std::vector<std::string> vocabulary;
  std::vector<double> context;  // shared by the cluster, added to every image token
  std::string target;
  std::string verb;
  Matrix object_map;   // (steps·A) × D
  Matrix proprio_map;  // (steps·A) × P
  double noise = 0.0;
};

struct ClientData {
  std::size_t id = 0;
  SyntheticTaskSpec task;
  std::vector<Sample> train;
  std::vector<Sample> validation;
  // image-token rows that show the target, per sample
  std::vector<std::vector<std::size_t>> train_target_rows;
  std::vector<std::vector<std::size_t>> validation_target_rows;
};

/// Clients are assigned to clusters contiguously (client i -> i·clusters/N).
/// Clients of one cluster draw objects from the same vocabulary and share a
/// target map up to `cluster_perturbation`.
std::vector<ClientData> generate_clients(std::size_t n_clients, const DataConfig& config,
                                         const ModelDims& dims, const EmbeddingProvider& provider,
                                         std::uint64_t seed);

/// Deterministic content hash of a client's samples.
std::uint64_t dataset_hash(const ClientData& data);

nlohmann::ordered_json sample_to_json(const Sample& sample);
Sample sample_from_json(const nlohmann::json& j);

/// Writes client_<id>.json (task metadata), client_<id>_train.jsonl and
/// client_<id>_val.jsonl under `dir`.
void write_client_data(const std::filesystem::path& dir, const std::vector<ClientData>& clients);
std::vector<ClientData> read_client_data(const std::filesystem::path& dir);

// ---------------------------------------------------------------- experiments

enum class ExperimentMode { eda, fedavg, centralized };

std::string to_string(ExperimentMode mode);
ExperimentMode parse_experiment_mode(const std::string& text);

struct ExperimentConfig {
  std::size_t clients = 4;
  std::size_t rounds = 50;
  ModelDims dims;
  ModelOptions model;
  TrainConfig train;
  DataConfig data;
  ExperimentMode mode = ExperimentMode::eda;
  bool no_iosp = false;
  bool no_dgmoe = false;
  bool no_eda = false;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: final round only
  bool parallel = false;
  std::string data_dir;  // load scenes from here instead of generating
};

nlohmann::ordered_json config_to_json(const ExperimentConfig& config);
/// Keys present in `j` override `base`; unknown keys are an error.
ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path);
void validate(const ExperimentConfig& config);

/// Sets one dotted key (e.g. "train.learning_rate") from its text form.
void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value);

/// Seeds of independent streams, all derived from the experiment seed.
struct ExperimentSeeds {
  std::uint64_t data;
  std::uint64_t embeddings;
  std::uint64_t init;
  std::uint64_t shuffle;
};
ExperimentSeeds experiment_seeds(std::uint64_t seed);

std::shared_ptr<const EmbeddingProvider> make_provider(const ExperimentConfig& config);

/// Effective model options after ablation flags.
ModelOptions effective_model_options(const ExperimentConfig& config);
AggregationMode effective_aggregation(const ExperimentConfig& config);

/// Clients ready to train. Centralized mode yields one client holding every
/// client's data.
std::vector<FederatedClient> build_clients(const ExperimentConfig& config,
                                           const std::vector<ClientData>& data,
                                           std::shared_ptr<const EmbeddingProvider> provider);

struct ExperimentResult {
  std::vector<RoundMetrics> rounds;
  TensorList global_trunk;
  std::vector<FederatedClient> clients;
};

struct RunOptions {
  std::optional<std::filesystem::path> out_dir;  // writes artifacts when set
  bool resume = false;                           // continue from out_dir/checkpoint
};

/// Runs `config.rounds` rounds. With an output directory it writes
/// config.json, records.jsonl, rounds.jsonl, metrics.csv, summary.json after
/// every round and checkpoints at the configured cadence.
ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

// ---------------------------------------------------------------- checkpoints

void write_checkpoint(const std::filesystem::path& dir, std::size_t round,
                      std::vector<FederatedClient>& clients, const TensorList& global_trunk);
/// Restores clients and the global trunk; returns the last completed round.
std::size_t read_checkpoint(const std::filesystem::path& dir, std::vector<FederatedClient>& clients,
                            TensorList& global_trunk);

// ---------------------------------------------------------------- metrics

nlohmann::ordered_json record_to_json(const RoundMetrics& metrics);
RoundMetrics record_from_json(const nlohmann::json& j);
std::vector<RoundMetrics> read_records(const std::filesystem::path& path);

/// Header: round, client_id, val_loss, density_overall, density_layer_0..L-1,
/// then count_l<l>_e<k> for every layer and expert.
std::string metrics_csv(const std::vector<RoundMetrics>& records);
nlohmann::ordered_json metrics_summary(const std::vector<RoundMetrics>& records);

/// Writes metrics.csv and summary.json into `dir`.
void export_metrics(const std::vector<RoundMetrics>& records, const std::filesystem::path& dir);

/// Mean validation loss over clients in the last record.
double final_mean_val_loss(const std::vector<RoundMetrics>& records);

}  // namespace fedmoe
