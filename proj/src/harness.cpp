#include "fedmoe/harness.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "fedmoe/random.hpp"

namespace fedmoe {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(ExperimentMode mode) {
  switch (mode) {
    case ExperimentMode::eda: return "eda";
    case ExperimentMode::fedavg: return "fedavg";
    case ExperimentMode::centralized: return "centralized";
  }
  return "eda";
}

ExperimentMode parse_experiment_mode(const std::string& text) {
  if (text == "eda") return ExperimentMode::eda;
  if (text == "fedavg") return ExperimentMode::fedavg;
  if (text == "centralized") return ExperimentMode::centralized;
  throw std::invalid_argument("unknown mode: " + text + " (expected eda, fedavg or centralized)");
}

// ---------------------------------------------------------------- config

namespace {

struct Field {
  std::string key;
  std::function<json(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const json&)> set;
};

template <typename T, typename Access>
Field field(std::string key, Access access) {
  return Field{std::move(key),
               [access](const ExperimentConfig& c) {
                 return json(access(const_cast<ExperimentConfig&>(c)));
               },
               [access](ExperimentConfig& c, const json& j) { access(c) = j.get<T>(); }};
}

const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(field<std::size_t>("clients", [](C& c) -> auto& { return c.clients; }));
    f.push_back(field<std::size_t>("rounds", [](C& c) -> auto& { return c.rounds; }));
    f.push_back(Field{"mode", [](const C& c) { return json(to_string(c.mode)); },
                      [](C& c, const json& j) { c.mode = parse_experiment_mode(j.get<std::string>()); }});
    f.push_back(field<std::uint64_t>("seed", [](C& c) -> auto& { return c.seed; }));
    f.push_back(field<bool>("no_iosp", [](C& c) -> auto& { return c.no_iosp; }));
    f.push_back(field<bool>("no_dgmoe", [](C& c) -> auto& { return c.no_dgmoe; }));
    f.push_back(field<bool>("no_eda", [](C& c) -> auto& { return c.no_eda; }));
    f.push_back(field<std::size_t>("checkpoint_every", [](C& c) -> auto& { return c.checkpoint_every; }));
    f.push_back(field<bool>("parallel", [](C& c) -> auto& { return c.parallel; }));
    f.push_back(field<std::string>("data_dir", [](C& c) -> auto& { return c.data_dir; }));

    f.push_back(field<std::size_t>("model.layers", [](C& c) -> auto& { return c.dims.layers; }));
    f.push_back(field<std::size_t>("model.experts", [](C& c) -> auto& { return c.dims.experts; }));
    f.push_back(field<std::size_t>("model.dim", [](C& c) -> auto& { return c.dims.dim; }));
    f.push_back(field<std::size_t>("model.heads", [](C& c) -> auto& { return c.dims.heads; }));
    f.push_back(field<std::size_t>("model.action_dim", [](C& c) -> auto& { return c.dims.action_dim; }));
    f.push_back(field<std::size_t>("model.action_steps", [](C& c) -> auto& { return c.dims.action_steps; }));
    f.push_back(field<std::size_t>("model.proprio_dim", [](C& c) -> auto& { return c.dims.proprio_dim; }));
    f.push_back(field<std::size_t>("model.image_tokens", [](C& c) -> auto& { return c.dims.image_tokens; }));
    f.push_back(field<std::size_t>("model.ffn_mult", [](C& c) -> auto& { return c.dims.ffn_mult; }));
    f.push_back(field<double>("model.lambda", [](C& c) -> auto& { return c.model.lambda; }));
    f.push_back(field<double>("model.ste_band", [](C& c) -> auto& { return c.model.ste_band; }));
    f.push_back(field<double>("model.threshold_init", [](C& c) -> auto& { return c.model.threshold_init; }));
    f.push_back(field<double>("model.router_init_scale", [](C& c) -> auto& { return c.model.router_init_scale; }));
    f.push_back(field<double>("model.target_threshold", [](C& c) -> auto& { return c.model.scene.target_threshold; }));
    f.push_back(field<double>("model.foreground_cutoff", [](C& c) -> auto& { return c.model.scene.foreground_cutoff; }));
    f.push_back(field<std::size_t>("model.tokens_per_group", [](C& c) -> auto& { return c.model.scene.tokens_per_group; }));

    f.push_back(field<std::size_t>("train.local_epochs", [](C& c) -> auto& { return c.train.local_epochs; }));
    f.push_back(field<std::size_t>("train.batch_size", [](C& c) -> auto& { return c.train.batch_size; }));
    f.push_back(field<double>("train.learning_rate", [](C& c) -> auto& { return c.train.learning_rate; }));
    f.push_back(field<double>("train.huber_delta", [](C& c) -> auto& { return c.train.huber_delta; }));

    f.push_back(field<std::size_t>("data.clusters", [](C& c) -> auto& { return c.data.clusters; }));
    f.push_back(field<std::size_t>("data.episodes_min", [](C& c) -> auto& { return c.data.episodes_min; }));
    f.push_back(field<std::size_t>("data.episodes_max", [](C& c) -> auto& { return c.data.episodes_max; }));
    f.push_back(field<std::size_t>("data.steps_min", [](C& c) -> auto& { return c.data.steps_min; }));
    f.push_back(field<std::size_t>("data.steps_max", [](C& c) -> auto& { return c.data.steps_max; }));
    f.push_back(field<std::size_t>("data.sample_stride", [](C& c) -> auto& { return c.data.sample_stride; }));
    f.push_back(field<double>("data.action_noise", [](C& c) -> auto& { return c.data.action_noise; }));
    f.push_back(field<double>("data.token_noise", [](C& c) -> auto& { return c.data.token_noise; }));
    f.push_back(field<double>("data.cluster_perturbation", [](C& c) -> auto& { return c.data.cluster_perturbation; }));
    f.push_back(field<double>("data.scene_context", [](C& c) -> auto& { return c.data.scene_context; }));
    f.push_back(field<double>("data.validation_fraction", [](C& c) -> auto& { return c.data.validation_fraction; }));
    return f;
  }();
  return table;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw std::invalid_argument("unknown config key: " + key);
}

void apply_json(ExperimentConfig& c, const json& j, const std::string& prefix) {
  if (!j.is_object()) throw std::invalid_argument("config: expected an object at '" + prefix + "'");
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      apply_json(c, v, key);
      continue;
    }
    try {
      find_field(key).set(c, v);
    } catch (const json::exception& e) {
      throw std::invalid_argument("config: bad value for " + key + ": " + e.what());
    }
  }
}

}  // namespace

ordered_json config_to_json(const ExperimentConfig& config) {
  ordered_json out = ordered_json::object();
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    if (dot == std::string::npos) {
      out[f.key] = f.get(config);
    } else {
      out[f.key.substr(0, dot)][f.key.substr(dot + 1)] = f.get(config);
    }
  }
  return out;
}

ExperimentConfig config_from_json(const json& j, ExperimentConfig base) {
  apply_json(base, j, "");
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(f, nullptr, true, true);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value) {
  const Field& f = find_field(key);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // bare word: treat as a string
  }
  try {
    f.set(config, parsed);
  } catch (const json::exception& e) {
    throw std::invalid_argument("bad value for " + key + ": " + value);
  }
}

void validate(const ExperimentConfig& c) {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("config: ") + what);
  };
  need(c.clients >= 1, "clients must be >= 1");
  need(c.rounds >= 1, "rounds must be >= 1");
  need(c.train.local_epochs >= 1, "train.local_epochs must be >= 1");
  need(c.train.batch_size >= 1, "train.batch_size must be >= 1");
  need(c.train.learning_rate >= 0.0, "train.learning_rate must be >= 0");
  need(c.train.huber_delta > 0.0, "train.huber_delta must be > 0");
  need(c.model.lambda > 0.0, "model.lambda must be > 0");
  need(c.model.ste_band >= 0.0, "model.ste_band must be >= 0");
  need(c.model.scene.tokens_per_group >= 1, "model.tokens_per_group must be >= 1");
  need(c.model.scene.target_threshold > 0.0 && c.model.scene.target_threshold < 1.0,
       "model.target_threshold must lie in (0, 1)");
  need(c.data.clusters >= 1 && c.data.clusters <= c.clients, "data.clusters must lie in [1, clients]");
}

ExperimentSeeds experiment_seeds(std::uint64_t seed) {
  return ExperimentSeeds{derive_seed(seed, 0xDA7A), derive_seed(seed, 0xE3B), derive_seed(seed, 0x1417),
                         derive_seed(seed, 0x5EED)};
}

std::shared_ptr<const EmbeddingProvider> make_provider(const ExperimentConfig& config) {
  return std::make_shared<SyntheticEmbeddingProvider>(config.dims.dim, experiment_seeds(config.seed).embeddings);
}

ModelOptions effective_model_options(const ExperimentConfig& config) {
  ModelOptions o = config.model;
  o.scene.enabled = !config.no_iosp;
  o.use_dgmoe = !config.no_dgmoe;
  return o;
}

AggregationMode effective_aggregation(const ExperimentConfig& config) {
  return config.mode == ExperimentMode::eda && !config.no_eda ? AggregationMode::eda : AggregationMode::fedavg;
}

std::vector<FederatedClient> build_clients(const ExperimentConfig& config,
                                           const std::vector<ClientData>& data,
                                           std::shared_ptr<const EmbeddingProvider> provider) {
  const auto seeds = experiment_seeds(config.seed);
  const ModelOptions options = effective_model_options(config);
  TrainConfig train = config.train;
  train.seed = seeds.shuffle;

  auto make = [&](std::size_t id) {
    FederatedClient c{id, ClientModel(config.dims, options, provider, seeds.init), {}, {}, {}, train};
    c.optimizer = OptimizerState::for_model(c.model);
    return c;
  };
  std::vector<FederatedClient> out;
  if (config.mode == ExperimentMode::centralized) {
    out.push_back(make(0));
    for (const auto& d : data) {
      for (const auto& s : d.train) out[0].train.push_back(out[0].model.prepare(s, d.task.vocabulary));
      for (const auto& s : d.validation) out[0].validation.push_back(out[0].model.prepare(s, d.task.vocabulary));
    }
    return out;
  }
  for (const auto& d : data) {
    auto c = make(d.id);
    for (const auto& s : d.train) c.train.push_back(c.model.prepare(s, d.task.vocabulary));
    for (const auto& s : d.validation) c.validation.push_back(c.model.prepare(s, d.task.vocabulary));
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------- checkpoints

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::string client_file(std::size_t id, const char* part) {
  return "client_" + std::to_string(id) + "_" + part + ".bin";
}

}  // namespace

void write_checkpoint(const std::filesystem::path& dir, std::size_t round,
                      std::vector<FederatedClient>& clients, const TensorList& global_trunk) {
  namespace fs = std::filesystem;
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  write_tensor_file(tmp / "global_trunk.bin", global_trunk);
  for (auto& c : clients) {
    write_tensor_file(tmp / client_file(c.id, "stem"), c.model.stem());
    write_tensor_file(tmp / client_file(c.id, "trunk"), c.model.trunk());
    write_tensor_file(tmp / client_file(c.id, "head"), c.model.head());
    write_tensor_file(tmp / client_file(c.id, "adam"), c.optimizer.to_tensors(c.model));
  }
  ordered_json meta;
  meta["round"] = round;
  meta["clients"] = clients.size();
  meta["trunk_hash"] = hash_hex(tensor_hash(global_trunk));
  write_text(tmp / "meta.json", meta.dump(2) + "\n");
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

std::size_t read_checkpoint(const std::filesystem::path& dir, std::vector<FederatedClient>& clients,
                            TensorList& global_trunk) {
  std::ifstream f(dir / "meta.json");
  if (!f) throw std::runtime_error("no checkpoint in " + dir.string());
  const auto meta = json::parse(f);
  if (meta.at("clients").get<std::size_t>() != clients.size()) {
    throw std::runtime_error("checkpoint client count does not match the config");
  }
  TensorList trunk = read_tensor_file(dir / "global_trunk.bin");
  if (hash_hex(tensor_hash(trunk)) != meta.at("trunk_hash").get<std::string>()) {
    throw std::runtime_error("checkpoint trunk hash mismatch");
  }
  for (auto& c : clients) {
    load_into(c.model.stem_params(), read_tensor_file(dir / client_file(c.id, "stem")));
    load_into(c.model.trunk_params(), read_tensor_file(dir / client_file(c.id, "trunk")));
    load_into(c.model.head_params(), read_tensor_file(dir / client_file(c.id, "head")));
    c.optimizer.load(c.model, read_tensor_file(dir / client_file(c.id, "adam")));
  }
  global_trunk = std::move(trunk);
  return meta.at("round").get<std::size_t>();
}

// ---------------------------------------------------------------- metrics

ordered_json record_to_json(const RoundMetrics& m) {
  ordered_json j;
  j["round"] = m.round;
  j["mode"] = to_string(m.mode);
  j["weights"] = m.weights;
  ordered_json sims = ordered_json::array();
  for (const auto& s : m.similarity) {
    ordered_json rows = ordered_json::array();
    for (std::size_t r = 0; r < s.rows(); ++r) rows.push_back(std::vector<double>(s.row(r).begin(), s.row(r).end()));
    sims.push_back(std::move(rows));
  }
  j["similarity"] = std::move(sims);
  j["trunk_hash"] = m.trunk_hash;
  ordered_json clients = ordered_json::array();
  for (const auto& c : m.clients) {
    ordered_json cj;
    cj["client_id"] = c.client_id;
    cj["train_loss"] = c.train_loss;
    cj["val_loss"] = c.val_loss;
    cj["tokens"] = c.tokens_processed;
    cj["density_overall"] = c.density.overall;
    cj["density_per_layer"] = c.density.per_layer;
    ordered_json sel = ordered_json::array();
    for (std::size_t l = 0; l < c.selection.layers(); ++l) {
      const auto row = c.selection.row(l);
      sel.push_back(std::vector<std::uint64_t>(row.begin(), row.end()));
    }
    cj["selection"] = std::move(sel);
    clients.push_back(std::move(cj));
  }
  j["clients"] = std::move(clients);
  return j;
}

RoundMetrics record_from_json(const json& j) {
  RoundMetrics m;
  m.round = j.at("round").get<std::size_t>();
  m.mode = parse_aggregation_mode(j.at("mode").get<std::string>());
  m.weights = j.at("weights").get<std::vector<std::vector<double>>>();
  for (const auto& s : j.at("similarity")) {
    const auto rows = s.get<std::vector<std::vector<double>>>();
    Matrix mat(rows.size(), rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != rows.size()) throw std::invalid_argument("record: similarity is not square");
      for (std::size_t c = 0; c < rows.size(); ++c) mat(r, c) = rows[r][c];
    }
    m.similarity.push_back(std::move(mat));
  }
  m.trunk_hash = j.at("trunk_hash").get<std::string>();
  for (const auto& cj : j.at("clients")) {
    ClientRoundMetrics c;
    c.client_id = cj.at("client_id").get<std::size_t>();
    c.train_loss = cj.at("train_loss").get<double>();
    c.val_loss = cj.at("val_loss").get<double>();
    c.tokens_processed = cj.at("tokens").get<std::uint64_t>();
    c.density.overall = cj.at("density_overall").get<double>();
    c.density.per_layer = cj.at("density_per_layer").get<std::vector<double>>();
    const auto sel = cj.at("selection").get<std::vector<std::vector<std::uint64_t>>>();
    c.selection = SelectionMatrix(sel.size(), sel.empty() ? 0 : sel[0].size());
    for (std::size_t l = 0; l < sel.size(); ++l) {
      for (std::size_t k = 0; k < sel[l].size(); ++k) c.selection.at(l, k) = sel[l][k];
    }
    m.clients.push_back(std::move(c));
  }
  return m;
}

std::vector<RoundMetrics> read_records(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::vector<RoundMetrics> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) out.push_back(record_from_json(json::parse(line)));
  }
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string metrics_csv(const std::vector<RoundMetrics>& records) {
  if (records.empty() || records.front().clients.empty()) {
    throw std::invalid_argument("metrics_csv: need at least one record");
  }
  const auto& shape = records.front().clients.front().selection;
  const std::size_t layers = shape.layers();
  const std::size_t experts = shape.experts();
  std::ostringstream out;
  out << "round,client_id,val_loss,density_overall";
  for (std::size_t l = 0; l < layers; ++l) out << ",density_layer_" << l;
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t k = 0; k < experts; ++k) out << ",count_l" << l << "_e" << k;
  }
  out << '\n';
  for (const auto& r : records) {
    for (const auto& c : r.clients) {
      if (c.selection.layers() != layers || c.selection.experts() != experts) {
        throw std::invalid_argument("metrics_csv: selection shape changed between records");
      }
      out << r.round << ',' << c.client_id << ',' << fmt(c.val_loss) << ',' << fmt(c.density.overall);
      for (std::size_t l = 0; l < layers; ++l) out << ',' << fmt(c.density.per_layer.at(l));
      for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t k = 0; k < experts; ++k) out << ',' << c.selection.at(l, k);
      }
      out << '\n';
    }
  }
  return out.str();
}

double final_mean_val_loss(const std::vector<RoundMetrics>& records) {
  if (records.empty() || records.back().clients.empty()) {
    throw std::invalid_argument("final_mean_val_loss: no records");
  }
  double sum = 0.0;
  for (const auto& c : records.back().clients) sum += c.val_loss;
  return sum / static_cast<double>(records.back().clients.size());
}

ordered_json metrics_summary(const std::vector<RoundMetrics>& records) {
  if (records.empty()) throw std::invalid_argument("metrics_summary: need at least one record");
  const auto& last = records.back();
  ordered_json j;
  j["rounds"] = records.size();
  j["final_round"] = last.round;
  j["aggregation"] = to_string(last.mode);
  ordered_json losses = ordered_json::object();
  for (const auto& c : last.clients) losses[std::to_string(c.client_id)] = c.val_loss;
  j["final_val_loss"] = std::move(losses);
  j["final_mean_val_loss"] = final_mean_val_loss(records);

  double density_sum = 0.0;
  std::size_t rows = 0;
  std::vector<double> per_layer;
  for (const auto& r : records) {
    for (const auto& c : r.clients) {
      density_sum += c.density.overall;
      ++rows;
      per_layer.resize(c.density.per_layer.size(), 0.0);
      for (std::size_t l = 0; l < per_layer.size(); ++l) per_layer[l] += c.density.per_layer[l];
    }
  }
  for (auto& v : per_layer) v /= static_cast<double>(rows);
  j["mean_density"] = density_sum / static_cast<double>(rows);
  j["mean_density_per_layer"] = per_layer;
  j["final_weights"] = last.weights;
  ordered_json sims = ordered_json::array();
  for (const auto& s : last.similarity) {
    ordered_json m = ordered_json::array();
    for (std::size_t r = 0; r < s.rows(); ++r) m.push_back(std::vector<double>(s.row(r).begin(), s.row(r).end()));
    sims.push_back(std::move(m));
  }
  j["final_similarity"] = std::move(sims);
  j["final_trunk_hash"] = last.trunk_hash;
  return j;
}

void export_metrics(const std::vector<RoundMetrics>& records, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "metrics.csv", metrics_csv(records));
  write_text(dir / "summary.json", metrics_summary(records).dump(2) + "\n");
}

// ---------------------------------------------------------------- driver

namespace {

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::vector<std::string> out;
  std::ifstream f(path, std::ios::binary);
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  write_text(path, text);
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  validate(config);
  if (options.resume && !options.out_dir) throw std::invalid_argument("resume needs an output directory");
  const auto provider = make_provider(config);
  const auto seeds = experiment_seeds(config.seed);
  const auto data = config.data_dir.empty()
                        ? generate_clients(config.clients, config.data, config.dims, *provider, seeds.data)
                        : read_client_data(config.data_dir);
  if (data.size() != config.clients) {
    throw std::invalid_argument("data has " + std::to_string(data.size()) + " clients, config says " +
                                std::to_string(config.clients));
  }

  ExperimentResult result;
  result.clients = build_clients(config, data, provider);
  result.global_trunk = result.clients.front().model.trunk();
  const RoundOptions round_options{effective_aggregation(config), config.parallel};

  std::size_t first_round = 0;
  std::vector<std::string> record_lines, round_lines;
  if (options.out_dir) {
    const auto& out = *options.out_dir;
    std::filesystem::create_directories(out);
    if (options.resume) {
      const std::size_t done = read_checkpoint(out / "checkpoint", result.clients, result.global_trunk);
      for (auto& r : read_records(out / "records.jsonl")) {
        if (r.round <= done) result.rounds.push_back(std::move(r));
      }
      if (result.rounds.size() != done + 1) throw std::runtime_error("records do not cover the checkpoint");
      for (const auto& r : result.rounds) record_lines.push_back(record_to_json(r).dump());
      for (auto& l : read_lines(out / "rounds.jsonl")) {
        if (json::parse(l).at("round").get<std::size_t>() <= done) round_lines.push_back(std::move(l));
      }
      first_round = done + 1;
    }
    write_text(out / "config.json", config_to_json(config).dump(2) + "\n");
    write_lines(out / "records.jsonl", record_lines);
    write_lines(out / "rounds.jsonl", round_lines);
  }

  for (std::size_t r = first_round; r < config.rounds; ++r) {
    RoundMetrics m = run_round(result.clients, result.global_trunk, r, round_options);
    if (options.out_dir) {
      const auto& out = *options.out_dir;
      std::ofstream(out / "records.jsonl", std::ios::app | std::ios::binary) << record_to_json(m).dump() << '\n';
      auto line = json::parse(round_log_line(m));
      line["wall_seconds"] = m.wall_seconds;
      std::ofstream(out / "rounds.jsonl", std::ios::app | std::ios::binary) << line.dump() << '\n';
    }
    result.rounds.push_back(std::move(m));
    if (options.out_dir) {
      export_metrics(result.rounds, *options.out_dir);
      const bool due = config.checkpoint_every > 0 && (r + 1) % config.checkpoint_every == 0;
      if (due || r + 1 == config.rounds) {
        write_checkpoint(*options.out_dir / "checkpoint", r, result.clients, result.global_trunk);
      }
    }
  }
  return result;
}

}  // namespace fedmoe
