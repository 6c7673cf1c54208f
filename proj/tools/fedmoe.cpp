// Command-line driver: generate synthetic client data, train, evaluate a
// checkpoint, and convert metric records.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedmoe/harness.hpp"

namespace fs = std::filesystem;
using namespace fedmoe;

namespace {

// Overrides collected from the command line; applied after the config file
// and --set, in that order.
struct Overrides {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::size_t> clients, rounds, epochs, batch, layers, experts, dim, checkpoint_every;
  std::optional<double> lr, huber_delta, lambda;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode, data_dir;
  bool no_iosp = false, no_dgmoe = false, no_eda = false, parallel = false;
};

void add_config_options(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config_file, "JSON config file")->check(CLI::ExistingFile);
  app->add_option("--set", o.sets, "Override one key, e.g. --set train.learning_rate=0.002");
  app->add_option("--clients", o.clients, "Number of clients N");
  app->add_option("--rounds", o.rounds, "Communication rounds T");
  app->add_option("--epochs", o.epochs, "Local epochs per round");
  app->add_option("--batch", o.batch, "Minibatch size");
  app->add_option("--layers", o.layers, "Trunk layers L");
  app->add_option("--experts", o.experts, "Experts per MoE layer K");
  app->add_option("--dim", o.dim, "Token width D");
  app->add_option("--lr", o.lr, "Adam learning rate");
  app->add_option("--huber-delta", o.huber_delta, "Huber loss threshold");
  app->add_option("--lambda", o.lambda, "Expert-gate scale");
  app->add_option("--seed", o.seed, "Experiment seed");
  app->add_option("--mode", o.mode, "eda, fedavg or centralized")
      ->check(CLI::IsMember({"eda", "fedavg", "centralized"}));
  app->add_option("--data-dir", o.data_dir, "Read client data written by `generate`");
  app->add_option("--checkpoint-every", o.checkpoint_every, "Checkpoint cadence in rounds (0: final only)");
  app->add_flag("--no-iosp", o.no_iosp, "Disable instruction-oriented scene parsing");
  app->add_flag("--no-dgmoe", o.no_dgmoe, "Replace every DGMoE with a dense FFN of matched size");
  app->add_flag("--no-eda", o.no_eda, "Aggregate with FedAvg");
  app->add_flag("--parallel", o.parallel, "Train clients on separate threads");
}

ExperimentConfig resolve(const Overrides& o, ExperimentConfig base = {}) {
  ExperimentConfig c = o.config_file.empty() ? base : config_from_json(nlohmann::json::parse(std::ifstream(o.config_file), nullptr, true, true), base);
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got " + s);
    set_config_value(c, s.substr(0, eq), s.substr(eq + 1));
  }
  if (o.clients) c.clients = *o.clients;
  if (o.rounds) c.rounds = *o.rounds;
  if (o.epochs) c.train.local_epochs = *o.epochs;
  if (o.batch) c.train.batch_size = *o.batch;
  if (o.layers) c.dims.layers = *o.layers;
  if (o.experts) c.dims.experts = *o.experts;
  if (o.dim) c.dims.dim = *o.dim;
  if (o.checkpoint_every) c.checkpoint_every = *o.checkpoint_every;
  if (o.lr) c.train.learning_rate = *o.lr;
  if (o.huber_delta) c.train.huber_delta = *o.huber_delta;
  if (o.lambda) c.model.lambda = *o.lambda;
  if (o.seed) c.seed = *o.seed;
  if (o.mode) c.mode = parse_experiment_mode(*o.mode);
  if (o.data_dir) c.data_dir = *o.data_dir;
  if (o.no_iosp) c.no_iosp = true;
  if (o.no_dgmoe) c.no_dgmoe = true;
  if (o.no_eda) c.no_eda = true;
  if (o.parallel) c.parallel = true;
  validate(c);
  return c;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

int cmd_generate(const Overrides& o, const fs::path& out) {
  const auto cfg = resolve(o);
  const auto provider = make_provider(cfg);
  const auto data = generate_clients(cfg.clients, cfg.data, cfg.dims, *provider, experiment_seeds(cfg.seed).data);
  write_client_data(out, data);
  write_json(out / "config.json", config_to_json(cfg));
  for (const auto& d : data) {
    std::cout << "client " << d.id << ": cluster " << d.task.cluster << ", task '" << d.task.verb << " the "
              << d.task.target << "', " << d.train.size() << " train / " << d.validation.size()
              << " validation samples, hash " << hash_hex(dataset_hash(d)) << '\n';
  }
  return 0;
}

int cmd_train(const Overrides& o, const fs::path& out, bool resume) {
  ExperimentConfig base;
  if (resume && o.config_file.empty() && fs::exists(out / "config.json")) base = load_config(out / "config.json");
  const auto cfg = resolve(o, base);
  RunOptions run;
  run.out_dir = out;
  run.resume = resume;
  const auto result = run_experiment(cfg, run);
  const auto& last = result.rounds.back();
  std::cout << "rounds " << result.rounds.size() << ", final mean val loss "
            << final_mean_val_loss(result.rounds) << ", trunk " << last.trunk_hash << '\n';
  for (const auto& c : last.clients) {
    std::cout << "  client " << c.client_id << ": val " << c.val_loss << ", density " << c.density.overall << '\n';
  }
  std::cout << "artifacts in " << out.string() << '\n';
  return 0;
}

int cmd_eval(const fs::path& run_dir) {
  const auto cfg = load_config(run_dir / "config.json");
  const auto provider = make_provider(cfg);
  const auto data = cfg.data_dir.empty()
                        ? generate_clients(cfg.clients, cfg.data, cfg.dims, *provider, experiment_seeds(cfg.seed).data)
                        : read_client_data(cfg.data_dir);
  auto clients = build_clients(cfg, data, provider);
  TensorList trunk;
  const std::size_t round = read_checkpoint(run_dir / "checkpoint", clients, trunk);
  nlohmann::ordered_json j;
  j["round"] = round;
  j["trunk_hash"] = hash_hex(tensor_hash(trunk));
  nlohmann::ordered_json losses = nlohmann::ordered_json::object();
  for (const auto& c : clients) {
    const double l = c.validation_loss();
    losses[std::to_string(c.id)] = l;
    std::cout << "client " << c.id << ": val " << l << '\n';
  }
  j["val_loss"] = std::move(losses);
  write_json(run_dir / "eval.json", j);
  return 0;
}

int cmd_export(const fs::path& in, const fs::path& out) {
  const auto records = read_records(in / "records.jsonl");
  export_metrics(records, out);
  std::cout << records.size() << " rounds exported to " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated mixture-of-experts policy training on synthetic robot tasks"};
  app.require_subcommand(1);

  Overrides gen_o, train_o;
  std::string gen_out = "data", train_out = "run", eval_dir = "run", export_in = "run", export_out;
  bool resume = false;

  auto* gen = app.add_subcommand("generate", "Write synthetic client datasets");
  add_config_options(gen, gen_o);
  gen->add_option("--out", gen_out, "Output directory");

  auto* train = app.add_subcommand("train", "Run an experiment");
  add_config_options(train, train_o);
  train->add_option("--out", train_out, "Output directory");
  train->add_flag("--resume", resume, "Continue from <out>/checkpoint");

  auto* eval = app.add_subcommand("eval", "Validation losses of a run's last checkpoint");
  eval->add_option("--out", eval_dir, "Run directory")->check(CLI::ExistingDirectory);

  auto* exp = app.add_subcommand("export", "Rebuild metrics.csv and summary.json from records.jsonl");
  exp->add_option("--in", export_in, "Run directory")->check(CLI::ExistingDirectory);
  exp->add_option("--out", export_out, "Destination (defaults to --in)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_generate(gen_o, gen_out);
    if (*train) return cmd_train(train_o, train_out, resume);
    if (*eval) return cmd_eval(eval_dir);
    if (*exp) return cmd_export(export_in, export_out.empty() ? export_in : export_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return EXIT_FAILURE;
  }
  return EXIT_FAILURE;
}
