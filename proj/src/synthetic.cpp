#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "fedmoe/harness.hpp"
#include "fedmoe/random.hpp"

namespace fedmoe {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

const std::vector<std::vector<std::string>> kClusterVocab{
    {"cup", "plate", "bowl", "sponge", "kettle", "spoon", "towel", "jar"},
    {"drawer", "hammer", "wrench", "box", "screw", "lamp", "block", "bolt"},
    {"ball", "cone", "ring", "peg", "cube", "tray", "bin", "rod"},
    {"book", "pen", "mug", "phone", "stapler", "folder", "tape", "clip"},
};

const std::vector<std::string> kVerbs{"pick up", "push", "open", "wipe", "lift", "close", "turn", "grab"};

std::vector<std::string> cluster_vocabulary(std::size_t cluster) {
  if (cluster < kClusterVocab.size()) return kClusterVocab[cluster];
  std::vector<std::string> v;
  for (int i = 0; i < 8; ++i) v.push_back("item" + std::to_string(cluster) + "x" + std::to_string(i));
  return v;
}

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = rng.normal(0.0, stddev);
  return m;
}

std::vector<double> gaussian_vec(Rng& rng, std::size_t n, double stddev) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return v;
}

ordered_json matrix_to_json(const Matrix& m) {
  ordered_json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  j["values"] = m.storage();
  return j;
}

Matrix matrix_from_json(const json& j) {
  return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                j.at("values").get<std::vector<double>>());
}

struct SceneObject {
  std::string label;
  bool foreground;
  double confidence;
  std::vector<double> pose;
  std::vector<double> drift;
};

}  // namespace

std::vector<ClientData> generate_clients(std::size_t n_clients, const DataConfig& cfg,
                                         const ModelDims& dims, const EmbeddingProvider& provider,
                                         std::uint64_t seed) {
  if (n_clients == 0) throw std::invalid_argument("generate_clients: need at least one client");
  if (cfg.clusters == 0 || cfg.clusters > n_clients) {
    throw std::invalid_argument("generate_clients: clusters must lie in [1, clients]");
  }
  if (cfg.episodes_min == 0 || cfg.episodes_min > cfg.episodes_max || cfg.steps_min == 0 ||
      cfg.steps_min > cfg.steps_max || cfg.sample_stride == 0) {
    throw std::invalid_argument("generate_clients: invalid episode or step range");
  }
  if (!(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0) || cfg.action_noise < 0.0 ||
      cfg.token_noise < 0.0 || cfg.cluster_perturbation < 0.0 || cfg.scene_context < 0.0) {
    throw std::invalid_argument("generate_clients: invalid noise or split setting");
  }
  if (provider.dim() != dims.dim) throw std::invalid_argument("generate_clients: provider width != dim");
  if (dims.image_tokens < 5) throw std::invalid_argument("generate_clients: need at least 5 image tokens");

  const std::size_t d = dims.dim;
  const std::size_t out = dims.action_steps * dims.action_dim;
  const double pose_std = 0.5 / std::sqrt(static_cast<double>(d));
  const std::size_t per_object = std::min<std::size_t>(3, dims.image_tokens / 5);

  std::vector<Matrix> cluster_object, cluster_proprio;
  std::vector<std::vector<double>> cluster_context;
  for (std::size_t c = 0; c < cfg.clusters; ++c) {
    Rng rng(derive_seed(seed, 1, c));
    cluster_object.push_back(gaussian(rng, out, d, 1.0));
    cluster_proprio.push_back(gaussian(rng, out, dims.proprio_dim, 0.3));
    cluster_context.push_back(gaussian_vec(rng, d, cfg.scene_context / std::sqrt(static_cast<double>(d))));
  }

  std::vector<ClientData> clients;
  std::vector<std::size_t> seen_in_cluster(cfg.clusters, 0);
  for (std::size_t i = 0; i < n_clients; ++i) {
    Rng rng(derive_seed(seed, 2, i));
    ClientData cd;
    cd.id = i;
    auto& task = cd.task;
    task.cluster = i * cfg.clusters / n_clients;
    task.vocabulary = cluster_vocabulary(task.cluster);
    task.context = cluster_context[task.cluster];
    task.target = task.vocabulary[seen_in_cluster[task.cluster]++ % task.vocabulary.size()];
    task.verb = kVerbs[i % kVerbs.size()];
    task.object_map = cluster_object[task.cluster];
    add_inplace(task.object_map, gaussian(rng, out, d, 1.0), cfg.cluster_perturbation);
    task.proprio_map = cluster_proprio[task.cluster];
    add_inplace(task.proprio_map, gaussian(rng, out, dims.proprio_dim, 0.3), cfg.cluster_perturbation);
    task.noise = cfg.action_noise;

    std::vector<std::string> others;
    for (const auto& v : task.vocabulary) {
      if (v != task.target) others.push_back(v);
    }
    const std::string instruction = task.verb + " the " + task.target;

    const std::size_t episodes = rng.uniform_int(cfg.episodes_min, cfg.episodes_max);
    std::vector<std::size_t> episode_order(episodes);
    std::iota(episode_order.begin(), episode_order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(episode_order));
    const auto n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(cfg.validation_fraction * static_cast<double>(episodes))));
    std::vector<bool> is_val(episodes, false);
    for (std::size_t e = 0; e < std::min(n_val, episodes - 1); ++e) is_val[episode_order[e]] = true;

    for (std::size_t e = 0; e < episodes; ++e) {
      const std::size_t steps = rng.uniform_int(cfg.steps_min, cfg.steps_max);
      auto pick = others;
      rng.shuffle(std::span<std::string>(pick));
      std::vector<SceneObject> objects;
      objects.push_back({task.target, true, rng.uniform(0.7, 1.0), {}, {}});
      for (std::size_t o = 0; o < 2; ++o) objects.push_back({pick[o], true, rng.uniform(0.6, 1.0), {}, {}});
      for (std::size_t o = 2; o < 4; ++o) objects.push_back({pick[o], false, rng.uniform(0.3, 1.0), {}, {}});
      for (auto& obj : objects) {
        obj.pose = gaussian_vec(rng, d, pose_std);
        obj.drift = gaussian_vec(rng, d, pose_std);
      }
      const auto prop_base = gaussian_vec(rng, dims.proprio_dim, 1.0);
      const auto prop_dir = gaussian_vec(rng, dims.proprio_dim, 1.0);

      for (std::size_t k = 0; k < steps; k += cfg.sample_stride) {
        const double phase = static_cast<double>(k) / static_cast<double>(steps);
        Sample s;
        s.instruction = instruction;
        s.observation.tokens = Matrix(dims.image_tokens, d);
        std::vector<std::size_t> slots(dims.image_tokens);
        std::iota(slots.begin(), slots.end(), std::size_t{0});
        rng.shuffle(std::span<std::size_t>(slots));

        std::size_t next = 0;
        std::vector<std::size_t> target_rows;
        std::vector<double> target_mean(d, 0.0);
        for (std::size_t o = 0; o < objects.size(); ++o) {
          const auto& obj = objects[o];
          const auto embed = provider.text_embed(obj.label);
          for (std::size_t r = 0; r < per_object; ++r) {
            const std::size_t row = slots[next++];
            for (std::size_t j = 0; j < d; ++j) {
              s.observation.tokens(row, j) =
                  task.context[j] + embed[j] + obj.pose[j] + phase * obj.drift[j] +
                  rng.normal(0.0, cfg.token_noise);
            }
            if (o == 0) {
              target_rows.push_back(row);
              for (std::size_t j = 0; j < d; ++j) target_mean[j] += s.observation.tokens(row, j);
            }
          }
        }
        for (; next < slots.size(); ++next) {
          for (std::size_t j = 0; j < d; ++j) {
            s.observation.tokens(slots[next], j) = task.context[j] + rng.normal(0.0, pose_std);
          }
        }
        for (auto& v : target_mean) v /= static_cast<double>(per_object);

        std::vector<std::size_t> det_order(objects.size());
        std::iota(det_order.begin(), det_order.end(), std::size_t{0});
        rng.shuffle(std::span<std::size_t>(det_order));
        for (std::size_t o : det_order) {
          s.observation.detections.push_back({objects[o].label, objects[o].foreground, objects[o].confidence});
        }

        s.proprioception.resize(dims.proprio_dim);
        for (std::size_t p = 0; p < dims.proprio_dim; ++p) s.proprioception[p] = prop_base[p] + phase * prop_dir[p];

        std::vector<double> action(out);
        for (std::size_t r = 0; r < out; ++r) {
          action[r] = dot(task.object_map.row(r), target_mean) + dot(task.proprio_map.row(r), s.proprioception);
          if (task.noise > 0.0) action[r] += rng.normal(0.0, task.noise);
        }
        s.actions = Matrix(dims.action_steps, dims.action_dim, std::move(action));

        std::sort(target_rows.begin(), target_rows.end());
        if (is_val[e]) {
          cd.validation.push_back(std::move(s));
          cd.validation_target_rows.push_back(std::move(target_rows));
        } else {
          cd.train.push_back(std::move(s));
          cd.train_target_rows.push_back(std::move(target_rows));
        }
      }
    }
    clients.push_back(std::move(cd));
  }
  return clients;
}

// ---------------------------------------------------------------- serialization

ordered_json sample_to_json(const Sample& s) {
  ordered_json j;
  j["instruction"] = s.instruction;
  ordered_json dets = ordered_json::array();
  for (const auto& d : s.observation.detections) {
    dets.push_back({{"label", d.label}, {"foreground", d.foreground}, {"confidence", d.confidence}});
  }
  j["detections"] = std::move(dets);
  j["tokens"] = matrix_to_json(s.observation.tokens);
  j["proprio"] = s.proprioception;
  j["actions"] = matrix_to_json(s.actions);
  return j;
}

Sample sample_from_json(const json& j) {
  Sample s;
  s.instruction = j.at("instruction").get<std::string>();
  for (const auto& d : j.at("detections")) {
    s.observation.detections.push_back(
        {d.at("label").get<std::string>(), d.at("foreground").get<bool>(), d.at("confidence").get<double>()});
  }
  s.observation.tokens = matrix_from_json(j.at("tokens"));
  s.proprioception = j.at("proprio").get<std::vector<double>>();
  s.actions = matrix_from_json(j.at("actions"));
  return s;
}

std::uint64_t dataset_hash(const ClientData& data) {
  std::uint64_t h = fnv1a64(std::to_string(data.id));
  for (const auto* split : {&data.train, &data.validation}) {
    for (const auto& s : *split) h = derive_seed(h, fnv1a64(sample_to_json(s).dump()));
    h = derive_seed(h, split->size());
  }
  return h;
}

namespace {

void write_samples(const std::filesystem::path& path, const std::vector<Sample>& samples,
                   const std::vector<std::vector<std::size_t>>& target_rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto j = sample_to_json(samples[i]);
    if (i < target_rows.size()) j["target_rows"] = target_rows[i];
    f << j.dump() << '\n';
  }
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

void read_samples(const std::filesystem::path& path, std::vector<Sample>& samples,
                  std::vector<std::vector<std::size_t>>& target_rows) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    samples.push_back(sample_from_json(j));
    target_rows.push_back(j.value("target_rows", std::vector<std::size_t>{}));
  }
}

}  // namespace

void write_client_data(const std::filesystem::path& dir, const std::vector<ClientData>& clients) {
  std::filesystem::create_directories(dir);
  for (const auto& c : clients) {
    const std::string stem = "client_" + std::to_string(c.id);
    ordered_json meta;
    meta["id"] = c.id;
    meta["cluster"] = c.task.cluster;
    meta["vocabulary"] = c.task.vocabulary;
    meta["context"] = c.task.context;
    meta["target"] = c.task.target;
    meta["verb"] = c.task.verb;
    meta["object_map"] = matrix_to_json(c.task.object_map);
    meta["proprio_map"] = matrix_to_json(c.task.proprio_map);
    meta["noise"] = c.task.noise;
    std::ofstream f(dir / (stem + ".json"), std::ios::binary);
    if (!f) throw std::runtime_error("cannot write client metadata in " + dir.string());
    f << meta.dump(2) << '\n';
    write_samples(dir / (stem + "_train.jsonl"), c.train, c.train_target_rows);
    write_samples(dir / (stem + "_val.jsonl"), c.validation, c.validation_target_rows);
  }
}

std::vector<ClientData> read_client_data(const std::filesystem::path& dir) {
  std::vector<ClientData> out;
  for (std::size_t id = 0;; ++id) {
    const std::string stem = "client_" + std::to_string(id);
    const auto meta_path = dir / (stem + ".json");
    if (!std::filesystem::exists(meta_path)) break;
    std::ifstream f(meta_path, std::ios::binary);
    const auto meta = json::parse(f);
    ClientData c;
    c.id = meta.at("id").get<std::size_t>();
    c.task.cluster = meta.at("cluster").get<std::size_t>();
    c.task.vocabulary = meta.at("vocabulary").get<std::vector<std::string>>();
    c.task.context = meta.at("context").get<std::vector<double>>();
    c.task.target = meta.at("target").get<std::string>();
    c.task.verb = meta.at("verb").get<std::string>();
    c.task.object_map = matrix_from_json(meta.at("object_map"));
    c.task.proprio_map = matrix_from_json(meta.at("proprio_map"));
    c.task.noise = meta.at("noise").get<double>();
    read_samples(dir / (stem + "_train.jsonl"), c.train, c.train_target_rows);
    read_samples(dir / (stem + "_val.jsonl"), c.validation, c.validation_target_rows);
    out.push_back(std::move(c));
  }
  if (out.empty()) throw std::runtime_error("no client data found in " + dir.string());
  return out;
}

}  // namespace fedmoe
