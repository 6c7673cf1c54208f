#include "fedmoe/scene.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>
#include <unordered_set>

#include "fedmoe/kernels.hpp"
#include "fedmoe/random.hpp"

namespace fedmoe {

namespace {

std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<double> group_embedding(const std::vector<std::string>& labels,
                                    const EmbeddingProvider& provider) {
  std::vector<double> mean(provider.dim(), 0.0);
  for (const auto& label : labels) {
    auto e = provider.text_embed(label);
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += e[j];
  }
  const double norm = l2_norm(mean);
  if (norm > 0.0) {
    for (auto& v : mean) v /= norm;
  }
  return mean;
}

}  // namespace

// ---------------------------------------------------------------- provider

SyntheticEmbeddingProvider::SyntheticEmbeddingProvider(std::size_t dim, std::uint64_t seed)
    : dim_(dim), seed_(seed) {
  if (dim == 0) throw std::invalid_argument("SyntheticEmbeddingProvider: zero dimension");
}

std::vector<double> SyntheticEmbeddingProvider::text_embed(std::string_view label) const {
  Rng rng(derive_seed(seed_, fnv1a64(lower(label))));
  std::vector<double> v(dim_);
  double norm = 0.0;
  while (norm == 0.0) {
    for (auto& x : v) x = rng.normal();
    norm = l2_norm(v);
  }
  for (auto& x : v) x /= norm;
  return v;
}

Matrix SyntheticEmbeddingProvider::image_tokens(const Observation& observation) const {
  if (observation.tokens.cols() != dim_) {
    throw std::invalid_argument("image_tokens: observation width does not match provider");
  }
  return observation.tokens;
}

// ---------------------------------------------------------------- grouping

std::vector<std::string> extract_target_entities(std::string_view instruction,
                                                 std::span<const std::string> vocabulary) {
  if (vocabulary.empty()) throw std::invalid_argument("extract_target_entities: empty vocabulary");
  const auto words = words_of(instruction);
  struct Hit {
    std::size_t position;
    std::size_t vocab_index;
  };
  std::vector<Hit> hits;
  std::unordered_set<std::string> seen;
  for (std::size_t v = 0; v < vocabulary.size(); ++v) {
    const auto label_words = words_of(vocabulary[v]);
    if (label_words.empty() || !seen.insert(lower(vocabulary[v])).second) continue;
    for (std::size_t pos = 0; pos + label_words.size() <= words.size(); ++pos) {
      if (std::equal(label_words.begin(), label_words.end(), words.begin() + static_cast<std::ptrdiff_t>(pos))) {
        hits.push_back({pos, v});
        break;
      }
    }
  }
  std::stable_sort(hits.begin(), hits.end(),
                   [](const Hit& a, const Hit& b) { return a.position < b.position; });
  std::vector<std::string> out;
  out.reserve(hits.size());
  for (const auto& h : hits) out.push_back(vocabulary[h.vocab_index]);
  return out;
}

ObjectGroups categorize_objects(std::span<const std::string> entities,
                                std::span<const Detection> detections,
                                const EmbeddingProvider& provider, double target_threshold,
                                double foreground_cutoff) {
  if (!(target_threshold > 0.0 && target_threshold < 1.0)) {
    throw std::invalid_argument("categorize_objects: threshold must lie in (0, 1)");
  }
  std::vector<std::vector<double>> entity_embeds;
  entity_embeds.reserve(entities.size());
  for (const auto& e : entities) entity_embeds.push_back(provider.text_embed(e));

  ObjectGroups groups;
  std::unordered_set<std::string> placed;
  for (const auto& det : detections) {
    if (det.label.empty()) throw std::invalid_argument("categorize_objects: empty detection label");
    if (!placed.insert(lower(det.label)).second) continue;
    const auto embed = provider.text_embed(det.label);
    bool is_target = false;
    for (const auto& ee : entity_embeds) {
      if (cosine_sim(embed, ee) >= target_threshold) {
        is_target = true;
        break;
      }
    }
    if (is_target) {
      groups.targets.push_back(det.label);
    } else if (det.foreground && det.confidence >= foreground_cutoff) {
      groups.surrounding.push_back(det.label);
    } else {
      groups.background.push_back(det.label);
    }
  }
  return groups;
}

TokenAssignment assign_tokens_to_groups(const Matrix& image_tokens, const ObjectGroups& groups,
                                        const EmbeddingProvider& provider,
                                        std::size_t tokens_per_group) {
  if (tokens_per_group == 0) throw std::invalid_argument("assign_tokens_to_groups: m must be >= 1");
  if (image_tokens.rows() == 0) throw std::invalid_argument("assign_tokens_to_groups: no tokens");
  TokenAssignment out;
  std::vector<bool> taken(image_tokens.rows(), false);

  auto assign = [&](const std::vector<std::string>& labels, std::vector<std::size_t>& dst) {
    if (labels.empty()) return;
    const auto target = group_embedding(labels, provider);
    std::vector<std::size_t> candidates;
    std::vector<double> scores;
    for (std::size_t i = 0; i < image_tokens.rows(); ++i) {
      if (taken[i]) continue;
      candidates.push_back(i);
      scores.push_back(cosine_sim(image_tokens.row(i), target));
    }
    if (candidates.empty()) return;
    for (std::size_t pick : top_k_indices(scores, tokens_per_group)) {
      dst.push_back(candidates[pick]);
      taken[candidates[pick]] = true;
    }
  };
  assign(groups.targets, out.targets);
  assign(groups.surrounding, out.surrounding);
  assign(groups.background, out.background);
  for (std::size_t i = 0; i < image_tokens.rows(); ++i) {
    if (!taken[i]) out.remaining.push_back(i);
  }
  return out;
}

Matrix enhance_group_tokens(const Matrix& group_tokens, const DGMoELayer& moe,
                            SelectionMatrix* counts) {
  if (group_tokens.rows() == 0) return group_tokens;
  return moe.forward(group_tokens, nullptr, counts, nullptr).tokens;
}

ScenePlan plan_scene(const Matrix& image_tokens, std::span<const Detection> detections,
                     std::string_view instruction, std::span<const std::string> vocabulary,
                     const EmbeddingProvider& provider, const SceneConfig& config) {
  ScenePlan plan;
  if (!config.enabled) {
    plan.order.resize(image_tokens.rows());
    for (std::size_t i = 0; i < plan.order.size(); ++i) plan.order[i] = i;
    plan.assignment.remaining = plan.order;
    return plan;
  }
  const auto entities = extract_target_entities(instruction, vocabulary);
  plan.groups = categorize_objects(entities, detections, provider, config.target_threshold,
                                   config.foreground_cutoff);
  plan.assignment = assign_tokens_to_groups(image_tokens, plan.groups, provider,
                                            config.tokens_per_group);
  const auto& a = plan.assignment;
  plan.order.insert(plan.order.end(), a.targets.begin(), a.targets.end());
  plan.order.insert(plan.order.end(), a.surrounding.begin(), a.surrounding.end());
  plan.order.insert(plan.order.end(), a.background.begin(), a.background.end());
  plan.grouped = plan.order.size();
  plan.order.insert(plan.order.end(), a.remaining.begin(), a.remaining.end());
  return plan;
}

ParsedScene parse_scene(const Observation& observation, std::string_view instruction,
                        const Matrix& proprioception_tokens,
                        std::span<const std::string> vocabulary, const EmbeddingProvider& provider,
                        const SceneConfig& config, const DGMoELayer* moe, SelectionMatrix* counts) {
  const Matrix image = provider.image_tokens(observation);
  if (proprioception_tokens.cols() != image.cols()) {
    throw std::invalid_argument("parse_scene: proprioception tokens have the wrong width");
  }
  ParsedScene out;
  out.plan = plan_scene(image, observation.detections, instruction, vocabulary, provider, config);
  if (!config.enabled) {
    out.tokens = vstack(image, proprioception_tokens);
    return out;
  }
  if (!moe) throw std::invalid_argument("parse_scene: scene parsing needs a group MoE layer");
  const auto& a = out.plan.assignment;
  Matrix seq;
  for (const auto* group : {&a.targets, &a.surrounding, &a.background}) {
    seq = vstack(seq, enhance_group_tokens(gather_rows(image, *group), *moe, counts));
  }
  seq = vstack(seq, gather_rows(image, a.remaining));
  out.tokens = vstack(seq, proprioception_tokens);
  return out;
}

}  // namespace fedmoe
