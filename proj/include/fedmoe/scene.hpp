#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedmoe/dgmoe.hpp"
#include "fedmoe/matrix.hpp"

namespace fedmoe {

struct Detection {
  std::string label;
  bool foreground = true;
  double confidence = 1.0;

  bool operator==(const Detection&) const = default;
};

/// What the camera saw: pre-encoded image tokens plus detector output.
struct Observation {
  Matrix tokens;  // t×D
  std::vector<Detection> detections;

  bool operator==(const Observation&) const = default;
};

/// Stand-in for the frozen vision/text encoders.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dim() const = 0;
  /// Unit-norm embedding of an object name.
  virtual std::vector<double> text_embed(std::string_view label) const = 0;
  virtual Matrix image_tokens(const Observation& observation) const = 0;
};

/// Text embeddings are seeded Gaussian directions keyed by the lower-cased
/// label; image tokens are taken from the observation as recorded.
class SyntheticEmbeddingProvider final : public EmbeddingProvider {
 public:
  SyntheticEmbeddingProvider(std::size_t dim, std::uint64_t seed);

  std::size_t dim() const override { return dim_; }
  std::vector<double> text_embed(std::string_view label) const override;
  Matrix image_tokens(const Observation& observation) const override;

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

struct ObjectGroups {
  std::vector<std::string> targets;
  std::vector<std::string> surrounding;
  std::vector<std::string> background;

  bool operator==(const ObjectGroups&) const = default;
};

/// Image-token indices per group, each list in descending similarity order.
struct TokenAssignment {
  std::vector<std::size_t> targets;
  std::vector<std::size_t> surrounding;
  std::vector<std::size_t> background;
  std::vector<std::size_t> remaining;  // original order

  bool operator==(const TokenAssignment&) const = default;
};

struct SceneConfig {
  bool enabled = true;
  double target_threshold = 0.8;
  double foreground_cutoff = 0.5;
  std::size_t tokens_per_group = 8;
};

std::vector<std::string> extract_target_entities(std::string_view instruction,
                                                 std::span<const std::string> vocabulary);

ObjectGroups categorize_objects(std::span<const std::string> entities,
                                std::span<const Detection> detections,
                                const EmbeddingProvider& provider, double target_threshold,
                                double foreground_cutoff = 0.5);

TokenAssignment assign_tokens_to_groups(const Matrix& image_tokens, const ObjectGroups& groups,
                                        const EmbeddingProvider& provider,
                                        std::size_t tokens_per_group);

/// One MoE pass over a group's tokens; an empty group is returned as is.
Matrix enhance_group_tokens(const Matrix& group_tokens, const DGMoELayer& moe,
                            SelectionMatrix* counts);

/// The parameter-free part of scene parsing: which tokens go where.
struct ScenePlan {
  ObjectGroups groups;
  TokenAssignment assignment;
  std::vector<std::size_t> order;  // image-token order in the parsed sequence
  std::size_t grouped = 0;         // leading entries of `order` that get enhanced

  bool operator==(const ScenePlan&) const = default;
};

ScenePlan plan_scene(const Matrix& image_tokens, std::span<const Detection> detections,
                     std::string_view instruction, std::span<const std::string> vocabulary,
                     const EmbeddingProvider& provider, const SceneConfig& config);

struct ParsedScene {
  Matrix tokens;  // enhanced TO, SO, BO tokens, remaining tokens, proprioception tokens
  ScenePlan plan;
};

/// `moe` may be null only when parsing is disabled.
ParsedScene parse_scene(const Observation& observation, std::string_view instruction,
                        const Matrix& proprioception_tokens,
                        std::span<const std::string> vocabulary, const EmbeddingProvider& provider,
                        const SceneConfig& config, const DGMoELayer* moe,
                        SelectionMatrix* counts = nullptr);

}  // namespace fedmoe
