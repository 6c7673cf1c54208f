#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>

#include "fedmoe/kernels.hpp"
#include "fedmoe/scene.hpp"

using namespace fedmoe;

namespace {

const std::vector<std::string> kVocab{"drawer", "cup", "plate", "table", "wall", "sponge"};

Matrix noise_tokens(Rng& rng, std::size_t n, std::size_t d, double scale) {
  Matrix m(n, d);
  for (auto& v : m.values()) v = rng.normal(0.0, scale);
  return m;
}

void set_row(Matrix& m, std::size_t r, const std::vector<double>& v) {
  std::copy(v.begin(), v.end(), m.row(r).begin());
}

}  // namespace

TEST_CASE("text embeddings are unit norm and deterministic") {
  SyntheticEmbeddingProvider p(16, 4);
  auto a = p.text_embed("Drawer");
  CHECK(l2_norm(a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(a == p.text_embed("drawer"));
  CHECK(a == SyntheticEmbeddingProvider(16, 4).text_embed("drawer"));
  CHECK(a != SyntheticEmbeddingProvider(16, 5).text_embed("drawer"));
  CHECK(cosine_sim(a, p.text_embed("cup")) < 0.8);
}

TEST_CASE("extract target entities") {
  CHECK(extract_target_entities("close the drawer", std::vector<std::string>{"drawer", "cup"}) ==
        std::vector<std::string>{"drawer"});
  CHECK(extract_target_entities("put the cup on the plate", std::vector<std::string>{"plate", "cup"}) ==
        std::vector<std::string>{"cup", "plate"});
  CHECK(extract_target_entities("wave hello", std::vector<std::string>{"drawer"}).empty());
  // whole words only, case-insensitive
  CHECK(extract_target_entities("Open the DRAWERS", std::vector<std::string>{"drawer"}).empty());
  CHECK(extract_target_entities("Open the DRAWER.", std::vector<std::string>{"drawer"}) ==
        std::vector<std::string>{"drawer"});
  CHECK(extract_target_entities("wipe the dinner plate", std::vector<std::string>{"plate", "dinner plate"}) ==
        std::vector<std::string>{"dinner plate", "plate"});
  CHECK_THROWS_AS(extract_target_entities("x", std::vector<std::string>{}), std::invalid_argument);
}

TEST_CASE("categorize objects") {
  SyntheticEmbeddingProvider p(16, 1);
  std::vector<Detection> dets{{"drawer", true, 0.9}, {"table", false, 0.9}};
  auto g = categorize_objects(std::vector<std::string>{"drawer"}, dets, p, 0.8);
  CHECK(g.targets == std::vector<std::string>{"drawer"});
  CHECK(g.surrounding.empty());
  CHECK(g.background == std::vector<std::string>{"table"});

  std::vector<Detection> more{{"cup", true, 0.9}, {"sponge", true, 0.2}, {"wall", false, 1.0}};
  auto none = categorize_objects(std::vector<std::string>{}, more, p, 0.8);
  CHECK(none.targets.empty());
  CHECK(none.surrounding == std::vector<std::string>{"cup"});
  CHECK(none.background == std::vector<std::string>{"sponge", "wall"});

  // a repeated label lands in one group only
  std::vector<Detection> dup{{"cup", true, 0.9}, {"cup", false, 0.9}};
  auto d = categorize_objects(std::vector<std::string>{"cup"}, dup, p, 0.8);
  CHECK(d.targets == std::vector<std::string>{"cup"});
  CHECK(d.background.empty());

  CHECK_THROWS_AS(categorize_objects({}, dets, p, 1.0), std::invalid_argument);
}

TEST_CASE("assign tokens to groups") {
  SyntheticEmbeddingProvider p(16, 2);
  Rng rng(3);

  SUBCASE("only the target group takes everything") {
    Matrix tokens = noise_tokens(rng, 8, 16, 1.0);
    ObjectGroups g{{"drawer"}, {}, {}};
    auto a = assign_tokens_to_groups(tokens, g, p, 8);
    CHECK(a.targets.size() == 8);
    CHECK(a.remaining.empty());
  }

  SUBCASE("a token equal to the target embedding ranks first") {
    Matrix tokens = noise_tokens(rng, 12, 16, 1.0);
    set_row(tokens, 7, p.text_embed("drawer"));
    ObjectGroups g{{"drawer"}, {"cup"}, {}};
    auto a = assign_tokens_to_groups(tokens, g, p, 3);
    CHECK(a.targets.front() == 7);
  }

  SUBCASE("greedy priority exhaustion over 20 tokens") {
    Matrix tokens = noise_tokens(rng, 20, 16, 1.0);
    ObjectGroups g{{"drawer"}, {"cup"}, {"table"}};
    auto a = assign_tokens_to_groups(tokens, g, p, 8);
    CHECK(a.targets.size() == 8);
    CHECK(a.surrounding.size() == 8);
    CHECK(a.background.size() == 4);
    CHECK(a.remaining.empty());
    std::set<std::size_t> all(a.targets.begin(), a.targets.end());
    all.insert(a.surrounding.begin(), a.surrounding.end());
    all.insert(a.background.begin(), a.background.end());
    CHECK(all.size() == 20);
  }

  CHECK_THROWS_AS(assign_tokens_to_groups(Matrix(3, 16), ObjectGroups{}, p, 0), std::invalid_argument);
}

TEST_CASE("enhance group tokens") {
  Rng rng(4);
  DGMoEConfig cfg;
  cfg.dim = 8;
  cfg.experts = 1;
  cfg.hidden = 32;
  cfg.threshold_init = -100.0;
  DGMoELayer moe("stem.group_moe", -1, 0, cfg, rng);

  Matrix empty(0, 8);
  CHECK(enhance_group_tokens(empty, moe, nullptr).rows() == 0);

  Matrix one = noise_tokens(rng, 1, 8, 1.0);
  auto out = enhance_group_tokens(one, moe, nullptr);
  auto expected = moe.experts[0].forward(one);
  CHECK(out == expected);  // softmax over one expert is exactly 1

  Matrix eight = noise_tokens(rng, 8, 8, 1.0);
  SelectionMatrix counts(1, 1);
  auto y = enhance_group_tokens(eight, moe, &counts);
  CHECK(y.rows() == 8);
  CHECK(y.cols() == 8);
  CHECK(counts.total() == 8);
}

TEST_CASE("parse scene") {
  const std::size_t d = 16;
  SyntheticEmbeddingProvider p(d, 9);
  Rng rng(10);
  DGMoEConfig cfg;
  cfg.dim = d;
  cfg.experts = 4;
  cfg.hidden = 4 * d;
  DGMoELayer moe("stem.group_moe", -1, 0, cfg, rng);
  Matrix proprio = noise_tokens(rng, 1, d, 1.0);

  Observation obs;
  obs.tokens = noise_tokens(rng, 24, d, 0.1);
  const std::vector<std::pair<std::string, bool>> objects{{"cup", true}, {"plate", true}, {"table", false}};
  std::size_t row = 0;
  for (const auto& [label, fg] : objects) {
    auto e = p.text_embed(label);
    for (int rep = 0; rep < 3; ++rep, ++row) {
      for (std::size_t j = 0; j < d; ++j) obs.tokens(row * 2, j) += e[j];
    }
    obs.detections.push_back({label, fg, 0.9});
  }
  const std::string instruction = "pick up the cup";

  SUBCASE("disabled parsing is a pass-through concatenation") {
    SceneConfig sc;
    sc.enabled = false;
    auto parsed = parse_scene(obs, instruction, proprio, kVocab, p, sc, nullptr);
    CHECK(parsed.tokens == vstack(obs.tokens, proprio));
    CHECK(parsed.plan.grouped == 0);
  }

  SUBCASE("no detections leaves every token in the remaining set") {
    Observation bare{obs.tokens, {}};
    auto parsed = parse_scene(bare, instruction, proprio, kVocab, p, SceneConfig{}, &moe);
    CHECK(parsed.tokens == vstack(obs.tokens, proprio));
    CHECK(parsed.plan.assignment.remaining.size() == 24);
  }

  SUBCASE("full pipeline keeps token count and a consistent record") {
    SelectionMatrix counts(1, 4);
    auto parsed = parse_scene(obs, instruction, proprio, kVocab, p, SceneConfig{}, &moe, &counts);
    CHECK(parsed.tokens.rows() == 25);
    CHECK(parsed.plan.groups.targets == std::vector<std::string>{"cup"});
    CHECK(parsed.plan.groups.surrounding == std::vector<std::string>{"plate"});
    CHECK(parsed.plan.groups.background == std::vector<std::string>{"table"});
    const auto& a = parsed.plan.assignment;
    CHECK(a.targets.size() == 8);
    CHECK(a.surrounding.size() == 8);
    CHECK(a.background.size() == 8);
    CHECK(a.remaining.empty());
    // the object's own tokens win its group
    std::set<std::size_t> cup(a.targets.begin(), a.targets.begin() + 3);
    CHECK(cup == std::set<std::size_t>{0, 2, 4});

    std::vector<std::size_t> sorted = parsed.plan.order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
    CHECK(counts.total() >= 24);

    // the first row is the enhanced top target token
    auto enhanced = moe.forward(gather_rows(obs.tokens, a.targets), nullptr, nullptr, nullptr).tokens;
    for (std::size_t j = 0; j < d; ++j) CHECK(parsed.tokens(0, j) == enhanced(0, j));
    for (std::size_t j = 0; j < d; ++j) CHECK(parsed.tokens(24, j) == proprio(0, j));

    // deterministic
    auto again = parse_scene(obs, instruction, proprio, kVocab, p, SceneConfig{}, &moe);
    CHECK(again.tokens == parsed.tokens);
    CHECK(again.plan == parsed.plan);
  }

  SUBCASE("missing MoE is an error when parsing is on") {
    CHECK_THROWS_AS(parse_scene(obs, instruction, proprio, kVocab, p, SceneConfig{}, nullptr),
                    std::invalid_argument);
  }
}

TEST_CASE("token conservation and disjointness over random scenes") {
  const std::size_t d = 8;
  SyntheticEmbeddingProvider p(d, 12);
  Rng rng(13);
  DGMoEConfig cfg;
  cfg.dim = d;
  cfg.experts = 3;
  cfg.hidden = 16;
  DGMoELayer moe("m", -1, 0, cfg, rng);
  for (int trial = 0; trial < 200; ++trial) {
    Observation obs;
    obs.tokens = noise_tokens(rng, 1 + rng.uniform_int(0, 29), d, 1.0);
    const std::size_t n_det = rng.uniform_int(0, 5);
    for (std::size_t i = 0; i < n_det; ++i) {
      obs.detections.push_back({kVocab[rng.uniform_int(0, kVocab.size() - 1)], rng.uniform() < 0.6,
                                rng.uniform()});
    }
    const std::string instr = "move the " + kVocab[rng.uniform_int(0, kVocab.size() - 1)];
    SceneConfig sc;
    sc.enabled = rng.uniform() < 0.8;
    sc.tokens_per_group = 1 + rng.uniform_int(0, 9);
    Matrix proprio = noise_tokens(rng, 1 + rng.uniform_int(0, 1), d, 1.0);
    auto parsed = parse_scene(obs, instr, proprio, kVocab, p, sc, &moe);
    CHECK(parsed.tokens.rows() == obs.tokens.rows() + proprio.rows());

    const auto& g = parsed.plan.groups;
    std::set<std::string> labels;
    for (const auto* list : {&g.targets, &g.surrounding, &g.background}) {
      for (const auto& l : *list) CHECK(labels.insert(l).second);
    }
    const auto& a = parsed.plan.assignment;
    std::set<std::size_t> seen;
    for (const auto* list : {&a.targets, &a.surrounding, &a.background, &a.remaining}) {
      for (std::size_t i : *list) CHECK(seen.insert(i).second);
    }
    CHECK(seen.size() == obs.tokens.rows());
  }
}
