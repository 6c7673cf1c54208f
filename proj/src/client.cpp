#include "fedmoe/client.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "fedmoe/random.hpp"

namespace fedmoe {

namespace {

DGMoEConfig moe_config(const ModelDims& dims, const ModelOptions& options, bool residual) {
  DGMoEConfig cfg;
  cfg.dim = dims.dim;
  cfg.experts = dims.experts;
  cfg.hidden = dims.ffn_mult * dims.dim;
  cfg.residual_gate = residual;
  cfg.lambda = options.lambda;
  cfg.ste_band = options.ste_band;
  cfg.threshold_init = options.threshold_init;
  cfg.router_init_scale = options.router_init_scale;
  return cfg;
}

Matrix leading_rows(const Matrix& m, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return gather_rows(m, idx);
}

void validate_dims(const ModelDims& d) {
  if (d.layers == 0 || d.experts == 0 || d.dim == 0 || d.heads == 0 || d.action_dim == 0 ||
      d.action_steps == 0 || d.proprio_dim == 0 || d.image_tokens == 0 || d.ffn_mult == 0) {
    throw std::invalid_argument("ClientModel: every dimension must be positive");
  }
  if (d.dim % d.heads != 0) throw std::invalid_argument("ClientModel: dim must divide by heads");
}

}  // namespace

ClientModel::ClientModel(const ModelDims& dims, const ModelOptions& options,
                         std::shared_ptr<const EmbeddingProvider> provider, std::uint64_t init_seed)
    : dims_(dims), options_(options), provider_(std::move(provider)) {
  validate_dims(dims_);
  if (!provider_ || provider_->dim() != dims_.dim) {
    throw std::invalid_argument("ClientModel: embedding provider width must equal dim");
  }
  Rng rng(init_seed);
  const std::size_t d = dims_.dim;
  const std::size_t s = dims_.sequence_length();

  proprio_embed_ = Linear("stem.proprio", -1, dims_.proprio_dim, d, rng);
  const DGMoEConfig stem_cfg = moe_config(dims_, options_, false);
  if (options_.use_dgmoe) {
    group_moe_.emplace("stem.group_moe", -1, 0, stem_cfg, rng);
  } else {
    group_dense_.emplace("stem.group_ffn", -1, d, matched_dense_hidden(stem_cfg), rng);
  }
  image_embed_ = Linear("stem.image", -1, d, d, rng);
  Matrix pos(s, d);
  for (auto& v : pos.values()) v = rng.normal(0.0, 0.1);
  position_ = Parameter("stem.position", -1, std::move(pos));

  blocks_.reserve(dims_.layers);
  for (std::size_t l = 0; l < dims_.layers; ++l) {
    const int tag = static_cast<int>(l);
    TrunkBlock b;
    b.ln1 = LayerNorm("trunk.ln1", tag, d);
    b.attn = MultiHeadAttention("trunk.attn", tag, d, dims_.heads, rng);
    b.ln2 = LayerNorm("trunk.ln2", tag, d);
    const DGMoEConfig cfg = moe_config(dims_, options_, l > 0);
    if (options_.use_dgmoe) {
      b.moe.emplace("trunk.moe", tag, l, cfg, rng);
    } else {
      b.dense.emplace("trunk.ffn", tag, d, matched_dense_hidden(cfg), rng);
    }
    blocks_.push_back(std::move(b));
  }

  final_norm_ = LayerNorm("head.norm", -1, d);
  pool_logits_ = Parameter("head.pool", -1, Matrix(1, s));
  head_out_ = Linear("head.out", -1, d, dims_.action_steps * dims_.action_dim, rng);
}

ScenePlan ClientModel::plan(const Sample& sample, std::span<const std::string> vocabulary) const {
  const Matrix image = provider_->image_tokens(sample.observation);
  return plan_scene(image, sample.observation.detections, sample.instruction, vocabulary,
                    *provider_, options_.scene);
}

PreparedSample ClientModel::prepare(const Sample& sample,
                                    std::span<const std::string> vocabulary) const {
  return PreparedSample{sample, plan(sample, vocabulary)};
}

RoutingStats ClientModel::make_stats() const {
  RoutingStats s;
  s.trunk = SelectionMatrix(dims_.layers, dims_.experts);
  s.stem = SelectionMatrix(1, dims_.experts);
  return s;
}

Matrix ClientModel::stem_forward(const PreparedSample& s, RoutingStats* stats, ForwardCache* cache,
                                 bool embed) const {
  const Sample& smp = s.sample;
  if (smp.proprioception.size() != dims_.proprio_dim) {
    throw std::invalid_argument("ClientModel: proprioception has the wrong length");
  }
  const Matrix image = provider_->image_tokens(smp.observation);
  if (image.rows() != dims_.image_tokens) {
    throw std::invalid_argument("ClientModel: observation has the wrong token count");
  }
  if (s.plan.order.size() != image.rows() || s.plan.grouped > image.rows()) {
    throw std::invalid_argument("ClientModel: scene plan does not match the observation");
  }
  const Matrix prop_in(1, dims_.proprio_dim, smp.proprioception);
  const Matrix prop = proprio_embed_.forward(prop_in, cache ? &cache->proprio : nullptr);

  Matrix ordered = gather_rows(image, s.plan.order);
  const std::size_t g = s.plan.grouped;
  if (cache) cache->grouped = g;
  if (g > 0) {
    // Token-wise MoE: one pass over the stacked groups equals one pass per group.
    const Matrix grouped = leading_rows(ordered, g);
    Matrix enhanced;
    if (group_moe_) {
      enhanced = group_moe_
                     ->forward(grouped, nullptr, stats ? &stats->stem : nullptr,
                               cache ? &cache->stem_moe : nullptr)
                     .tokens;
    } else {
      enhanced = group_dense_->forward(grouped, cache ? &cache->stem_dense : nullptr);
    }
    // Skip connection around the enhancement; the bare parse omits it.
    if (embed) add_inplace(enhanced, grouped);
    for (std::size_t r = 0; r < g; ++r) {
      std::copy(enhanced.row(r).begin(), enhanced.row(r).end(), ordered.row(r).begin());
    }
    if (stats) stats->stem_tokens += g;
  }
  if (!embed) return vstack(ordered, prop);

  Matrix x = vstack(image_embed_.forward(ordered, cache ? &cache->image : nullptr), prop);
  add_inplace(x, position_.value);
  return x;
}

Matrix ClientModel::parsed_sequence(const PreparedSample& sample) const {
  return stem_forward(sample, nullptr, nullptr, false);
}

Matrix ClientModel::forward(const PreparedSample& sample, RoutingStats* stats,
                            ForwardCache* cache) const {
  if (cache) cache->blocks.assign(blocks_.size(), BlockCache{});
  Matrix x = stem_forward(sample, stats, cache, true);

  std::optional<Matrix> carry;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const TrunkBlock& b = blocks_[l];
    BlockCache* bc = cache ? &cache->blocks[l] : nullptr;
    const Matrix a = b.ln1.forward(x, bc ? &bc->ln1 : nullptr);
    Matrix h = x;
    add_inplace(h, b.attn.forward(a, bc ? &bc->attn : nullptr));
    const Matrix n = b.ln2.forward(h, bc ? &bc->ln2 : nullptr);
    if (b.moe) {
      auto out = b.moe->forward(n, carry ? &*carry : nullptr, stats ? &stats->trunk : nullptr,
                                bc ? &bc->moe : nullptr);
      add_inplace(h, out.tokens);
      carry = std::move(out.scores);
    } else {
      add_inplace(h, b.dense->forward(n, bc ? &bc->dense : nullptr));
    }
    x = std::move(h);
  }
  if (stats) stats->trunk_tokens += x.rows();

  Matrix z = final_norm_.forward(x, cache ? &cache->final_norm : nullptr);
  const auto w = softmax(pool_logits_.value.values());
  Matrix pooled(1, dims_.dim);
  for (std::size_t p = 0; p < z.rows(); ++p) {
    for (std::size_t j = 0; j < z.cols(); ++j) pooled(0, j) += w[p] * z(p, j);
  }
  Matrix flat = head_out_.forward(pooled, cache ? &cache->head : nullptr);
  if (cache) {
    cache->normalized = std::move(z);
    cache->pool_weights = w;
  }
  return Matrix(dims_.action_steps, dims_.action_dim, flat.storage());
}

void ClientModel::backward(const ForwardCache& cache, const Matrix& d_actions) {
  require_shape(d_actions, dims_.action_steps, dims_.action_dim, "ClientModel::backward");
  const Matrix d_flat(1, d_actions.size(), d_actions.storage());
  const Matrix d_pooled = head_out_.backward(cache.head, d_flat);

  const Matrix& z = cache.normalized;
  const auto& w = cache.pool_weights;
  Matrix dz(z.rows(), z.cols());
  std::vector<double> dw(z.rows());
  double mix = 0.0;
  for (std::size_t p = 0; p < z.rows(); ++p) {
    for (std::size_t j = 0; j < z.cols(); ++j) dz(p, j) = w[p] * d_pooled(0, j);
    dw[p] = dot(z.row(p), d_pooled.row(0));
    mix += w[p] * dw[p];
  }
  for (std::size_t p = 0; p < z.rows(); ++p) pool_logits_.grad(0, p) += w[p] * (dw[p] - mix);

  Matrix dx = final_norm_.backward(cache.final_norm, dz);
  std::optional<Matrix> dcarry;
  for (std::size_t l = blocks_.size(); l-- > 0;) {
    TrunkBlock& b = blocks_[l];
    const BlockCache& bc = cache.blocks[l];
    Matrix dn;
    if (b.moe) {
      auto g = b.moe->backward(&bc.moe, dx, dcarry ? &*dcarry : nullptr);
      dn = std::move(g.tokens);
      dcarry = std::move(g.carry);
    } else {
      dn = b.dense->backward(bc.dense, dx);
    }
    Matrix dh = std::move(dx);
    add_inplace(dh, b.ln2.backward(bc.ln2, dn));
    dx = dh;
    add_inplace(dx, b.ln1.backward(bc.ln1, b.attn.backward(bc.attn, dh)));
  }

  add_inplace(position_.grad, dx);
  const std::size_t t = dims_.image_tokens;
  const Matrix d_embedded = leading_rows(dx, t);
  const std::vector<std::size_t> last{t};
  proprio_embed_.backward(cache.proprio, gather_rows(dx, last));
  const Matrix d_ordered = image_embed_.backward(cache.image, d_embedded);
  if (cache.grouped > 0) {
    const Matrix d_grouped = leading_rows(d_ordered, cache.grouped);
    if (group_moe_) {
      group_moe_->backward(&cache.stem_moe, d_grouped, nullptr);
    } else {
      group_dense_->backward(cache.stem_dense, d_grouped);
    }
  }
}

ParamRefs ClientModel::stem_params() {
  ParamRefs out;
  proprio_embed_.collect(out);
  if (group_moe_) group_moe_->collect(out);
  if (group_dense_) group_dense_->collect(out);
  image_embed_.collect(out);
  out.push_back(&position_);
  return out;
}

ParamRefs ClientModel::trunk_params() {
  ParamRefs out;
  for (auto& b : blocks_) {
    b.ln1.collect(out);
    b.attn.collect(out);
    b.ln2.collect(out);
    if (b.moe) b.moe->collect(out);
    if (b.dense) b.dense->collect(out);
  }
  return out;
}

ParamRefs ClientModel::head_params() {
  ParamRefs out;
  final_norm_.collect(out);
  out.push_back(&pool_logits_);
  head_out_.collect(out);
  return out;
}

ParamRefs ClientModel::all_params() {
  ParamRefs out = stem_params();
  for (auto* p : trunk_params()) out.push_back(p);
  for (auto* p : head_params()) out.push_back(p);
  return out;
}

void ClientModel::zero_grad() {
  for (auto* p : all_params()) p->zero_grad();
}

// collect() takes mutable refs; snapshot only reads through them.
TensorList ClientModel::stem() const { return snapshot(const_cast<ClientModel*>(this)->stem_params()); }
TensorList ClientModel::trunk() const { return snapshot(const_cast<ClientModel*>(this)->trunk_params()); }
TensorList ClientModel::head() const { return snapshot(const_cast<ClientModel*>(this)->head_params()); }

// ---------------------------------------------------------------- optimizer

OptimizerState OptimizerState::for_model(ClientModel& model) {
  OptimizerState s;
  for (auto* p : model.all_params()) s.slots.push_back(AdamState::for_shape(p->value));
  return s;
}

TensorList OptimizerState::to_tensors(ClientModel& model) const {
  const auto params = model.all_params();
  if (params.size() != slots.size()) throw std::logic_error("OptimizerState: model mismatch");
  TensorList out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.push_back({params[i]->layer, params[i]->role + "#m", slots[i].first_moment});
    out.push_back({params[i]->layer, params[i]->role + "#v", slots[i].second_moment});
    out.push_back({params[i]->layer, params[i]->role + "#step",
                   Matrix(1, 1, static_cast<double>(slots[i].step))});
  }
  return out;
}

void OptimizerState::load(ClientModel& model, const TensorList& tensors) {
  const auto params = model.all_params();
  if (tensors.size() != 3 * params.size()) {
    throw std::invalid_argument("OptimizerState::load: tensor count mismatch");
  }
  std::vector<AdamState> next(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = tensors[3 * i];
    const auto& v = tensors[3 * i + 1];
    const auto& st = tensors[3 * i + 2];
    const auto& p = *params[i];
    if (m.role != p.role + "#m" || v.role != p.role + "#v" || st.role != p.role + "#step" ||
        m.layer != p.layer || !m.value.same_shape(p.value) || !v.value.same_shape(p.value) ||
        st.value.size() != 1) {
      throw std::invalid_argument("OptimizerState::load: entry mismatch at " + p.role);
    }
    next[i] = AdamState{m.value, v.value, static_cast<long>(st.value(0, 0))};
  }
  slots = std::move(next);
}

// ---------------------------------------------------------------- training

double accumulate_sample_gradient(ClientModel& model, const PreparedSample& sample,
                                  double huber_delta, double grad_scale, RoutingStats* stats) {
  ClientModel::ForwardCache cache;
  const Matrix pred = model.forward(sample, stats, &cache);
  require_shape(sample.sample.actions, pred.rows(), pred.cols(), "accumulate_sample_gradient");
  auto h = huber_loss(pred.values(), sample.sample.actions.values(), huber_delta);
  for (auto& g : h.grad) g *= grad_scale;
  model.backward(cache, Matrix(pred.rows(), pred.cols(), std::move(h.grad)));
  return h.loss;
}

void apply_global_trunk(ClientModel& model, const TensorList& trunk) {
  load_into(model.trunk_params(), trunk);
}

LocalTrainResult local_train(ClientModel& model, OptimizerState& optimizer,
                             std::span<const PreparedSample> dataset, const TrainConfig& config,
                             const TensorList& global_trunk, std::uint64_t shuffle_seed) {
  if (dataset.empty()) throw std::invalid_argument("local_train: empty dataset");
  if (config.batch_size == 0) throw std::invalid_argument("local_train: batch size must be >= 1");
  apply_global_trunk(model, global_trunk);
  const auto params = model.all_params();
  if (optimizer.slots.size() != params.size()) {
    throw std::invalid_argument("local_train: optimizer state does not match the model");
  }
  const AdamConfig adam{config.learning_rate};

  RoutingStats stats = model.make_stats();
  std::vector<std::size_t> order(dataset.size());
  double epoch_loss = 0.0;
  for (std::size_t epoch = 0; epoch < config.local_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(shuffle_seed, epoch));
    rng.shuffle(std::span<std::size_t>(order));
    double sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      model.zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        sum += accumulate_sample_gradient(model, dataset[order[i]], config.huber_delta, scale,
                                          &stats);
      }
      for (std::size_t i = 0; i < params.size(); ++i) {
        adam_update(params[i]->value, params[i]->grad, optimizer.slots[i], adam);
      }
    }
    epoch_loss = sum / static_cast<double>(order.size());
  }

  LocalTrainResult out;
  out.trunk = model.trunk();
  out.selection = std::move(stats.trunk);
  out.tokens_processed = stats.trunk_tokens;
  out.train_loss = epoch_loss;
  return out;
}

double evaluate(const ClientModel& model, std::span<const PreparedSample> validation,
                double huber_delta) {
  if (validation.empty()) throw std::invalid_argument("evaluate: empty validation set");
  double sum = 0.0;
  for (const auto& s : validation) {
    const Matrix pred = model.forward(s);
    require_shape(s.sample.actions, pred.rows(), pred.cols(), "evaluate");
    sum += huber_loss(pred.values(), s.sample.actions.values(), huber_delta).loss;
  }
  return sum / static_cast<double>(validation.size());
}

LocalTrainResult FederatedClient::train_round(const TensorList& global_trunk, std::size_t round) {
  return local_train(model, optimizer, train, config, global_trunk,
                     derive_seed(config.seed, id, round));
}

double FederatedClient::validation_loss() const {
  return evaluate(model, validation, config.huber_delta);
}

}  // namespace fedmoe
