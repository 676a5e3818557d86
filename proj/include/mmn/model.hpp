#pragma once

// Multi-domain conversion model assembly: shared hashed embedding, one CTR
// tower, and per-domain CVR towers composed on demand from base + type +
// scenario parameter sets. Batched prediction runs each nonempty domain's
// sub-batch through its composed tower; a mask-then-sum reference path and a
// single-instance fast path produce identical numbers. Baseline variants
// (shared single tower, classic ESMM, plain DNN) sit behind the same
// interface, selected by mode.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mmn/config.hpp"
#include "mmn/data.hpp"
#include "mmn/domains.hpp"
#include "mmn/errors.hpp"
#include "mmn/features.hpp"
#include "mmn/loss.hpp"
#include "mmn/network.hpp"
#include "mmn/tensor.hpp"

namespace mmn {

enum class ModelMode {
  mmn,                    // composed towers, dynamically weighted loss
  mmn_common_params,      // one shared tower, dynamically weighted loss
  mmn_no_dynamic_weight,  // composed towers, unweighted loss
  esmm,                   // one CVR tower, unweighted loss
  dnn,                    // one CVR tower trained on clicked impressions only
};

inline ModelMode parse_mode(const std::string& s) {
  if (s == "mmn") return ModelMode::mmn;
  if (s == "mmn_common_params") return ModelMode::mmn_common_params;
  if (s == "mmn_no_dynamic_weight") return ModelMode::mmn_no_dynamic_weight;
  if (s == "esmm") return ModelMode::esmm;
  if (s == "dnn") return ModelMode::dnn;
  throw ConfigError("unknown model mode: '" + s + "'");
}

inline const char* mode_name(ModelMode m) {
  switch (m) {
    case ModelMode::mmn: return "mmn";
    case ModelMode::mmn_common_params: return "mmn_common_params";
    case ModelMode::mmn_no_dynamic_weight: return "mmn_no_dynamic_weight";
    case ModelMode::esmm: return "esmm";
    case ModelMode::dnn: return "dnn";
  }
  throw ConfigError("unknown model mode value");
}

struct ModelConfig {
  ModelMode mode = ModelMode::mmn;
  std::size_t num_slots = std::size_t{1} << 18;
  std::size_t embedding_dim = 4;
  std::vector<std::size_t> hidden_units{32, 16};
  bool include_domain_features = false;  // type/scenario as hashed fields
  bool ctr_tower = true;                 // false only for cvr-only dnn
  double init_range = 0.05;              // embedding uniform init bound

  static bool default_domain_features(ModelMode m) {
    return m == ModelMode::esmm || m == ModelMode::dnn;
  }

  static ModelConfig from_config(const Config& cfg) {
    ModelConfig mc;
    mc.mode = parse_mode(cfg.get_string("mode", "mmn"));
    mc.num_slots = cfg.get_size("num_slots", mc.num_slots);
    mc.embedding_dim = cfg.get_size("embedding_dim", mc.embedding_dim);
    if (cfg.has("hidden_units")) mc.hidden_units = cfg.get_size_list("hidden_units");
    mc.include_domain_features =
        cfg.get_bool("include_domain_features", default_domain_features(mc.mode));
    mc.ctr_tower = cfg.get_bool("ctr_tower", true);
    mc.init_range = cfg.get_double("init_range", mc.init_range);
    mc.validate();
    return mc;
  }

  void validate() const {
    if (num_slots == 0) throw ConfigError("num_slots must be >= 1");
    if (embedding_dim == 0) throw ConfigError("embedding_dim must be >= 1");
    if (hidden_units.empty()) throw ConfigError("hidden_units must be nonempty");
    for (std::size_t u : hidden_units) {
      if (u == 0) throw ConfigError("hidden layer sizes must be >= 1");
    }
    if (!ctr_tower && mode != ModelMode::dnn) {
      throw ConfigError("ctr_tower = false is only valid in dnn mode");
    }
  }
};

struct BatchPrediction {
  std::vector<double> p_ctr;
  std::vector<double> p_cvr;
};

struct InstancePrediction {
  double p_ctr = 0.0;
  double p_cvr = 0.0;
};

// Relaxed counters for the performance properties (how many towers were
// composed / forwarded). Copyable so model snapshots stay copyable.
struct CallCounters {
  std::atomic<std::uint64_t> compose{0};
  std::atomic<std::uint64_t> tower_forward{0};
  std::atomic<std::uint64_t> ctr_forward{0};

  CallCounters() = default;
  CallCounters(const CallCounters& o)
      : compose(o.compose.load()),
        tower_forward(o.tower_forward.load()),
        ctr_forward(o.ctr_forward.load()) {}
  CallCounters& operator=(const CallCounters& o) {
    compose = o.compose.load();
    tower_forward = o.tower_forward.load();
    ctr_forward = o.ctr_forward.load();
    return *this;
  }
  void reset() {
    compose = 0;
    tower_forward = 0;
    ctr_forward = 0;
  }
};

// Dense gradient of the full loss, for finite-difference verification and
// diagnostics. Sets that a mode does not store are left empty.
struct FullGradient {
  Matrix embedding;
  ParamSet ctr;
  ParamSet base;
  std::vector<ParamSet> type_sets;
  std::vector<ParamSet> scenario_sets;
  LossBreakdown loss;
};

class MmnModel {
 public:
  MmnModel() = default;

  MmnModel(DomainRegistry registry, Schema schema, ModelConfig config,
           std::uint64_t seed)
      : registry_(std::move(registry)), schema_(std::move(schema)), cfg_(config) {
    cfg_.validate();
    for (const auto& f : schema_.fields) {
      if (f == kTypeField || f == kScenarioField) {
        throw ConfigError("schema field name '" + f + "' is reserved");
      }
    }
    arch_.input_dim = feature_field_count() * cfg_.embedding_dim;
    arch_.layer_units = cfg_.hidden_units;

    RngState emb_rng(derive_seed(seed, 0));
    embedding_ = EmbeddingTable(cfg_.num_slots, cfg_.embedding_dim);
    embedding_.init_uniform(emb_rng, cfg_.init_range);

    if (cfg_.ctr_tower) {
      RngState rng(derive_seed(seed, 1));
      ctr_ = ParamSet::he_uniform(arch_, rng);
      ctr_accum_ = ParamSet::zeros(arch_);
    }
    {
      RngState rng(derive_seed(seed, 2));
      base_ = ParamSet::he_uniform(arch_, rng);
      base_accum_ = ParamSet::zeros(arch_);
    }
    if (is_multi_tower()) {
      const int nt = registry_.num_types();
      const int ns = registry_.num_scenarios();
      type_sets_.reserve(nt);
      type_accums_.reserve(nt);
      for (int i = 0; i < nt; ++i) {
        RngState rng(derive_seed(seed, 3 + static_cast<std::uint64_t>(i)));
        type_sets_.push_back(ParamSet::he_uniform(arch_, rng));
        type_accums_.push_back(ParamSet::zeros(arch_));
      }
      scenario_sets_.reserve(ns);
      scenario_accums_.reserve(ns);
      for (int j = 0; j < ns; ++j) {
        RngState rng(derive_seed(seed, 3 + static_cast<std::uint64_t>(nt + j)));
        scenario_sets_.push_back(ParamSet::he_uniform(arch_, rng));
        scenario_accums_.push_back(ParamSet::zeros(arch_));
      }
    }
  }

  // --- structure ------------------------------------------------------------

  ModelMode mode() const { return cfg_.mode; }
  const ModelConfig& config() const { return cfg_; }
  const DomainRegistry& registry() const { return registry_; }
  const Schema& schema() const { return schema_; }
  const TowerArchitecture& architecture() const { return arch_; }

  bool is_multi_tower() const {
    return cfg_.mode == ModelMode::mmn || cfg_.mode == ModelMode::mmn_no_dynamic_weight;
  }
  bool uses_dynamic_loss() const {
    return cfg_.mode == ModelMode::mmn || cfg_.mode == ModelMode::mmn_common_params;
  }
  bool has_ctr_tower() const { return cfg_.ctr_tower; }

  // Stored CVR parameter sets: N_t + N_s + 1 when towers are composed, one
  // shared set otherwise.
  std::size_t parameter_set_count() const {
    if (!is_multi_tower()) return 1;
    return static_cast<std::size_t>(registry_.num_types()) +
           static_cast<std::size_t>(registry_.num_scenarios()) + 1;
  }

  // Distinct towers those sets can serve.
  std::size_t composable_tower_count() const {
    if (!is_multi_tower()) return 1;
    return static_cast<std::size_t>(registry_.num_domains());
  }

  std::size_t feature_field_count() const {
    return schema_.field_count() + (cfg_.include_domain_features ? 2 : 0);
  }

  EmbeddingTable& embedding() { return embedding_; }
  const EmbeddingTable& embedding() const { return embedding_; }
  ParamSet& ctr_params() { return ctr_; }
  const ParamSet& ctr_params() const { return ctr_; }
  ParamSet& ctr_accum() { return ctr_accum_; }
  const ParamSet& ctr_accum() const { return ctr_accum_; }
  ParamSet& base_params() { return base_; }
  const ParamSet& base_params() const { return base_; }
  ParamSet& base_accum() { return base_accum_; }
  const ParamSet& base_accum() const { return base_accum_; }
  std::vector<ParamSet>& type_sets() { return type_sets_; }
  const std::vector<ParamSet>& type_sets() const { return type_sets_; }
  std::vector<ParamSet>& type_accums() { return type_accums_; }
  const std::vector<ParamSet>& type_accums() const { return type_accums_; }
  std::vector<ParamSet>& scenario_sets() { return scenario_sets_; }
  const std::vector<ParamSet>& scenario_sets() const { return scenario_sets_; }
  std::vector<ParamSet>& scenario_accums() { return scenario_accums_; }
  const std::vector<ParamSet>& scenario_accums() const { return scenario_accums_; }
  CallCounters& counters() const { return counters_; }

  // --- prediction -----------------------------------------------------------

  // Fast path: embed once, run the CTR tower on the full batch, then run each
  // nonempty domain's sub-batch through that domain's composed tower.
  BatchPrediction predict_batch(const MiniBatch& batch) const {
    Work w = forward_pass(batch, /*want_caches=*/false);
    return {std::move(w.p_ctr), std::move(w.p_cvr)};
  }

  // Reference path: every nonempty tower runs the full batch; outputs are
  // multiplied by the domain masks and summed. Masked entries contribute an
  // exact zero, so this matches predict_batch bitwise; it exists as the
  // equivalence oracle's counterpart and is never used for serving.
  BatchPrediction predict_batch_reference(const MiniBatch& batch) const {
    if (!is_multi_tower()) return predict_batch(batch);
    const std::size_t n = batch.size();
    BatchPrediction out;
    Matrix x(n, arch_.input_dim);
    std::vector<std::uint64_t> slots;
    embed_batch(batch, x, slots);
    out.p_ctr = ctr_probs(x, nullptr);
    out.p_cvr.assign(n, 0.0);
    const BatchMasks masks = batch_masks(batch);
    for (const auto& slice : masks.nonempty) {
      const ParamSet tower = compose_tower(slice.type_id, slice.scenario_id);
      counters_.tower_forward.fetch_add(1, std::memory_order_relaxed);
      const Matrix logits = forward(x, tower, nullptr);
      for (std::size_t i = 0; i < n; ++i) {
        out.p_cvr[i] += slice.mask[i] * sigmoid_scalar(logits.at(i, 0));
      }
    }
    return out;
  }

  // Serving path: compose exactly one tower and run one row through it.
  InstancePrediction predict_one(const FeatureVector& rec) const {
    check_record(rec);
    Matrix x(1, arch_.input_dim);
    embed_record(rec, x.row(0), nullptr);
    InstancePrediction out;
    if (cfg_.ctr_tower) {
      counters_.ctr_forward.fetch_add(1, std::memory_order_relaxed);
      out.p_ctr = sigmoid_scalar(forward(x, ctr_, nullptr).at(0, 0));
    } else {
      out.p_ctr = std::numeric_limits<double>::quiet_NaN();
    }
    const ParamSet* tower = &base_;
    ParamSet composed;
    if (is_multi_tower()) {
      composed = compose_tower(rec.type_id, rec.scenario_id);
      tower = &composed;
    }
    counters_.tower_forward.fetch_add(1, std::memory_order_relaxed);
    out.p_cvr = sigmoid_scalar(forward(x, *tower, nullptr).at(0, 0));
    return out;
  }

  // --- training -------------------------------------------------------------

  // One optimizer step. Parameter sets of domains absent from the batch are
  // not composed, not forwarded, and left bitwise unchanged.
  LossBreakdown train_step(const MiniBatch& batch, double alpha, double lr, double eps,
                           std::uint64_t step_index = 0) {
    if (batch.size() == 0) {
      throw TrainError("train_step: empty batch at step " + std::to_string(step_index));
    }
    Work w = forward_pass(batch, /*want_caches=*/true);
    Grads g = loss_gradients(w, alpha);
    if (!g.loss.finite()) {
      throw TrainError("non-finite loss at step " + std::to_string(step_index));
    }
    backward_pass(w, g);
    apply_updates(w, g, lr, eps);
    return g.loss;
  }

  // Loss of a batch under the current parameters, no update. Uses the same
  // forward and loss arithmetic as train_step.
  LossBreakdown compute_loss(const MiniBatch& batch, double alpha) const {
    if (batch.size() == 0) throw TrainError("compute_loss: empty batch");
    Work w = forward_pass(batch, /*want_caches=*/false);
    return loss_only(w, alpha);
  }

  // Dense analytic gradient of the batch loss (embedding included), for
  // finite-difference checks. Intended for small test models.
  FullGradient compute_gradients(const MiniBatch& batch, double alpha) const {
    if (batch.size() == 0) throw TrainError("compute_gradients: empty batch");
    Work w = forward_pass(batch, /*want_caches=*/true);
    Grads g = loss_gradients(w, alpha);
    backward_pass(w, g);

    FullGradient out;
    out.loss = g.loss;
    out.embedding = Matrix(cfg_.num_slots, cfg_.embedding_dim);
    scatter_embedding_dense(w, g.d_input, out.embedding);
    out.ctr = std::move(g.ctr);
    out.base = std::move(g.base);
    if (is_multi_tower()) {
      out.type_sets.assign(type_sets_.size(), ParamSet::zeros(arch_));
      out.scenario_sets.assign(scenario_sets_.size(), ParamSet::zeros(arch_));
      for (auto& [t, gs] : g.type_grads) out.type_sets[t] = std::move(gs);
      for (auto& [s, gs] : g.scenario_grads) out.scenario_sets[s] = std::move(gs);
    }
    return out;
  }

 private:
  static constexpr const char* kTypeField = "_type";
  static constexpr const char* kScenarioField = "_scenario";

  // Everything one pass over a batch produces.
  struct Work {
    std::size_t n = 0;
    Matrix x;                          // n x input_dim
    std::vector<std::uint64_t> slots;  // n * feature_field_count
    BatchMasks masks;
    std::vector<std::uint8_t> y, z;
    std::vector<double> p_ctr, p_cvr;
    ForwardCache ctr_cache;
    // Multi-tower: one entry per nonempty domain, ascending domain index.
    std::vector<ParamSet> slice_params;
    std::vector<ForwardCache> slice_caches;
    // Single-tower: full-batch cache for the shared CVR tower.
    ForwardCache cvr_cache;
  };

  struct Grads {
    LossBreakdown loss;
    Matrix d_ctr;     // n x 1, dLoss/dlogit of the CTR tower
    Matrix d_cvr;     // n x 1, dLoss/dlogit of each instance's CVR tower
    Matrix d_input;   // n x input_dim, filled by backward_pass
    ParamSet ctr;
    ParamSet base;
    std::map<int, ParamSet> type_grads;      // touched types only
    std::map<int, ParamSet> scenario_grads;  // touched scenarios only
  };

  void check_record(const FeatureVector& rec) const {
    if (rec.values.size() != schema_.field_count()) {
      throw ShapeError("record has " + std::to_string(rec.values.size()) +
                       " fields, schema expects " +
                       std::to_string(schema_.field_count()));
    }
    if (rec.type_id < 0 || rec.type_id >= registry_.num_types() ||
        rec.scenario_id < 0 || rec.scenario_id >= registry_.num_scenarios()) {
      throw DomainError("record domain ids out of registry range");
    }
  }

  void embed_record(const FeatureVector& rec, std::span<double> out,
                    std::uint64_t* slot_out) const {
    const std::size_t dim = cfg_.embedding_dim;
    std::size_t f = 0;
    auto put = [&](std::string_view field, std::string_view value) {
      const std::size_t slot = hash_feature(field, value, cfg_.num_slots);
      const auto src = embedding_.weights.row(slot);
      for (std::size_t d = 0; d < dim; ++d) out[f * dim + d] = src[d];
      if (slot_out) slot_out[f] = slot;
      ++f;
    };
    for (std::size_t k = 0; k < schema_.field_count(); ++k) {
      put(schema_.fields[k], rec.values[k]);
    }
    if (cfg_.include_domain_features) {
      put(kTypeField, registry_.type_code(rec.type_id));
      put(kScenarioField, registry_.scenario_code(rec.scenario_id));
    }
  }

  void embed_batch(const MiniBatch& batch, Matrix& x,
                   std::vector<std::uint64_t>& slots) const {
    const std::size_t nf = feature_field_count();
    slots.resize(batch.size() * nf);
    for (std::size_t r = 0; r < batch.size(); ++r) {
      const FeatureVector& rec = batch.record(r);
      check_record(rec);
      embed_record(rec, x.row(r), slots.data() + r * nf);
    }
  }

  BatchMasks batch_masks(const MiniBatch& batch) const {
    std::vector<std::pair<int, int>> ids;
    ids.reserve(batch.size());
    for (std::size_t r = 0; r < batch.size(); ++r) {
      const FeatureVector& rec = batch.record(r);
      ids.emplace_back(rec.type_id, rec.scenario_id);
    }
    return compute_masks(ids, registry_);
  }

  ParamSet compose_tower(int type_id, int scenario_id) const {
    counters_.compose.fetch_add(1, std::memory_order_relaxed);
    return compose(base_, type_sets_[type_id], scenario_sets_[scenario_id]);
  }

  std::vector<double> ctr_probs(const Matrix& x, ForwardCache* cache) const {
    std::vector<double> p(x.rows, std::numeric_limits<double>::quiet_NaN());
    if (!cfg_.ctr_tower) return p;
    counters_.ctr_forward.fetch_add(1, std::memory_order_relaxed);
    const Matrix logits = forward(x, ctr_, cache);
    for (std::size_t i = 0; i < x.rows; ++i) p[i] = sigmoid_scalar(logits.at(i, 0));
    return p;
  }

  static Matrix gather_rows(const Matrix& x, std::span<const std::uint32_t> rows) {
    Matrix out(rows.size(), x.cols);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto src = x.row(rows[k]);
      auto dst = out.row(k);
      for (std::size_t c = 0; c < x.cols; ++c) dst[c] = src[c];
    }
    return out;
  }

  Work forward_pass(const MiniBatch& batch, bool want_caches) const {
    Work w;
    w.n = batch.size();
    w.x = Matrix(w.n, arch_.input_dim);
    embed_batch(batch, w.x, w.slots);
    w.masks = batch_masks(batch);
    w.y.resize(w.n);
    w.z.resize(w.n);
    for (std::size_t r = 0; r < w.n; ++r) {
      w.y[r] = batch.record(r).click;
      w.z[r] = batch.record(r).conversion;
    }

    w.p_ctr = ctr_probs(w.x, want_caches && cfg_.ctr_tower ? &w.ctr_cache : nullptr);

    if (is_multi_tower()) {
      w.p_cvr.assign(w.n, 0.0);
      w.slice_params.reserve(w.masks.num_nonempty());
      if (want_caches) w.slice_caches.resize(w.masks.num_nonempty());
      for (std::size_t s = 0; s < w.masks.num_nonempty(); ++s) {
        const DomainSlice& slice = w.masks.nonempty[s];
        w.slice_params.push_back(compose_tower(slice.type_id, slice.scenario_id));
        counters_.tower_forward.fetch_add(1, std::memory_order_relaxed);
        const Matrix xs = gather_rows(w.x, slice.rows);
        const Matrix logits =
            forward(xs, w.slice_params.back(), want_caches ? &w.slice_caches[s] : nullptr);
        for (std::size_t k = 0; k < slice.rows.size(); ++k) {
          w.p_cvr[slice.rows[k]] = sigmoid_scalar(logits.at(k, 0));
        }
      }
    } else {
      counters_.tower_forward.fetch_add(1, std::memory_order_relaxed);
      const Matrix logits = forward(w.x, base_, want_caches ? &w.cvr_cache : nullptr);
      w.p_cvr.resize(w.n);
      for (std::size_t i = 0; i < w.n; ++i) w.p_cvr[i] = sigmoid_scalar(logits.at(i, 0));
    }
    return w;
  }

  LossBreakdown loss_only(const Work& w, double alpha) const {
    LossBreakdown b;
    b.alpha = alpha;
    b.loss_ctr = cfg_.ctr_tower ? ctr_loss(w.p_ctr, w.y) : 0.0;
    if (cfg_.mode == ModelMode::dnn) {
      double acc = 0.0;
      std::size_t clicks = 0;
      for (std::size_t n = 0; n < w.n; ++n) {
        if (!w.y[n]) continue;
        ++clicks;
        const double p = clamp_prob(w.p_cvr[n]);
        acc += w.z[n] ? -std::log(p) : -std::log(1.0 - p);
      }
      const double cvr_loss = clicks ? acc / static_cast<double>(clicks) : 0.0;
      b.loss_ctcvr = cvr_loss;
      b.loss_ctcvr_weighted = cvr_loss;
      b.total = b.loss_ctr + alpha * cvr_loss;
      return b;
    }
    const std::vector<double> per_inst = ctcvr_per_instance(w.p_ctr, w.p_cvr, w.y, w.z);
    double unweighted = 0.0;
    for (double v : per_inst) unweighted += v;
    unweighted /= static_cast<double>(w.n);
    double weighted = 0.0;
    {
      const std::vector<double> wt = dynamic_weights(w.masks);
      for (std::size_t n = 0; n < w.n; ++n) weighted += wt[n] * per_inst[n];
      weighted /= static_cast<double>(w.n);
    }
    b.loss_ctcvr = unweighted;
    b.loss_ctcvr_weighted = weighted;
    b.total = b.loss_ctr + alpha * (uses_dynamic_loss() ? weighted : unweighted);
    for (const auto& c : loss_scale_diagnostic(per_inst, w.masks)) {
      b.domain_mean_ctcvr.emplace_back(c.domain, c.domain_mean);
    }
    return b;
  }

  Grads loss_gradients(const Work& w, double alpha) const {
    Grads g;
    g.loss = loss_only(w, alpha);
    g.d_ctr = Matrix(w.n, 1);
    g.d_cvr = Matrix(w.n, 1);
    const double n = static_cast<double>(w.n);

    if (cfg_.ctr_tower) {
      for (std::size_t i = 0; i < w.n; ++i) {
        g.d_ctr.at(i, 0) = (w.p_ctr[i] - static_cast<double>(w.y[i])) / n;
      }
    }

    if (cfg_.mode == ModelMode::dnn) {
      std::size_t clicks = 0;
      for (std::size_t i = 0; i < w.n; ++i) clicks += w.y[i];
      if (clicks > 0) {
        const double coef = alpha / static_cast<double>(clicks);
        for (std::size_t i = 0; i < w.n; ++i) {
          if (!w.y[i]) continue;
          g.d_cvr.at(i, 0) = coef * (w.p_cvr[i] - static_cast<double>(w.z[i]));
        }
      }
      return g;
    }

    // CTCVR term: P = p_ctr * p_cvr against label y*z. For l = -[c log P +
    // (1-c) log(1-P)]: dl/dh_cvr = (P-c)(1-p_cvr)/(1-P) and symmetrically for
    // the CTR logit. Both factors are bounded because P <= min(p_ctr, p_cvr).
    std::vector<double> wt;
    if (uses_dynamic_loss()) wt = dynamic_weights(w.masks);
    for (std::size_t i = 0; i < w.n; ++i) {
      const double coef = alpha * (uses_dynamic_loss() ? wt[i] : 1.0) / n;
      const double p = w.p_ctr[i] * w.p_cvr[i];
      const double c = (w.y[i] && w.z[i]) ? 1.0 : 0.0;
      const double factor = coef * (p - c) / (1.0 - p);
      g.d_cvr.at(i, 0) = factor * (1.0 - w.p_cvr[i]);
      if (cfg_.ctr_tower) g.d_ctr.at(i, 0) += factor * (1.0 - w.p_ctr[i]);
    }
    return g;
  }

  // Backpropagates d_ctr/d_cvr through the towers. Tower parameter gradients
  // land in g.ctr / g.base / g.type_grads / g.scenario_grads; the composed
  // towers' gradients flow unchanged into base, type, and scenario sets. The
  // input gradient (for the embedding) accumulates into g.d_input.
  void backward_pass(const Work& w, Grads& g) const {
    g.d_input = Matrix(w.n, arch_.input_dim);
    Matrix scratch;
    if (cfg_.ctr_tower) {
      g.ctr = ParamSet::zeros(arch_);
      backward(ctr_, w.ctr_cache, g.d_ctr, g.ctr, &scratch);
      add_in_place(g.d_input, scratch);
    }
    g.base = ParamSet::zeros(arch_);
    if (is_multi_tower()) {
      ParamSet slice_grad = ParamSet::zeros(arch_);
      for (std::size_t s = 0; s < w.masks.num_nonempty(); ++s) {
        const DomainSlice& slice = w.masks.nonempty[s];
        Matrix d_slice(slice.rows.size(), 1);
        for (std::size_t k = 0; k < slice.rows.size(); ++k) {
          d_slice.at(k, 0) = g.d_cvr.at(slice.rows[k], 0);
        }
        slice_grad.set_zero();
        backward(w.slice_params[s], w.slice_caches[s], d_slice, slice_grad, &scratch);
        for (std::size_t k = 0; k < slice.rows.size(); ++k) {
          const auto src = scratch.row(k);
          auto dst = g.d_input.row(slice.rows[k]);
          for (std::size_t c = 0; c < w.x.cols; ++c) dst[c] += src[c];
        }
        add_in_place(g.base, slice_grad);
        auto [ti, t_new] = g.type_grads.try_emplace(slice.type_id, ParamSet());
        if (t_new) ti->second = slice_grad;
        else add_in_place(ti->second, slice_grad);
        auto [si, s_new] = g.scenario_grads.try_emplace(slice.scenario_id, ParamSet());
        if (s_new) si->second = slice_grad;
        else add_in_place(si->second, slice_grad);
      }
    } else {
      backward(base_, w.cvr_cache, g.d_cvr, g.base, &scratch);
      add_in_place(g.d_input, scratch);
    }
  }

  // Sparse, order-stable embedding update: (slot, row, field) triples are
  // emitted row-major, stable-sorted by slot, then each slot's segment
  // gradients are summed in emission order and applied once.
  void apply_updates(const Work& w, Grads& g, double lr, double eps) {
    const std::size_t nf = feature_field_count();
    const std::size_t dim = cfg_.embedding_dim;
    std::vector<std::pair<std::uint64_t, std::uint32_t>> touched;  // (slot, flat)
    touched.reserve(w.n * nf);
    for (std::size_t r = 0; r < w.n; ++r) {
      for (std::size_t f = 0; f < nf; ++f) {
        touched.emplace_back(w.slots[r * nf + f],
                             static_cast<std::uint32_t>(r * nf + f));
      }
    }
    std::stable_sort(touched.begin(), touched.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<double> seg(dim);
    std::size_t i = 0;
    while (i < touched.size()) {
      const std::uint64_t slot = touched[i].first;
      std::fill(seg.begin(), seg.end(), 0.0);
      for (; i < touched.size() && touched[i].first == slot; ++i) {
        const std::uint32_t flat = touched[i].second;
        const std::size_t row = flat / nf;
        const std::size_t field = flat % nf;
        const auto src = g.d_input.row(row);
        for (std::size_t d = 0; d < dim; ++d) seg[d] += src[field * dim + d];
      }
      adagrad_update(embedding_.weights.row(slot), seg, embedding_.accum.row(slot), lr,
                     eps);
    }

    if (cfg_.ctr_tower) adagrad_step(ctr_, g.ctr, ctr_accum_, lr, eps);
    adagrad_step(base_, g.base, base_accum_, lr, eps);
    for (auto& [t, gs] : g.type_grads) {
      adagrad_step(type_sets_[t], gs, type_accums_[t], lr, eps);
    }
    for (auto& [s, gs] : g.scenario_grads) {
      adagrad_step(scenario_sets_[s], gs, scenario_accums_[s], lr, eps);
    }
  }

  void scatter_embedding_dense(const Work& w, const Matrix& d_input,
                               Matrix& emb_grad) const {
    const std::size_t nf = feature_field_count();
    const std::size_t dim = cfg_.embedding_dim;
    for (std::size_t r = 0; r < w.n; ++r) {
      const auto src = d_input.row(r);
      for (std::size_t f = 0; f < nf; ++f) {
        auto dst = emb_grad.row(w.slots[r * nf + f]);
        for (std::size_t d = 0; d < dim; ++d) dst[d] += src[f * dim + d];
      }
    }
  }

  DomainRegistry registry_;
  Schema schema_;
  ModelConfig cfg_;
  TowerArchitecture arch_;
  EmbeddingTable embedding_;
  ParamSet ctr_, ctr_accum_;
  ParamSet base_, base_accum_;
  std::vector<ParamSet> type_sets_, type_accums_;
  std::vector<ParamSet> scenario_sets_, scenario_accums_;
  mutable CallCounters counters_;
};

}  // namespace mmn
