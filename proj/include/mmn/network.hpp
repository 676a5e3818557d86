#pragma once

// MLP towers with composed domain-specific parameters. A tower is L fully
// connected ReLU layers followed by a scalar logit head. Domain towers are
// never stored: they are materialized per use as the elementwise sum of a
// base set, a conversion-type set and a display-scenario set.
//
// Gradients are hand-derived per layer. Because the composed parameters are
// a plain sum, the gradient w.r.t. each contributing set equals the gradient
// w.r.t. the composed set.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mmn/errors.hpp"
#include "mmn/tensor.hpp"

namespace mmn {

struct TowerArchitecture {
  std::size_t input_dim = 0;
  std::vector<std::size_t> layer_units;  // L hidden widths; the scalar head follows

  std::size_t num_layers() const { return layer_units.size(); }

  // Fan-in of layer l; layer num_layers() is the head.
  std::size_t fan_in(std::size_t l) const {
    return l == 0 ? input_dim : layer_units[l - 1];
  }
  std::size_t fan_out(std::size_t l) const {
    return l < layer_units.size() ? layer_units[l] : 1;
  }
};

struct LayerParams {
  Matrix w;  // fan_in x fan_out
  Matrix b;  // 1 x fan_out
};

// Per-layer weights and biases of one tower, head included as the last entry.
// All ParamSets of an architecture share shapes, which is what makes the
// elementwise composition well defined.
struct ParamSet {
  std::vector<LayerParams> layers;  // L + 1 entries

  static ParamSet zeros(const TowerArchitecture& arch) {
    ParamSet p;
    p.layers.resize(arch.num_layers() + 1);
    for (std::size_t l = 0; l <= arch.num_layers(); ++l) {
      p.layers[l].w = Matrix(arch.fan_in(l), arch.fan_out(l));
      p.layers[l].b = Matrix(1, arch.fan_out(l));
    }
    return p;
  }

  // He-style uniform init: limit sqrt(6 / fan_in) per layer, biases zero.
  static ParamSet he_uniform(const TowerArchitecture& arch, RngState& rng) {
    ParamSet p = zeros(arch);
    for (auto& layer : p.layers) {
      const double limit = std::sqrt(6.0 / static_cast<double>(layer.w.rows));
      for (double& v : layer.w.data) v = rng.uniform(-limit, limit);
    }
    return p;
  }

  std::size_t num_layers() const { return layers.empty() ? 0 : layers.size() - 1; }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& layer : layers) n += layer.w.size() + layer.b.size();
    return n;
  }

  void set_zero() {
    for (auto& layer : layers) {
      layer.w.fill(0.0);
      layer.b.fill(0.0);
    }
  }

  bool same_shape(const ParamSet& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (!layers[l].w.same_shape(o.layers[l].w)) return false;
      if (!layers[l].b.same_shape(o.layers[l].b)) return false;
    }
    return true;
  }
};

inline void add_in_place(ParamSet& a, const ParamSet& b) {
  if (!a.same_shape(b)) throw ShapeError("ParamSet add: shape mismatch");
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    add_in_place(a.layers[l].w, b.layers[l].w);
    add_in_place(a.layers[l].b, b.layers[l].b);
  }
}

// Materialized sum base + type + scenario, layer by layer.
inline ParamSet compose(const ParamSet& base, const ParamSet& type_set,
                        const ParamSet& scenario_set) {
  if (!base.same_shape(type_set) || !base.same_shape(scenario_set)) {
    throw ShapeError("compose: ParamSet shapes differ");
  }
  ParamSet out = base;
  add_in_place(out, type_set);
  add_in_place(out, scenario_set);
  return out;
}

// Pre-activations and activations of one forward pass, retained for backward.
struct ForwardCache {
  Matrix input;             // n x input_dim
  std::vector<Matrix> pre;  // Z per layer, head included (n x 1 last)
  std::vector<Matrix> act;  // ReLU outputs per hidden layer
};

// Batched forward pass: rows of x are instances. Returns the n x 1 logits.
inline Matrix forward(const Matrix& x, const ParamSet& params, ForwardCache* cache) {
  const std::size_t depth = params.layers.size();  // L + 1
  const Matrix* cur = &x;
  Matrix local_a;
  if (cache) {
    cache->input = x;
    cache->pre.clear();
    cache->act.clear();
    cache->pre.reserve(depth);
    cache->act.reserve(depth - 1);
  }
  for (std::size_t l = 0; l < depth; ++l) {
    Matrix z = matmul(*cur, params.layers[l].w);
    add_row_broadcast(z, params.layers[l].b);
    if (l + 1 == depth) {
      if (cache) cache->pre.push_back(z);
      return z;
    }
    Matrix a = relu(z);
    if (cache) {
      cache->pre.push_back(std::move(z));
      cache->act.push_back(std::move(a));
      cur = &cache->act.back();
    } else {
      local_a = std::move(a);
      cur = &local_a;
    }
  }
  throw ShapeError("forward: empty ParamSet");
}

// Backward pass for the tower whose forward produced cache. dlogit is n x 1.
// Parameter gradients are accumulated into grad (same shapes as the params);
// the gradient w.r.t. the input rows is returned when dinput is non-null.
inline void backward(const ParamSet& params, const ForwardCache& cache,
                     const Matrix& dlogit, ParamSet& grad, Matrix* dinput) {
  const std::size_t depth = params.layers.size();
  Matrix d = dlogit;  // gradient w.r.t. current layer's pre-activation
  for (std::size_t l = depth; l-- > 0;) {
    const Matrix& below = l == 0 ? cache.input : cache.act[l - 1];
    add_in_place(grad.layers[l].w, matmul_at_b(below, d));
    add_in_place(grad.layers[l].b, colsum(d));
    if (l == 0) {
      if (dinput) *dinput = matmul_a_bt(d, params.layers[l].w);
      break;
    }
    Matrix da = matmul_a_bt(d, params.layers[l].w);
    // ReLU gate: pre-activation <= 0 contributes nothing.
    const Matrix& z = cache.pre[l - 1];
    for (std::size_t i = 0; i < da.size(); ++i) {
      if (!(z.data[i] > 0.0)) da.data[i] = 0.0;
    }
    d = std::move(da);
  }
}

// One Adagrad update: accum += g^2, p -= lr * g / (sqrt(accum) + eps).
// Zero gradients leave both the parameter and the accumulator untouched.
inline void adagrad_update(std::span<double> p, std::span<const double> g,
                           std::span<double> accum, double lr, double eps) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i];
    if (gi == 0.0) continue;
    accum[i] += gi * gi;
    p[i] -= lr * gi / (std::sqrt(accum[i]) + eps);
  }
}

inline void adagrad_step(ParamSet& params, const ParamSet& grads, ParamSet& accum,
                         double lr, double eps) {
  if (!params.same_shape(grads) || !params.same_shape(accum)) {
    throw ShapeError("adagrad_step: shape mismatch");
  }
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    adagrad_update(params.layers[l].w.data, grads.layers[l].w.data,
                   accum.layers[l].w.data, lr, eps);
    adagrad_update(params.layers[l].b.data, grads.layers[l].b.data,
                   accum.layers[l].b.data, lr, eps);
  }
}

}  // namespace mmn
