#pragma once

// ModuleGraph: an elaborated model as an ordered list of primitive layers.
// Layers read and write named values; the list order is the execution order.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "parformer/autograd.hpp"
#include "parformer/config.hpp"
#include "parformer/ops.hpp"

namespace parformer {

enum class LayerKind {
  conv2d,
  dwconv2d,
  pointwise,
  batchnorm,
  channel_affine,
  scam,
  gelu,
  split,
  attention,
  concat,
  layerscale_add,
  global_avg_pool,
  linear,
};

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::dwconv2d: return "dwconv2d";
    case LayerKind::pointwise: return "pointwise";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::channel_affine: return "channel_affine";
    case LayerKind::scam: return "scam";
    case LayerKind::gelu: return "gelu";
    case LayerKind::split: return "split";
    case LayerKind::attention: return "attention";
    case LayerKind::concat: return "concat";
    case LayerKind::layerscale_add: return "layerscale_add";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::linear: return "linear";
  }
  return "?";
}

using ops::BnMode;

struct LayerAttrs {
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::vector<std::int64_t> splits;  // split: output channel widths
  double eps = 1e-5;                 // batchnorm
  double momentum = 0.1;             // batchnorm

  friend bool operator==(const LayerAttrs&, const LayerAttrs&) = default;
};

/// A named tensor owned by a layer. Copies are deep.
template <typename T>
struct Slot {
  std::string name;
  Var<T> value;
  bool learnable = true;

  Slot(std::string n, Tensor<T> t, bool learn)
      : name(std::move(n)), value(Var<T>::leaf(std::move(t), learn)), learnable(learn) {}
  Slot(const Slot& o)
      : name(o.name), value(Var<T>::leaf(o.value.value(), o.learnable)), learnable(o.learnable) {}
  Slot& operator=(const Slot& o) {
    if (this != &o) *this = Slot(o);
    return *this;
  }
  Slot(Slot&&) noexcept = default;
  Slot& operator=(Slot&&) noexcept = default;
};

template <typename T>
struct Layer {
  std::string path;
  LayerKind kind;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  LayerAttrs attrs;
  std::vector<Slot<T>> slots;

  bool has_slot(std::string_view name) const {
    return std::any_of(slots.begin(), slots.end(), [&](const Slot<T>& s) { return s.name == name; });
  }
  Var<T>& slot(std::string_view name) {
    for (auto& s : slots)
      if (s.name == name) return s.value;
    throw Error("graph", path + " has no slot '" + std::string(name) + "'");
  }
  const Var<T>& slot(std::string_view name) const {
    for (const auto& s : slots)
      if (s.name == name) return s.value;
    throw Error("graph", path + " has no slot '" + std::string(name) + "'");
  }
};

template <typename T>
struct ModuleGraph {
  ModelConfig config;
  std::vector<Layer<T>> layers;
  std::string input = "input";
  std::string output;
  BnMode mode = BnMode::infer;
  bool folded = false;

  const Layer<T>& layer(std::string_view path) const {
    for (const auto& l : layers)
      if (l.path == path) return l;
    throw Error("graph", "no layer '" + std::string(path) + "'");
  }
  Layer<T>& layer(std::string_view path) {
    return const_cast<Layer<T>&>(std::as_const(*this).layer(path));
  }

  /// Visits every slot as (qualified name, slot).
  template <typename F>
  void for_each_slot(F&& f) {
    for (auto& l : layers)
      for (auto& s : l.slots) f(l.path + "." + s.name, s);
  }
  template <typename F>
  void for_each_slot(F&& f) const {
    for (const auto& l : layers)
      for (const auto& s : l.slots) f(l.path + "." + s.name, s);
  }

  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> out;
    for_each_slot([&](const std::string&, const Slot<T>& s) {
      if (s.learnable) out.push_back(s.value);
    });
    return out;
  }

  std::size_t count_kind(LayerKind k) const {
    return static_cast<std::size_t>(
        std::count_if(layers.begin(), layers.end(), [k](const Layer<T>& l) { return l.kind == k; }));
  }

  void zero_grad() {
    for_each_slot([](const std::string&, Slot<T>& s) { s.value.zero_grad(); });
  }
};

/// Converts every slot to another scalar type, keeping structure.
template <typename U, typename T>
ModuleGraph<U> cast_graph(const ModuleGraph<T>& g) {
  ModuleGraph<U> out;
  out.config = g.config;
  out.input = g.input;
  out.output = g.output;
  out.mode = g.mode;
  out.folded = g.folded;
  for (const auto& l : g.layers) {
    Layer<U> nl{l.path, l.kind, l.inputs, l.outputs, l.attrs, {}};
    for (const auto& s : l.slots) nl.slots.emplace_back(s.name, s.value.value().template cast<U>(), s.learnable);
    out.layers.push_back(std::move(nl));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composite operators shared by the executor and the block builders.

/// Channel recalibration: x * sigmoid(W * GAP(x) + b), gate broadcast over H,W.
template <typename T>
Var<T> scam(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_rank(x.value(), 4, "scam");
  const auto C = x.value().dim(1);
  if (w.shape() != Shape{C, C}) {
    throw Error("shape", "scam: weight must be " + to_string(Shape{C, C}) + ", got " + to_string(w.shape()));
  }
  auto gate = ops::sigmoid(ops::linear(ops::global_avg_pool(x), w, b));
  return ops::scale_channels(x, gate);
}

/// softmax(Q K^T / sqrt(C_q)) V over token sequences Q [N,P,Cq], K [N,P,Ck], V [N,P,Ca].
template <typename T>
Var<T> single_head_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v) {
  require_rank(q.value(), 3, "attention");
  require_rank(k.value(), 3, "attention");
  require_rank(v.value(), 3, "attention");
  if (q.value().dim(2) != k.value().dim(2)) throw Error("shape", "attention: query and key widths differ");
  if (q.value().dim(1) != k.value().dim(1) || k.value().dim(1) != v.value().dim(1)) {
    throw Error("shape", "attention: token counts differ");
  }
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.value().dim(2))));
  auto scores = ops::scale(ops::matmul(q, k, false, true), scale);
  return ops::matmul(ops::softmax_lastdim(scores), v);
}

// ---------------------------------------------------------------------------
// Execution

template <typename T>
using ValueEnv = std::unordered_map<std::string, Var<T>>;

template <typename T>
using LayerObserver = std::function<void(const Layer<T>&, const std::vector<Var<T>>&)>;

namespace detail {

template <typename T, typename L>
std::vector<Var<T>> apply_layer(L& layer, const std::vector<Var<T>>& in, BnMode mode) {
  auto want = [&](std::size_t n) {
    if (in.size() != n) throw Error("graph", layer.path + ": wrong number of inputs");
  };
  const auto& a = layer.attrs;
  switch (layer.kind) {
    case LayerKind::conv2d:
      want(1);
      return {ops::conv2d(in[0], layer.slot("weight"), layer.slot("bias"), a.stride, a.padding)};
    case LayerKind::dwconv2d:
      want(1);
      return {ops::depthwise_conv2d(in[0], layer.slot("weight"), layer.slot("bias"), a.stride, a.padding)};
    case LayerKind::pointwise:
      want(1);
      return {ops::pointwise(in[0], layer.slot("weight"), layer.slot("bias"))};
    case LayerKind::batchnorm: {
      want(1);
      if (mode == BnMode::train) {
        if constexpr (std::is_const_v<L>) {
          throw Error("state", layer.path + ": train-mode batchnorm needs a mutable graph");
        } else {
          return {ops::batchnorm_train(in[0], layer.slot("gamma"), layer.slot("beta"),
                                       layer.slot("running_mean").mutable_value(),
                                       layer.slot("running_var").mutable_value(), a.momentum, a.eps)};
        }
      }
      return {ops::batchnorm_infer(in[0], layer.slot("gamma"), layer.slot("beta"),
                                   layer.slot("running_mean").value(), layer.slot("running_var").value(),
                                   a.eps)};
    }
    case LayerKind::channel_affine:
      want(1);
      return {ops::channel_affine(in[0], layer.slot("scale"), layer.slot("shift"))};
    case LayerKind::scam:
      want(1);
      return {scam(in[0], layer.slot("weight"), layer.slot("bias"))};
    case LayerKind::gelu:
      want(1);
      return {ops::gelu(in[0])};
    case LayerKind::split: {
      want(1);
      std::vector<Var<T>> out;
      std::int64_t off = 0;
      for (auto w : a.splits) {
        out.push_back(ops::slice_channels(in[0], off, off + w));
        off += w;
      }
      if (off != in[0].value().dim(1)) {
        throw Error("shape", layer.path + ": split widths sum to " + std::to_string(off) + " but input has " +
                                 std::to_string(in[0].value().dim(1)) + " channels");
      }
      return out;
    }
    case LayerKind::attention: {
      want(3);
      const auto H = in[2].value().dim(2), W = in[2].value().dim(3);
      auto o = single_head_attention(ops::to_tokens(in[0]), ops::to_tokens(in[1]), ops::to_tokens(in[2]));
      return {ops::from_tokens(o, H, W)};
    }
    case LayerKind::concat:
      return {ops::concat_channels(in)};
    case LayerKind::layerscale_add:
      want(2);
      return {ops::layerscale_add(in[0], layer.slot("lambda"), in[1])};
    case LayerKind::global_avg_pool:
      want(1);
      return {ops::global_avg_pool(in[0])};
    case LayerKind::linear:
      want(1);
      return {ops::linear(in[0], layer.slot("weight"), layer.slot("bias"))};
  }
  throw Error("graph", "unknown layer kind");
}

template <typename T, typename G>
void run_layers(G& g, ValueEnv<T>& env, BnMode mode, std::size_t start, bool release,
                const LayerObserver<T>* observer) {
  std::unordered_map<std::string, std::size_t> last_use;
  if (release) {
    for (std::size_t i = start; i < g.layers.size(); ++i)
      for (const auto& name : g.layers[i].inputs) last_use[name] = i;
  }
  std::vector<Var<T>> in;
  for (std::size_t i = start; i < g.layers.size(); ++i) {
    auto& layer = g.layers[i];
    in.clear();
    for (const auto& name : layer.inputs) {
      auto it = env.find(name);
      if (it == env.end()) throw Error("graph", layer.path + ": input '" + name + "' is not available");
      in.push_back(it->second);
    }
    auto out = apply_layer<T>(layer, in, mode);
    if (out.size() != layer.outputs.size()) throw Error("graph", layer.path + ": output count mismatch");
    if (observer) (*observer)(layer, out);
    for (std::size_t o = 0; o < out.size(); ++o) env[layer.outputs[o]] = std::move(out[o]);
    if (release) {
      for (const auto& name : layer.inputs)
        if (last_use[name] == i && name != g.output) env.erase(name);
    }
  }
}

}  // namespace detail

/// Runs the graph in the given batchnorm mode, recording a trace when grad
/// mode is on. Train mode updates batchnorm running statistics.
template <typename T>
Var<T> forward(ModuleGraph<T>& g, const Var<T>& x, BnMode mode,
               const LayerObserver<T>* observer = nullptr) {
  ValueEnv<T> env{{g.input, x}};
  detail::run_layers<T>(g, env, mode, 0, !grad_enabled(), observer);
  return env.at(g.output);
}

template <typename T>
Var<T> forward(ModuleGraph<T>& g, const Var<T>& x) {
  return forward(g, x, g.mode);
}

/// Inference with running statistics and no trace. Safe to call concurrently
/// on the same graph.
template <typename T>
Tensor<T> infer(const ModuleGraph<T>& g, const Tensor<T>& x, const LayerObserver<T>* observer = nullptr) {
  NoGradGuard guard;
  ValueEnv<T> env{{g.input, Var<T>::leaf(x)}};
  detail::run_layers<T>(g, env, BnMode::infer, 0, true, observer);
  return env.at(g.output).value();
}

/// Runs layers [start, end) against an existing environment, keeping every value.
template <typename T>
Var<T> resume(ModuleGraph<T>& g, ValueEnv<T>& env, std::size_t start, BnMode mode) {
  detail::run_layers<T>(g, env, mode, start, false, nullptr);
  return env.at(g.output);
}

}  // namespace parformer
