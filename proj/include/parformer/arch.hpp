#pragma once

// ParFormer building blocks, elaborated into ModuleGraph layers.
//
//   SCAPE:    overlapped strided conv (kernel 2S-1, stride S, pad S-1) -> BN -> SCAM
//   Mixer:    BN -> 1x1 in-proj -> split(Q, K, V_a, V_c)
//             A = attention(Q, K, V_a),  V_dw = dwconv(gelu(V_c))
//             -> 1x1 out-proj on cat(A, V_dw)
//   FFN:      BN -> 1x1 C->aC -> GELU -> 1x1 aC->C
//   Block:    x' = x + l_mix * Mixer(x);  x'' = x' + l_ffn * FFN(x')
//   Head:     GAP -> linear C4->hidden -> GELU -> linear hidden->classes

#include <cstdint>
#include <random>
#include <string>
#include <utility>

#include "parformer/config.hpp"
#include "parformer/graph.hpp"

namespace parformer {

/// How conv/linear weights are filled. `zeros` skips sampling and is meant
/// for shape-only work such as parameter and MAC ledgers.
enum class WeightInit { random, zeros };

/// Appends layers to a graph with deterministic initialization.
template <typename T>
class GraphBuilder {
 public:
  GraphBuilder(ModuleGraph<T>& graph, std::uint64_t seed, WeightInit init = WeightInit::random)
      : g_(graph), rng_(seed), init_(init) {}

  ModuleGraph<T>& graph() { return g_; }

  std::string conv2d(const std::string& path, const std::string& in, std::int64_t cin, std::int64_t cout,
                     std::int64_t k, std::int64_t stride, std::int64_t pad) {
    auto& l = add(path, LayerKind::conv2d, {in});
    l.attrs.stride = stride;
    l.attrs.padding = pad;
    l.slots.emplace_back("weight", trunc_normal({cout, cin, k, k}), true);
    l.slots.emplace_back("bias", Tensor<T>({cout}), true);
    return l.outputs[0];
  }

  std::string dwconv2d(const std::string& path, const std::string& in, std::int64_t c, std::int64_t k) {
    auto& l = add(path, LayerKind::dwconv2d, {in});
    l.attrs.padding = k / 2;
    l.slots.emplace_back("weight", trunc_normal({c, 1, k, k}), true);
    l.slots.emplace_back("bias", Tensor<T>({c}), true);
    return l.outputs[0];
  }

  std::string pointwise(const std::string& path, const std::string& in, std::int64_t cin, std::int64_t cout) {
    auto& l = add(path, LayerKind::pointwise, {in});
    l.slots.emplace_back("weight", trunc_normal({cout, cin}), true);
    l.slots.emplace_back("bias", Tensor<T>({cout}), true);
    return l.outputs[0];
  }

  std::string linear(const std::string& path, const std::string& in, std::int64_t cin, std::int64_t cout) {
    auto& l = add(path, LayerKind::linear, {in});
    l.slots.emplace_back("weight", trunc_normal({cout, cin}), true);
    l.slots.emplace_back("bias", Tensor<T>({cout}), true);
    return l.outputs[0];
  }

  std::string batchnorm(const std::string& path, const std::string& in, std::int64_t c) {
    auto& l = add(path, LayerKind::batchnorm, {in});
    l.attrs.eps = g_.config.bn_eps;
    l.attrs.momentum = g_.config.bn_momentum;
    l.slots.emplace_back("gamma", Tensor<T>({c}, T(1)), true);
    l.slots.emplace_back("beta", Tensor<T>({c}), true);
    l.slots.emplace_back("running_mean", Tensor<T>({c}), false);
    l.slots.emplace_back("running_var", Tensor<T>({c}, T(1)), false);
    return l.outputs[0];
  }

  /// SCAM starts with W_s = 0, b_s = 0, i.e. a constant 0.5 gate.
  std::string scam(const std::string& path, const std::string& in, std::int64_t c) {
    auto& l = add(path, LayerKind::scam, {in});
    l.slots.emplace_back("weight", Tensor<T>({c, c}), true);
    l.slots.emplace_back("bias", Tensor<T>({c}), true);
    return l.outputs[0];
  }

  std::string gelu(const std::string& path, const std::string& in) {
    return add(path, LayerKind::gelu, {in}).outputs[0];
  }

  std::vector<std::string> split(const std::string& path, const std::string& in,
                                 const std::vector<std::pair<std::string, std::int64_t>>& parts) {
    auto& l = add(path, LayerKind::split, {in}, 0);
    for (const auto& [name, width] : parts) {
      l.outputs.push_back(path + ":" + name);
      l.attrs.splits.push_back(width);
    }
    return l.outputs;
  }

  std::string attention(const std::string& path, const std::string& q, const std::string& k,
                        const std::string& v) {
    return add(path, LayerKind::attention, {q, k, v}).outputs[0];
  }

  std::string concat(const std::string& path, std::vector<std::string> in) {
    return add(path, LayerKind::concat, std::move(in)).outputs[0];
  }

  std::string layerscale_add(const std::string& path, const std::string& residual, const std::string& branch,
                             std::int64_t c) {
    auto& l = add(path, LayerKind::layerscale_add, {residual, branch});
    l.slots.emplace_back("lambda", Tensor<T>({c}, static_cast<T>(g_.config.layerscale_init)), true);
    return l.outputs[0];
  }

  std::string global_avg_pool(const std::string& path, const std::string& in) {
    return add(path, LayerKind::global_avg_pool, {in}).outputs[0];
  }

 private:
  Layer<T>& add(const std::string& path, LayerKind kind, std::vector<std::string> inputs, int n_out = 1) {
    for (const auto& l : g_.layers)
      if (l.path == path) throw Error("graph", "duplicate layer path '" + path + "'");
    Layer<T> l{path, kind, std::move(inputs), {}, {}, {}};
    if (n_out == 1) l.outputs.push_back(path);
    g_.layers.push_back(std::move(l));
    return g_.layers.back();
  }

  // Normal(0, std) truncated to +-2 std by resampling.
  Tensor<T> trunc_normal(Shape shape) {
    Tensor<T> t(std::move(shape));
    if (init_ == WeightInit::zeros) return t;
    const double sd = g_.config.init_std;
    std::normal_distribution<double> dist(0.0, sd);
    for (auto& v : t.vec()) {
      double x;
      do x = dist(rng_);
      while (std::abs(x) > 2 * sd);
      v = static_cast<T>(x);
    }
    return t;
  }

  ModuleGraph<T>& g_;
  Rng rng_;
  WeightInit init_;
};

/// Patch embedding for one stage; returns the output value name.
template <typename T>
std::string append_scape(GraphBuilder<T>& b, const std::string& prefix, const std::string& in,
                         std::int64_t cin, const StageConfig& s, ScamPlacement placement) {
  std::string x = in;
  if (placement == ScamPlacement::before_pe) x = b.scam(prefix + ".scam", x, cin);
  x = b.conv2d(prefix + ".conv", x, cin, s.dim, s.patch_kernel, s.patch_stride, s.patch_padding());
  x = b.batchnorm(prefix + ".bn", x, s.dim);
  if (placement == ScamPlacement::after_pe) x = b.scam(prefix + ".scam", x, s.dim);
  return x;
}

template <typename T>
std::string append_parallel_mixer(GraphBuilder<T>& b, const std::string& prefix, const std::string& in,
                                  const StageConfig& s) {
  const std::int64_t C = s.dim;
  auto x = b.batchnorm(prefix + ".norm", in, C);
  x = b.pointwise(prefix + ".in_proj", x, C, s.in_proj_width());
  std::string vdw;
  std::vector<std::string> mixed;
  if (s.has_attention()) {
    auto parts = b.split(prefix + ".split", x,
                         {{"q", s.query_dim()}, {"k", s.key_dim()}, {"v_attn", s.attn_dim()}, {"v_conv", s.conv_dim()}});
    mixed.push_back(b.attention(prefix + ".attn", parts[0], parts[1], parts[2]));
    vdw = parts[3];
  } else {
    vdw = x;
  }
  vdw = b.gelu(prefix + ".act", vdw);
  vdw = b.dwconv2d(prefix + ".dwconv", vdw, s.conv_dim(), s.dw_kernel);
  if (mixed.empty()) {
    x = vdw;
  } else {
    mixed.push_back(vdw);
    x = b.concat(prefix + ".concat", mixed);
  }
  return b.pointwise(prefix + ".out_proj", x, s.mixed_width(), C);
}

template <typename T>
std::string append_ffn(GraphBuilder<T>& b, const std::string& prefix, const std::string& in, const StageConfig& s) {
  auto x = b.batchnorm(prefix + ".norm", in, s.dim);
  x = b.pointwise(prefix + ".fc1", x, s.dim, s.ffn_hidden());
  x = b.gelu(prefix + ".act", x);
  return b.pointwise(prefix + ".fc2", x, s.ffn_hidden(), s.dim);
}

template <typename T>
std::string append_encoder_block(GraphBuilder<T>& b, const std::string& prefix, const std::string& in,
                                 const StageConfig& s) {
  auto m = append_parallel_mixer(b, prefix + ".mixer", in, s);
  auto x = b.layerscale_add(prefix + ".mixer_residual", in, m, s.dim);
  auto f = append_ffn(b, prefix + ".ffn", x, s);
  return b.layerscale_add(prefix + ".ffn_residual", x, f, s.dim);
}

template <typename T>
std::string append_classifier_head(GraphBuilder<T>& b, const std::string& in, std::int64_t c, std::int64_t hidden,
                                   std::int64_t classes) {
  auto x = b.global_avg_pool("head.pool", in);
  x = b.linear("head.fc1", x, c, hidden);
  x = b.gelu("head.act", x);
  return b.linear("head.fc2", x, hidden, classes);
}

/// Elaborates a model config into a ModuleGraph with initialized parameters.
/// Same config and seed give bit-identical parameters.
template <typename T = float>
ModuleGraph<T> build_model(const ModelConfig& config, std::uint64_t seed = 0,
                           WeightInit init = WeightInit::random) {
  validate(config);
  ModuleGraph<T> g;
  g.config = config;
  GraphBuilder<T> b(g, seed, init);
  std::string x = g.input;
  std::int64_t cin = config.in_channels;
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    const auto& s = config.stages[i];
    const std::string stage = "stage" + std::to_string(i + 1);
    x = append_scape(b, stage + ".embed", x, cin, s, config.scam_placement);
    for (int blk = 0; blk < s.blocks; ++blk) x = append_encoder_block(b, stage + ".block" + std::to_string(blk + 1), x, s);
    cin = s.dim;
  }
  g.output = append_classifier_head(b, x, cin, config.head_hidden, config.num_classes);
  return g;
}

/// Graph holding a single encoder block of the given stage, for isolated tests.
template <typename T = float>
ModuleGraph<T> build_block(const ModelConfig& config, std::size_t stage, std::uint64_t seed = 0) {
  validate(config);
  ModuleGraph<T> g;
  g.config = config;
  GraphBuilder<T> b(g, seed);
  g.output = append_encoder_block(b, "block", g.input, config.stages.at(stage));
  return g;
}

/// Stage names in order, e.g. "stage1".."stage4".
inline std::vector<std::string> stage_names(const ModelConfig& c) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < c.stages.size(); ++i) names.push_back("stage" + std::to_string(i + 1));
  return names;
}

/// Value name holding the output of each stage (last layer whose path starts with "stageN.").
template <typename T>
std::vector<std::string> stage_outputs(const ModuleGraph<T>& g) {
  std::vector<std::string> out;
  for (const auto& name : stage_names(g.config)) {
    std::string last;
    for (const auto& l : g.layers)
      if (l.path.rfind(name + ".", 0) == 0) last = l.outputs.back();
    out.push_back(last);
  }
  return out;
}

}  // namespace parformer
