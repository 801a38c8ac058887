#pragma once

// Static analysis over a ModuleGraph: symbolic shape inference, the
// parameter / MAC ledger, and inference-time batchnorm folding.
//
// FLOPs are counted as multiply-accumulates (1 MAC = 1 FLOP). Convolutions,
// pointwise and linear layers, the SCAM linear and the two attention matmuls
// are counted; normalization, activations, softmax and residual adds are not.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "parformer/graph.hpp"

namespace parformer {

struct ShapeTrace {
  std::vector<std::vector<Shape>> layer_outputs;  // parallel to graph.layers
  std::unordered_map<std::string, Shape> values;
};

namespace detail {
inline void expect(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw Error("shape", path + ": " + what);
}
}  // namespace detail

/// Symbolic walk; no tensors are allocated.
template <typename T>
ShapeTrace infer_shapes(const ModuleGraph<T>& g, const Shape& input) {
  using detail::expect;
  ShapeTrace tr;
  tr.values[g.input] = input;
  for (const auto& l : g.layers) {
    std::vector<Shape> in;
    for (const auto& name : l.inputs) {
      auto it = tr.values.find(name);
      if (it == tr.values.end()) throw Error("graph", l.path + ": input '" + name + "' is not available");
      in.push_back(it->second);
    }
    const auto& p = l.path;
    std::vector<Shape> out;
    auto rank4 = [&](const Shape& s) { expect(s.size() == 4, p, "expected a rank-4 input, got " + to_string(s)); };
    switch (l.kind) {
      case LayerKind::conv2d:
      case LayerKind::dwconv2d: {
        rank4(in[0]);
        const auto& w = l.slot("weight").shape();
        const bool dw = l.kind == LayerKind::dwconv2d;
        expect(dw ? w[0] == in[0][1] : w[1] == in[0][1], p, "channel mismatch with weight " + to_string(w));
        const auto k = w[2];
        out.push_back({in[0][0], w[0], kernels::conv_out_extent(in[0][2], k, l.attrs.stride, l.attrs.padding),
                       kernels::conv_out_extent(in[0][3], k, l.attrs.stride, l.attrs.padding)});
        break;
      }
      case LayerKind::pointwise: {
        rank4(in[0]);
        const auto& w = l.slot("weight").shape();
        expect(w[1] == in[0][1], p, "channel mismatch with weight " + to_string(w));
        out.push_back({in[0][0], w[0], in[0][2], in[0][3]});
        break;
      }
      case LayerKind::batchnorm:
      case LayerKind::channel_affine:
      case LayerKind::scam:
        rank4(in[0]);
        expect((l.kind == LayerKind::scam ? l.slot("bias") : l.slots.front().value).value().size() ==
                   static_cast<std::size_t>(in[0][1]),
               p,
               "parameter width does not match channels");
        out.push_back(in[0]);
        break;
      case LayerKind::gelu:
        out.push_back(in[0]);
        break;
      case LayerKind::split: {
        rank4(in[0]);
        std::int64_t total = 0;
        for (auto w : l.attrs.splits) {
          out.push_back({in[0][0], w, in[0][2], in[0][3]});
          total += w;
        }
        expect(total == in[0][1], p, "split widths do not cover the input channels");
        break;
      }
      case LayerKind::attention:
        for (const auto& s : in) rank4(s);
        expect(in[0][1] == in[1][1], p, "query and key widths differ");
        expect(in[0][2] * in[0][3] == in[2][2] * in[2][3], p, "token counts differ");
        out.push_back(in[2]);
        break;
      case LayerKind::concat: {
        Shape s = in.at(0);
        rank4(s);
        s[1] = 0;
        for (const auto& x : in) {
          rank4(x);
          expect(x[0] == s[0] && x[2] == s[2] && x[3] == s[3], p, "incompatible concat inputs");
          s[1] += x[1];
        }
        out.push_back(s);
        break;
      }
      case LayerKind::layerscale_add:
        expect(in[0] == in[1], p, "residual and branch shapes differ");
        out.push_back(in[0]);
        break;
      case LayerKind::global_avg_pool:
        rank4(in[0]);
        out.push_back({in[0][0], in[0][1]});
        break;
      case LayerKind::linear: {
        const auto& w = l.slot("weight").shape();
        expect(in[0].size() == 2 && in[0][1] == w[1], p, "input width does not match weight " + to_string(w));
        out.push_back({in[0][0], w[0]});
        break;
      }
    }
    for (std::size_t i = 0; i < out.size(); ++i) tr.values[l.outputs.at(i)] = out[i];
    tr.layer_outputs.push_back(std::move(out));
  }
  return tr;
}

struct ReportRow {
  std::string path;
  std::string kind;
  Shape out_shape;  // empty when no input shape was given
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

struct AnalysisReport {
  std::string model;
  Shape input;  // empty for a parameter-only report
  std::vector<ReportRow> rows;
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;
};

template <typename T>
std::int64_t layer_params(const Layer<T>& l) {
  std::int64_t n = 0;
  for (const auto& s : l.slots)
    if (s.learnable) n += static_cast<std::int64_t>(s.value.value().size());
  return n;
}

template <typename T>
std::int64_t layer_macs(const Layer<T>& l, const std::vector<Shape>& in, const std::vector<Shape>& out) {
  auto spatial = [](const Shape& s) { return s[2] * s[3]; };
  switch (l.kind) {
    case LayerKind::conv2d: {
      const auto& w = l.slot("weight").shape();
      return out[0][0] * w[0] * w[1] * w[2] * w[3] * spatial(out[0]);
    }
    case LayerKind::dwconv2d: {
      const auto& w = l.slot("weight").shape();
      return out[0][0] * w[0] * w[2] * w[3] * spatial(out[0]);
    }
    case LayerKind::pointwise:
      return out[0][0] * in[0][1] * out[0][1] * spatial(out[0]);
    case LayerKind::scam:
      return in[0][0] * in[0][1] * in[0][1];
    case LayerKind::attention: {
      const auto P = spatial(in[0]);
      return in[0][0] * (P * P * in[0][1] + P * P * in[2][1]);
    }
    case LayerKind::linear:
      return in[0][0] * in[0][1] * out[0][1];
    default:
      return 0;
  }
}

/// Per-layer parameter and MAC ledger. With no input shape only parameters
/// are counted.
template <typename T>
AnalysisReport analyze(const ModuleGraph<T>& g, const std::optional<Shape>& input) {
  AnalysisReport r;
  r.model = g.config.name;
  std::optional<ShapeTrace> tr;
  if (input) {
    r.input = *input;
    tr = infer_shapes(g, *input);
  }
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& l = g.layers[i];
    ReportRow row{l.path, kind_name(l.kind), {}, layer_params(l), 0};
    if (tr) {
      std::vector<Shape> in;
      for (const auto& name : l.inputs) in.push_back(tr->values.at(name));
      row.out_shape = tr->layer_outputs[i].front();
      row.macs = layer_macs(l, in, tr->layer_outputs[i]);
    }
    r.total_params += row.params;
    r.total_macs += row.macs;
    r.rows.push_back(std::move(row));
  }
  return r;
}

template <typename T>
AnalysisReport count_params(const ModuleGraph<T>& g) {
  return analyze(g, std::nullopt);
}

template <typename T>
AnalysisReport count_flops(const ModuleGraph<T>& g, const Shape& input) {
  return analyze(g, input);
}

inline std::string format_shape(const Shape& s) {
  if (s.empty()) return "-";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

/// Aligned plain-text report.
inline std::string format_text(const AnalysisReport& r) {
  std::size_t wpath = 4, wkind = 4, wshape = 9;
  for (const auto& row : r.rows) {
    wpath = std::max(wpath, row.path.size());
    wkind = std::max(wkind, row.kind.size());
    wshape = std::max(wshape, format_shape(row.out_shape).size());
  }
  std::ostringstream os;
  os << "# model: " << r.model << "\n";
  os << "# input: " << format_shape(r.input) << "\n";
  os << "# FLOPs are multiply-accumulates (1 MAC = 1 FLOP)\n";
  os << std::left << std::setw(static_cast<int>(wpath)) << "path" << "  " << std::setw(static_cast<int>(wkind))
     << "kind" << "  " << std::setw(static_cast<int>(wshape)) << "out_shape" << "  " << std::right << std::setw(12)
     << "params" << "  " << std::setw(14) << "macs" << "\n";
  for (const auto& row : r.rows) {
    os << std::left << std::setw(static_cast<int>(wpath)) << row.path << "  " << std::setw(static_cast<int>(wkind))
       << row.kind << "  " << std::setw(static_cast<int>(wshape)) << format_shape(row.out_shape) << "  "
       << std::right << std::setw(12) << row.params << "  " << std::setw(14) << row.macs << "\n";
  }
  os << std::fixed << std::setprecision(3);
  os << "total params: " << r.total_params << " (" << r.total_params / 1e6 << " M)\n";
  os << "total MACs:   " << r.total_macs << " (" << r.total_macs / 1e9 << " G)\n";
  return os.str();
}

inline std::string format_csv(const AnalysisReport& r) {
  std::ostringstream os;
  os << "path,kind,out_shape,params,macs\n";
  for (const auto& row : r.rows)
    os << row.path << ',' << row.kind << ',' << format_shape(row.out_shape) << ',' << row.params << ','
       << row.macs << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Batchnorm folding

namespace detail {

inline bool foldable_producer(LayerKind k) {
  return k == LayerKind::conv2d || k == LayerKind::dwconv2d || k == LayerKind::pointwise;
}

template <typename T>
std::vector<std::size_t> consumers_of(const ModuleGraph<T>& g, const std::string& value) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < g.layers.size(); ++i)
    for (const auto& in : g.layers[i].inputs)
      if (in == value) {
        out.push_back(i);
        break;
      }
  return out;
}

template <typename T>
std::optional<std::size_t> producer_of(const ModuleGraph<T>& g, const std::string& value) {
  for (std::size_t i = 0; i < g.layers.size(); ++i)
    for (const auto& o : g.layers[i].outputs)
      if (o == value) return i;
  return std::nullopt;
}

}  // namespace detail

/// Absorbs every inference-mode batchnorm into an adjacent affine layer:
///   preceding conv/pointwise:  w' = w * s[co],  b' = (b - mu) * s[co] + beta
///   following pointwise:       w' = w * s[ci],  b' = b + sum_ci w[co,ci] * t[ci]
/// with s = gamma / sqrt(var + eps) and t = beta - mu * s. A batchnorm with no
/// foldable neighbour becomes a channel_affine layer.
template <typename T>
ModuleGraph<T> fold_batchnorm(const ModuleGraph<T>& src) {
  if (src.mode != BnMode::infer) throw Error("state", "fold_batchnorm needs an inference-mode graph");
  ModuleGraph<T> g = src;
  for (std::size_t i = 0; i < g.layers.size();) {
    if (g.layers[i].kind != LayerKind::batchnorm) {
      ++i;
      continue;
    }
    const Layer<T> bn = g.layers[i];
    const auto& in = bn.inputs[0];
    const auto& out = bn.outputs[0];
    const auto& gamma = bn.slot("gamma").value();
    const auto& beta = bn.slot("beta").value();
    const auto& mean = bn.slot("running_mean").value();
    const auto& var = bn.slot("running_var").value();
    const std::size_t C = gamma.size();
    std::vector<double> s(C), t(C);
    for (std::size_t c = 0; c < C; ++c) {
      s[c] = static_cast<double>(gamma[c]) / std::sqrt(static_cast<double>(var[c]) + bn.attrs.eps);
      t[c] = static_cast<double>(beta[c]) - static_cast<double>(mean[c]) * s[c];
    }

    auto producer = detail::producer_of(g, in);
    if (producer && detail::foldable_producer(g.layers[*producer].kind) && in != g.output &&
        detail::consumers_of(g, in).size() == 1) {
      auto& p = g.layers[*producer];
      auto& w = p.slot("weight").mutable_value();
      auto& b = p.slot("bias").mutable_value();
      const std::size_t per_out = w.size() / C;
      for (std::size_t co = 0; co < C; ++co) {
        for (std::size_t j = 0; j < per_out; ++j)
          w[co * per_out + j] = static_cast<T>(static_cast<double>(w[co * per_out + j]) * s[co]);
        b[co] = static_cast<T>(static_cast<double>(b[co]) * s[co] + t[co]);
      }
      p.outputs[0] = out;
      g.layers.erase(g.layers.begin() + static_cast<std::ptrdiff_t>(i));
      continue;
    }

    auto cons = detail::consumers_of(g, out);
    if (cons.size() == 1 && out != g.output && g.layers[cons[0]].kind == LayerKind::pointwise) {
      auto& q = g.layers[cons[0]];
      auto& w = q.slot("weight").mutable_value();
      auto& b = q.slot("bias").mutable_value();
      const std::size_t cout = static_cast<std::size_t>(w.dim(0));
      for (std::size_t co = 0; co < cout; ++co) {
        double shift = 0;
        for (std::size_t ci = 0; ci < C; ++ci) {
          const double wv = w[co * C + ci];
          shift += wv * t[ci];
          w[co * C + ci] = static_cast<T>(wv * s[ci]);
        }
        b[co] = static_cast<T>(static_cast<double>(b[co]) + shift);
      }
      for (auto& name : q.inputs)
        if (name == out) name = in;
      g.layers.erase(g.layers.begin() + static_cast<std::ptrdiff_t>(i));
      continue;
    }

    Layer<T> affine{bn.path, LayerKind::channel_affine, bn.inputs, bn.outputs, {}, {}};
    Tensor<T> scale({static_cast<std::int64_t>(C)}), shift({static_cast<std::int64_t>(C)});
    for (std::size_t c = 0; c < C; ++c) {
      scale[c] = static_cast<T>(s[c]);
      shift[c] = static_cast<T>(t[c]);
    }
    affine.slots.emplace_back("scale", std::move(scale), true);
    affine.slots.emplace_back("shift", std::move(shift), true);
    g.layers[i] = std::move(affine);
    ++i;
  }
  g.folded = true;
  return g;
}

}  // namespace parformer
