#pragma once

// Pieces of the command-line tool that are worth testing on their own:
// report formatting, seed resolution and checkpoint restore.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "parformer/analysis.hpp"
#include "parformer/arch.hpp"
#include "parformer/bench.hpp"
#include "parformer/checkpoint.hpp"
#include "parformer/config_io.hpp"

namespace parformer::cli {

/// PARFORMER_SEED wins over --seed, which wins over the fallback.
inline std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::uint64_t fallback) {
  if (const char* env = std::getenv("PARFORMER_SEED"); env && *env) {
    const std::string s(env);
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      if (s.front() == '-') throw std::invalid_argument("negative");
      v = std::stoull(s, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used != s.size() || used == 0) throw Error("config", "PARFORMER_SEED must be a non-negative integer, got '" + s + "'");
    return v;
  }
  return flag.value_or(fallback);
}

/// Config sidecar written next to every checkpoint.
inline std::filesystem::path sidecar_path(const std::filesystem::path& ckpt) {
  auto p = ckpt;
  p += ".json";
  return p;
}

namespace detail {
inline std::string pad(std::string s, std::size_t w) {
  if (s.size() < w) s.append(w - s.size(), ' ');
  return s;
}
}  // namespace detail

/// Stage table (one column per stage) followed by a stage-level shape trace
/// and the parameter/MAC totals.
inline std::string format_describe(const ModelConfig& c, std::int64_t input) {
  validate(c);
  const auto g = build_model<float>(c, 0, WeightInit::zeros);
  const Shape in{1, c.in_channels, input, input};
  const auto tr = infer_shapes(g, in);
  const auto outs = stage_outputs(g);
  const auto n = c.stages.size();

  std::vector<std::vector<std::string>> rows;
  auto row = [&](std::string label, auto cell) {
    std::vector<std::string> r{std::move(label)};
    for (std::size_t i = 0; i < n; ++i) r.push_back(cell(i, c.stages[i]));
    rows.push_back(std::move(r));
  };
  std::vector<std::string> header{""};
  for (const auto& name : stage_names(c)) header.push_back(name);
  rows.push_back(header);
  row("token size", [&](std::size_t i, const StageConfig&) {
    const auto& s = tr.values.at(outs[i]);
    return std::to_string(s[2]) + "x" + std::to_string(s[3]);
  });
  row("patch size", [](std::size_t, const StageConfig& s) {
    return std::to_string(s.patch_kernel) + "x" + std::to_string(s.patch_kernel) + " s" + std::to_string(s.patch_stride);
  });
  row("dim (C)", [](std::size_t, const StageConfig& s) { return std::to_string(s.dim); });
  row("ratio (r)", [](std::size_t, const StageConfig& s) { return s.ratio.str(); });
  row("dwconv dim (C_c)", [](std::size_t, const StageConfig& s) { return std::to_string(s.conv_dim()); });
  row("attn dim (C_a)", [](std::size_t, const StageConfig& s) { return std::to_string(s.attn_dim()); });
  row("qk dim (C_q, C_k)", [](std::size_t, const StageConfig& s) {
    return s.has_attention() ? std::to_string(s.query_dim()) + ", " + std::to_string(s.key_dim()) : std::string("0");
  });
  row("ffn ratio", [](std::size_t, const StageConfig& s) { return s.ffn_ratio.str(); });
  row("blocks", [](std::size_t, const StageConfig& s) { return std::to_string(s.blocks); });

  std::vector<std::size_t> width(n + 1, 0);
  for (const auto& r : rows)
    for (std::size_t k = 0; k < r.size(); ++k) width[k] = std::max(width[k], r[k].size());

  std::ostringstream os;
  os << "model: " << c.name << "\n";
  os << "input: " << c.in_channels << "x" << input << "x" << input << "\n\n";
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t k = 0; k < r.size(); ++k) line += detail::pad(r[k], width[k] + (k + 1 < r.size() ? 3 : 0));
    while (!line.empty() && line.back() == ' ') line.pop_back();
    os << line << "\n";
  }
  os << "scam: " << placement_name(c.scam_placement) << "\n";
  os << "head: global pool, fc " << c.head_hidden << " hidden, " << c.num_classes << " classes\n";
  os << "ratio row: [";
  for (std::size_t i = 0; i < n; ++i) os << (i ? ", " : "") << c.stages[i].ratio.str();
  os << "]\n\n";

  std::vector<std::pair<std::string, Shape>> trace{{"input", in}};
  for (std::size_t i = 0; i < n; ++i) {
    const std::string prefix = "stage" + std::to_string(i + 1) + ".embed.";
    std::string embed;
    for (std::size_t li = 0; li < g.layers.size(); ++li)
      if (g.layers[li].path.rfind(prefix, 0) == 0) embed = g.layers[li].outputs.back();
    trace.emplace_back("stage" + std::to_string(i + 1) + ".embed", tr.values.at(embed));
    trace.emplace_back("stage" + std::to_string(i + 1), tr.values.at(outs[i]));
  }
  for (std::size_t li = 0; li < g.layers.size(); ++li) {
    const auto& l = g.layers[li];
    if (l.path.rfind("head.", 0) == 0) trace.emplace_back(l.path == "head.fc2" ? "logits" : l.path, tr.layer_outputs[li][0]);
  }
  std::size_t w = 0;
  for (const auto& [name, _] : trace) w = std::max(w, name.size());
  os << "shape trace:\n";
  for (const auto& [name, shape] : trace) os << "  " << detail::pad(name, w + 2) << format_shape(shape) << "\n";

  const auto rep = count_flops(g, in);
  char buf[160];
  std::snprintf(buf, sizeof buf, "\nparams: %lld (%.3f M)\nMACs:   %lld (%.3f G)\n", static_cast<long long>(rep.total_params),
                static_cast<double>(rep.total_params) / 1e6, static_cast<long long>(rep.total_macs),
                static_cast<double>(rep.total_macs) / 1e9);
  os << buf;
  return os.str();
}

inline std::string format_bench(const BenchResult& r) {
  std::ostringstream os;
  char buf[200];
  std::snprintf(buf, sizeof buf, "model: %s  batch: %lld  input: %lldx%lld  repeats: %d  warmup: %d\n", r.model.c_str(),
                static_cast<long long>(r.options.batch), static_cast<long long>(r.options.input),
                static_cast<long long>(r.options.input), r.options.repeats, r.options.warmup);
  os << buf;
  os << "timing: median of repeats, process CPU time, single thread\n";
  std::snprintf(buf, sizeof buf, "%-10s %8s %14s %12s\n", "graph", "layers", "median_s", "img/s");
  os << buf;
  for (const auto* side : {&r.unfolded, &r.folded}) {
    std::snprintf(buf, sizeof buf, "%-10s %8zu %14.6f %12.3f\n", side == &r.unfolded ? "unfolded" : "folded",
                  side->layers, side->median_seconds, side->images_per_sec);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "folded/unfolded throughput: %.4f\n", r.folded.images_per_sec / r.unfolded.images_per_sec);
  os << buf;
  return os.str();
}

/// Builds the model for `cfg` and fills it from the checkpoint. A checkpoint
/// written from a folded graph is recognized by its tensor names.
template <typename T>
ModuleGraph<T> restore_graph(const ModelConfig& cfg, const Checkpoint& ck) {
  auto g = build_model<T>(cfg, 0, WeightInit::zeros);
  bool unfolded_names = true;
  std::size_t slots = 0;
  g.for_each_slot([&](const std::string& name, const Slot<T>&) {
    unfolded_names = unfolded_names && ck.contains(name);
    ++slots;
  });
  if (!unfolded_names || ck.size() != slots) {
    auto folded = fold_batchnorm(g);
    load_into(folded, ck);
    return folded;
  }
  load_into(g, ck);
  return g;
}

inline DType checkpoint_dtype(const Checkpoint& ck) {
  if (ck.size() == 0) throw Error("format", "checkpoint holds no tensors");
  const auto d = ck.entries().front().dtype;
  for (const auto& e : ck.entries())
    if (e.dtype != d) throw Error("format", "checkpoint mixes f32 and f64 tensors");
  return d;
}

}  // namespace parformer::cli
