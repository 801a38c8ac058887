#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "parformer/tensor.hpp"

namespace parformer {

/// Non-negative rational number, kept exact so that channel splits such as
/// r = 1/4 never suffer from floating point rounding.
struct Ratio {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Ratio() = default;
  Ratio(std::int64_t n, std::int64_t d = 1) : num(n), den(d) {
    if (den <= 0) throw Error("config", "ratio denominator must be positive");
    if (num < 0) throw Error("config", "ratio must be non-negative");
    const auto g = std::gcd(num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool is_zero() const { return num == 0; }

  /// round(this * c), halves rounded up.
  std::int64_t times_rounded(std::int64_t c) const { return (2 * num * c + den) / (2 * den); }

  std::string str() const {
    return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den);
  }

  static Ratio parse(const std::string& s) {
    try {
      const auto slash = s.find('/');
      std::size_t used = 0;
      if (slash == std::string::npos) {
        const auto n = std::stoll(s, &used);
        if (used != s.size()) throw Error("config", "bad ratio '" + s + "'");
        return Ratio(n);
      }
      const auto n = std::stoll(s.substr(0, slash), &used);
      if (used != slash) throw Error("config", "bad ratio '" + s + "'");
      const auto rest = s.substr(slash + 1);
      const auto d = std::stoll(rest, &used);
      if (used != rest.size()) throw Error("config", "bad ratio '" + s + "'");
      return Ratio(n, d);
    } catch (const std::logic_error&) {
      throw Error("config", "bad ratio '" + s + "'");
    }
  }

  friend bool operator==(const Ratio& a, const Ratio& b) { return a.num == b.num && a.den == b.den; }
};

enum class ScamPlacement { after_pe, before_pe, none };

inline const char* placement_name(ScamPlacement p) {
  switch (p) {
    case ScamPlacement::after_pe: return "after_pe";
    case ScamPlacement::before_pe: return "before_pe";
    case ScamPlacement::none: return "none";
  }
  return "?";
}

inline ScamPlacement parse_placement(const std::string& s) {
  if (s == "after_pe") return ScamPlacement::after_pe;
  if (s == "before_pe") return ScamPlacement::before_pe;
  if (s == "none") return ScamPlacement::none;
  throw Error("config", "unknown scam_placement '" + s + "'");
}

/// One pyramid stage: a patch-embedding downsampler followed by `blocks`
/// encoder blocks.
struct StageConfig {
  int patch_kernel = 3;
  int patch_stride = 2;
  int dim = 0;
  Ratio ratio;      // fraction of channels routed to attention
  int qk_dim = 32;  // query/key width when the attention branch exists
  Ratio ffn_ratio{2};
  int blocks = 1;
  int dw_kernel = 3;

  int patch_padding() const { return patch_stride - 1; }
  int attn_dim() const { return static_cast<int>(ratio.times_rounded(dim)); }
  int conv_dim() const { return 2 * (dim - attn_dim()); }
  bool has_attention() const { return attn_dim() > 0; }
  int query_dim() const { return has_attention() ? qk_dim : 0; }
  int key_dim() const { return query_dim(); }
  int in_proj_width() const { return query_dim() + key_dim() + attn_dim() + conv_dim(); }
  int mixed_width() const { return attn_dim() + conv_dim(); }
  int ffn_hidden() const {
    return static_cast<int>(static_cast<std::int64_t>(dim) * ffn_ratio.num / ffn_ratio.den);
  }

  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

struct ModelConfig {
  std::string name = "custom";
  std::vector<StageConfig> stages;
  int in_channels = 3;
  int head_hidden = 1280;
  int num_classes = 1000;
  double layerscale_init = 1e-5;
  ScamPlacement scam_placement = ScamPlacement::after_pe;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  double init_std = 0.02;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Throws Error("config") on any violated invariant.
inline void validate(const ModelConfig& c) {
  auto fail = [&](const std::string& m) { throw Error("config", c.name + ": " + m); };
  if (c.stages.empty()) fail("at least one stage is required");
  if (c.in_channels < 1) fail("in_channels must be >= 1");
  if (c.head_hidden < 1) fail("head_hidden must be >= 1");
  if (c.num_classes < 1) fail("num_classes must be >= 1");
  if (!(c.layerscale_init >= 0) || !std::isfinite(c.layerscale_init)) fail("layerscale_init must be finite and >= 0");
  if (!(c.bn_eps > 0)) fail("bn_eps must be positive");
  if (!(c.bn_momentum >= 0 && c.bn_momentum <= 1)) fail("bn_momentum must lie in [0,1]");
  if (!(c.init_std > 0)) fail("init_std must be positive");
  int prev = 0;
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    const auto& s = c.stages[i];
    const std::string at = "stage" + std::to_string(i + 1) + ": ";
    if (s.patch_stride < 1) fail(at + "patch_stride must be >= 1");
    if (s.patch_kernel != 2 * s.patch_stride - 1) fail(at + "patch_kernel must equal 2*patch_stride-1");
    if (s.dim < 1) fail(at + "dim must be >= 1");
    if (s.dim < prev) fail(at + "stage dims must be nondecreasing");
    prev = s.dim;
    if (s.ratio.num > s.ratio.den) fail(at + "ratio must lie in [0,1]");
    if (s.has_attention() && (s.qk_dim < 1 || s.qk_dim > 32)) fail(at + "qk_dim must lie in [1,32]");
    if (s.ffn_ratio.is_zero()) fail(at + "ffn_ratio must be positive");
    if ((static_cast<std::int64_t>(s.dim) * s.ffn_ratio.num) % s.ffn_ratio.den != 0) {
      fail(at + "ffn_ratio * dim must be an integer");
    }
    if (s.blocks < 0) fail(at + "blocks must be >= 0");
    if (s.dw_kernel < 1 || s.dw_kernel % 2 == 0) fail(at + "dw_kernel must be odd and >= 1");
  }
}

namespace detail {
inline ModelConfig pyramid(std::string name, std::vector<int> dims, std::vector<int> blocks,
                           std::vector<Ratio> ratios) {
  ModelConfig c;
  c.name = std::move(name);
  for (std::size_t i = 0; i < dims.size(); ++i) {
    StageConfig s;
    s.patch_stride = i == 0 ? 4 : 2;
    s.patch_kernel = 2 * s.patch_stride - 1;
    s.dim = dims[i];
    s.ratio = ratios[i];
    s.blocks = blocks[i];
    c.stages.push_back(s);
  }
  return c;
}
}  // namespace detail

/// Variant presets T, S, M, L and the desk-scale "micro" model.
inline ModelConfig preset(const std::string& name) {
  const Ratio q(1, 4);
  if (name == "T") return detail::pyramid("T", {48, 96, 192, 384}, {1, 2, 7, 2}, {0, 0, 0, q});
  if (name == "S") return detail::pyramid("S", {64, 128, 256, 512}, {1, 2, 7, 2}, {0, 0, q, q});
  if (name == "M") return detail::pyramid("M", {96, 192, 384, 768}, {1, 2, 7, 2}, {0, 0, q, q});
  if (name == "L") return detail::pyramid("L", {112, 224, 448, 896}, {2, 4, 9, 3}, {0, 0, q, q});
  if (name == "micro") {
    auto c = detail::pyramid("micro", {8, 16, 32, 64}, {1, 1, 2, 1}, {0, 0, 0, q});
    c.stages[3].qk_dim = 16;
    c.head_hidden = 64;
    c.num_classes = 4;
    return c;
  }
  throw Error("config", "unknown variant '" + name + "' (expected T, S, M, L or micro)");
}

/// Copy of `c` with the per-stage mixer ratios replaced (PM-ratio ablation).
inline ModelConfig with_pm_ratios(ModelConfig c, const std::vector<Ratio>& ratios) {
  if (ratios.size() != c.stages.size()) throw Error("config", "one ratio per stage is required");
  for (std::size_t i = 0; i < ratios.size(); ++i) c.stages[i].ratio = ratios[i];
  return c;
}

/// First `n` stages of `c`.
inline ModelConfig truncated(ModelConfig c, std::size_t n) {
  if (n == 0 || n > c.stages.size()) throw Error("config", "cannot truncate to that many stages");
  c.stages.resize(n);
  c.name += "-" + std::to_string(n) + "stage";
  return c;
}

}  // namespace parformer
