#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "oracles.hpp"
#include "parformer/analysis.hpp"
#include "parformer/arch.hpp"
#include "test_util.hpp"

namespace pf = parformer;
namespace ops = parformer::ops;
using pf::BnMode;
using pf::LayerKind;
using pf::ModelConfig;
using pf::ModuleGraph;
using pf::Ratio;
using pf::Rng;
using pf::Shape;
using pf::Tensor;
using pf::Var;
using testutil::leaf;
using testutil::weighted_sum;
using VarF = Var<float>;
using VarD = Var<double>;

namespace {

template <typename T = float>
ModuleGraph<T> scape_graph(const ModelConfig& cfg, std::size_t stage, std::int64_t cin, std::uint64_t seed = 0) {
  ModuleGraph<T> g;
  g.config = cfg;
  pf::GraphBuilder<T> b(g, seed);
  g.output = pf::append_scape(b, "embed", g.input, cin, cfg.stages[stage], cfg.scam_placement);
  return g;
}

template <typename T = float>
ModuleGraph<T> mixer_graph(const ModelConfig& cfg, std::size_t stage, std::uint64_t seed = 0) {
  ModuleGraph<T> g;
  g.config = cfg;
  pf::GraphBuilder<T> b(g, seed);
  g.output = pf::append_parallel_mixer(b, "mixer", g.input, cfg.stages[stage]);
  return g;
}

template <typename T = float>
ModuleGraph<T> ffn_graph(const ModelConfig& cfg, std::size_t stage, std::uint64_t seed = 0) {
  ModuleGraph<T> g;
  g.config = cfg;
  pf::GraphBuilder<T> b(g, seed);
  g.output = pf::append_ffn(b, "ffn", g.input, cfg.stages[stage]);
  return g;
}

template <typename T>
void randomize_bn(ModuleGraph<T>& g, Rng& rng) {
  for (auto& l : g.layers) {
    if (l.kind != LayerKind::batchnorm) continue;
    const auto C = static_cast<std::int64_t>(l.slot("gamma").value().size());
    l.slot("gamma").mutable_value() = Tensor<T>::uniform({C}, rng, T(0.5), T(1.5));
    l.slot("beta").mutable_value() = Tensor<T>::uniform({C}, rng, T(-0.5), T(0.5));
    l.slot("running_mean").mutable_value() = Tensor<T>::uniform({C}, rng, T(-0.5), T(0.5));
    l.slot("running_var").mutable_value() = Tensor<T>::uniform({C}, rng, T(0.5), T(2));
  }
}

template <typename T>
void set_lambdas(ModuleGraph<T>& g, T v) {
  for (auto& l : g.layers)
    if (l.kind == LayerKind::layerscale_add) l.slot("lambda").mutable_value().fill(v);
}

}  // namespace

// ------------------------------------------------------------------ SCAM

TEST(Scam, ZeroWeightsHalveTheInput) {
  Rng rng(1);
  auto x = leaf<float>({2, 5, 4, 3}, rng);
  auto y = pf::scam(x, VarF::leaf(Tensor<float>({5, 5})), VarF::leaf(Tensor<float>({5})));
  for (std::size_t i = 0; i < y.value().size(); ++i) EXPECT_EQ(y.value()[i], 0.5f * x.value()[i]);
}

TEST(Scam, SaturatedBiasPassesInputThrough) {
  Rng rng(2);
  auto x = leaf<float>({1, 4, 3, 3}, rng);
  auto y = pf::scam(x, VarF::leaf(Tensor<float>({4, 4})), VarF::leaf(Tensor<float>({4}, 100.0f)));
  EXPECT_LE(oracle::max_abs_diff(y.value(), x.value()), 1e-6);
}

TEST(Scam, GateMatchesScalarOracle) {
  Rng rng(3);
  const int C = 6;
  auto x = leaf<float>({2, C, 5, 4}, rng);
  auto w = leaf<float>({C, C}, rng, 0.5), b = leaf<float>({C}, rng, 0.5);
  auto y = pf::scam(x, w, b);
  for (int n = 0; n < 2; ++n) {
    std::vector<double> mean(C, 0.0);
    for (int c = 0; c < C; ++c) {
      for (int h = 0; h < 5; ++h)
        for (int q = 0; q < 4; ++q) mean[c] += x.value().at(n, c, h, q);
      mean[c] /= 20;
    }
    for (int c = 0; c < C; ++c) {
      double z = b.value()[c];
      for (int j = 0; j < C; ++j) z += w.value()[c * C + j] * mean[j];
      const double gate = 1 / (1 + std::exp(-z));
      for (int h = 0; h < 5; ++h)
        for (int q = 0; q < 4; ++q) EXPECT_NEAR(y.value().at(n, c, h, q), gate * x.value().at(n, c, h, q), 1e-6);
    }
  }
}

TEST(Scam, GateIsStrictlyBetweenZeroAndOne) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const int C = 3 + trial;
    auto x = VarD::leaf(Tensor<double>::uniform({2, C, 3, 3}, rng, 0.5, 2.0));
    auto y = pf::scam(x, leaf<double>({C, C}, rng, 2.0), leaf<double>({C}, rng, 2.0));
    for (std::size_t i = 0; i < y.value().size(); ++i) {
      const double g = y.value()[i] / x.value()[i];
      EXPECT_GT(g, 0.0);
      EXPECT_LT(g, 1.0);
    }
  }
}

TEST(Scam, RejectsNonSquareWeight) {
  Rng rng(5);
  EXPECT_ERROR_CODE(pf::scam(leaf<float>({1, 4, 2, 2}, rng), leaf<float>({4, 3}, rng), leaf<float>({4}, rng)),
                    "shape");
}

// ----------------------------------------------------------------- SCAPE

TEST(Scape, StageOneOfT) {
  auto g = scape_graph(pf::preset("T"), 0, 3);
  Rng rng(6);
  auto y = pf::infer(g, Tensor<float>::randn({1, 3, 224, 224}, rng));
  EXPECT_EQ(y.shape(), (Shape{1, 48, 56, 56}));
  EXPECT_EQ(g.layer("embed.conv").slot("weight").shape(), (Shape{48, 3, 7, 7}));
  EXPECT_EQ(g.layer("embed.conv").attrs.stride, 4);
  EXPECT_EQ(g.layer("embed.conv").attrs.padding, 3);
}

TEST(Scape, StageTwoOfT) {
  auto g = scape_graph(pf::preset("T"), 1, 48);
  Rng rng(7);
  auto y = pf::infer(g, Tensor<float>::randn({1, 48, 56, 56}, rng));
  EXPECT_EQ(y.shape(), (Shape{1, 96, 28, 28}));
  EXPECT_EQ(g.layer("embed.conv").slot("weight").shape(), (Shape{96, 48, 3, 3}));
}

TEST(Scape, ZeroGateScamIsExactlyHalfOfNoScam) {
  auto cfg = pf::preset("T");
  auto with = scape_graph(cfg, 1, 48, 11);
  cfg.scam_placement = pf::ScamPlacement::none;
  auto without = scape_graph(cfg, 1, 48, 11);
  EXPECT_EQ(without.count_kind(LayerKind::scam), 0u);
  Rng rng(8);
  auto x = Tensor<float>::randn({2, 48, 16, 16}, rng);
  auto a = pf::infer(with, x), b = pf::infer(without, x);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], 0.5f * b[i]);
}

TEST(Scape, BeforePeScamWorksAtInputWidth) {
  auto cfg = pf::preset("S");
  cfg.scam_placement = pf::ScamPlacement::before_pe;
  auto g = scape_graph(cfg, 0, 3);
  EXPECT_EQ(g.layers.front().kind, LayerKind::scam);
  EXPECT_EQ(g.layer("embed.scam").slot("weight").shape(), (Shape{3, 3}));
  Rng rng(9);
  EXPECT_EQ(pf::infer(g, Tensor<float>::randn({1, 3, 32, 32}, rng)).shape(), (Shape{1, 64, 8, 8}));
}

// -------------------------------------------------------------- attention

TEST(Attention, ZeroQueryKeyAveragesValues) {
  Rng rng(10);
  auto q = VarD::leaf(Tensor<double>({2, 6, 4})), k = VarD::leaf(Tensor<double>({2, 6, 4}));
  auto v = leaf<double>({2, 6, 3}, rng);
  auto a = pf::single_head_attention(q, k, v);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      double mean = 0;
      for (int p = 0; p < 6; ++p) mean += v.value()[(n * 6 + p) * 3 + c];
      mean /= 6;
      for (int p = 0; p < 6; ++p) EXPECT_NEAR(a.value()[(n * 6 + p) * 3 + c], mean, 1e-15);
    }
}

TEST(Attention, SingleTokenReturnsValue) {
  Rng rng(11);
  auto v = leaf<float>({3, 1, 5}, rng);
  auto a = pf::single_head_attention(leaf<float>({3, 1, 4}, rng), leaf<float>({3, 1, 4}, rng), v);
  EXPECT_EQ(a.value(), v.value());
}

TEST(Attention, MatchesExplicitWeightOracle) {
  Rng rng(12);
  const int P = 9, Cq = 4, Ca = 3;
  auto q = leaf<float>({1, P, Cq}, rng), k = leaf<float>({1, P, Cq}, rng), v = leaf<float>({1, P, Ca}, rng);
  auto a = pf::single_head_attention(q, k, v);
  for (int i = 0; i < P; ++i) {
    std::vector<double> s(P);
    double mx = -1e300;
    for (int j = 0; j < P; ++j) {
      double d = 0;
      for (int c = 0; c < Cq; ++c) d += static_cast<double>(q.value()[i * Cq + c]) * k.value()[j * Cq + c];
      s[j] = d / std::sqrt(double(Cq));
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (int j = 0; j < P; ++j) z += std::exp(s[j] - mx);
    for (int c = 0; c < Ca; ++c) {
      double o = 0;
      for (int j = 0; j < P; ++j) o += std::exp(s[j] - mx) / z * v.value()[j * Ca + c];
      EXPECT_NEAR(a.value()[i * Ca + c], o, 1e-6);
    }
  }
}

TEST(Attention, PermutationEquivariant) {
  Rng rng(13);
  const int P = 12;
  auto q = leaf<double>({2, P, 4}, rng), k = leaf<double>({2, P, 4}, rng), v = leaf<double>({2, P, 5}, rng);
  std::vector<int> perm(P);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto permute = [&](const Tensor<double>& t) {
    Tensor<double> out(t.shape());
    const auto C = t.dim(2);
    for (int n = 0; n < 2; ++n)
      for (int p = 0; p < P; ++p)
        for (int c = 0; c < C; ++c) out[(n * P + p) * C + c] = t[(n * P + perm[p]) * C + c];
    return out;
  };
  auto a = pf::single_head_attention(q, k, v).value();
  auto b = pf::single_head_attention(VarD::leaf(permute(q.value())), VarD::leaf(permute(k.value())),
                                     VarD::leaf(permute(v.value())))
               .value();
  EXPECT_LE(oracle::max_abs_diff(permute(a), b), 1e-12);
}

TEST(Attention, RejectsMismatchedQueryKey) {
  Rng rng(14);
  EXPECT_ERROR_CODE(
      pf::single_head_attention(leaf<float>({1, 4, 3}, rng), leaf<float>({1, 4, 2}, rng), leaf<float>({1, 4, 2}, rng)),
      "shape");
}

// ---------------------------------------------------------- parallel mixer

TEST(ParallelMixer, StageThreeOfSSplitWidths) {
  auto g = mixer_graph(pf::preset("S"), 2);
  EXPECT_EQ(g.layer("mixer.in_proj").slot("weight").shape(), (Shape{512, 256}));
  EXPECT_EQ(g.layer("mixer.split").attrs.splits, (std::vector<std::int64_t>{32, 32, 64, 384}));
  EXPECT_EQ(g.layer("mixer.dwconv").slot("weight").shape(), (Shape{384, 1, 3, 3}));
  EXPECT_EQ(g.layer("mixer.out_proj").slot("weight").shape(), (Shape{256, 448}));
  Rng rng(15);
  EXPECT_EQ(pf::infer(g, Tensor<float>::randn({1, 256, 14, 14}, rng)).shape(), (Shape{1, 256, 14, 14}));
}

TEST(ParallelMixer, StageOneOfTHasNoAttention) {
  auto g = mixer_graph(pf::preset("T"), 0);
  EXPECT_EQ(g.layer("mixer.in_proj").slot("weight").shape(), (Shape{96, 48}));
  EXPECT_EQ(g.layer("mixer.out_proj").slot("weight").shape(), (Shape{48, 96}));
  EXPECT_EQ(g.count_kind(LayerKind::attention), 0u);
  EXPECT_EQ(g.count_kind(LayerKind::split), 0u);
}

TEST(ParallelMixer, ReducesToGeluPointwiseChain) {
  auto cfg = pf::preset("T");
  cfg.stages[0].dim = 6;
  cfg.stages[0].dw_kernel = 1;
  auto g = mixer_graph(cfg, 0, 21);
  Rng rng(16);
  randomize_bn(g, rng);
  auto& dw = g.layer("mixer.dwconv");
  dw.slot("weight").mutable_value().fill(1.0f);
  Tensor<float> wo({6, 12});
  for (int i = 0; i < 6; ++i) wo[i * 12 + i] = 1.0f;
  g.layer("mixer.out_proj").slot("weight").mutable_value() = wo;

  auto x = Tensor<float>::randn({2, 6, 5, 5}, rng);
  auto y = pf::infer(g, x);
  const auto& bn = g.layer("mixer.norm");
  const auto& ip = g.layer("mixer.in_proj");
  auto ref = ops::batchnorm_infer(VarF::leaf(x), bn.slot("gamma"), bn.slot("beta"), bn.slot("running_mean").value(),
                                  bn.slot("running_var").value(), cfg.bn_eps);
  ref = ops::gelu(ops::pointwise(ref, ip.slot("weight"), ip.slot("bias")));
  ref = ops::slice_channels(ref, 0, 6);
  EXPECT_LE(oracle::max_abs_diff(y, ref.value()), 1e-6);
}

TEST(ParallelMixer, ChannelArithmeticInvariant) {
  for (const char* v : {"T", "S", "M", "L"}) {
    for (Ratio r : {Ratio(0), Ratio(1, 4), Ratio(1, 2), Ratio(3, 4), Ratio(1)}) {
      auto cfg = pf::with_pm_ratios(pf::preset(v), {r, r, r, r});
      for (const auto& s : cfg.stages) {
        EXPECT_EQ(s.attn_dim() + s.conv_dim(), (2 * s.dim * r.den - r.num * s.dim) / r.den) << v << " " << r.str();
        EXPECT_EQ(s.in_proj_width(), s.query_dim() + s.key_dim() + s.attn_dim() + s.conv_dim());
        if (r.is_zero()) {
          EXPECT_EQ(s.in_proj_width(), 2 * s.dim);
          EXPECT_EQ(s.query_dim(), 0);
          EXPECT_EQ(s.conv_dim(), 2 * s.dim);
        } else {
          EXPECT_LE(s.query_dim(), 32);
        }
      }
    }
  }
}

// -------------------------------------------------------------------- FFN

TEST(Ffn, HiddenWidth) {
  auto g = ffn_graph(pf::preset("T"), 0);
  EXPECT_EQ(g.layer("ffn.fc1").slot("weight").shape(), (Shape{96, 48}));
  EXPECT_EQ(g.layer("ffn.fc2").slot("weight").shape(), (Shape{48, 96}));
}

TEST(Ffn, ZeroOutputWeightGivesZero) {
  auto g = ffn_graph(pf::preset("T"), 0);
  g.layer("ffn.fc2").slot("weight").mutable_value().fill(0.0f);
  Rng rng(17);
  auto y = pf::infer(g, Tensor<float>::randn({2, 48, 6, 6}, rng));
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Ffn, MatchesCompositionOracle) {
  auto g = ffn_graph(pf::preset("T"), 0, 22);
  Rng rng(18);
  randomize_bn(g, rng);
  auto x = Tensor<float>::randn({2, 48, 6, 6}, rng);
  const auto& bn = g.layer("ffn.norm");
  const auto& f1 = g.layer("ffn.fc1");
  const auto& f2 = g.layer("ffn.fc2");
  // Oracle: per-position loops in double.
  Tensor<double> ref({2, 48, 6, 6});
  const auto& gm = bn.slot("gamma").value();
  const auto& bt = bn.slot("beta").value();
  const auto& rm = bn.slot("running_mean").value();
  const auto& rv = bn.slot("running_var").value();
  for (int n = 0; n < 2; ++n)
    for (int p = 0; p < 36; ++p) {
      std::vector<double> z(48), h(96);
      for (int c = 0; c < 48; ++c)
        z[c] = (x[(n * 48 + c) * 36 + p] - rm[c]) / std::sqrt(rv[c] + 1e-5) * gm[c] + bt[c];
      for (int o = 0; o < 96; ++o) {
        double a = f1.slot("bias").value()[o];
        for (int c = 0; c < 48; ++c) a += f1.slot("weight").value()[o * 48 + c] * z[c];
        h[o] = 0.5 * a * (1 + std::tanh(std::sqrt(2 / M_PI) * (a + 0.044715 * a * a * a)));
      }
      for (int c = 0; c < 48; ++c) {
        double a = f2.slot("bias").value()[c];
        for (int o = 0; o < 96; ++o) a += f2.slot("weight").value()[c * 96 + o] * h[o];
        ref[(n * 48 + c) * 36 + p] = a;
      }
    }
  EXPECT_LE(oracle::max_abs_diff(pf::infer(g, x), ref), 1e-6);
}

// ---------------------------------------------------------- encoder block

TEST(EncoderBlock, ZeroLayerScaleIsExactIdentity) {
  auto cfg = pf::preset("S");
  for (std::size_t s = 0; s < 4; ++s) {
    auto g = pf::build_block<float>(cfg, s, 30 + s);
    set_lambdas(g, 0.0f);
    Rng rng(19);
    auto x = Tensor<float>::randn({2, cfg.stages[s].dim, 7, 7}, rng);
    EXPECT_EQ(pf::infer(g, x), x);
  }
}

TEST(EncoderBlock, ShapePreservedForEveryTableStage) {
  for (const char* v : {"T", "S", "M", "L"}) {
    auto cfg = pf::preset(v);
    for (std::size_t s = 0; s < 4; ++s) {
      auto g = pf::build_block<float>(cfg, s);
      const std::int64_t side = 56 >> s;
      Rng rng(20);
      auto x = Tensor<float>::randn({1, cfg.stages[s].dim, side, side}, rng);
      EXPECT_EQ(pf::infer(g, x).shape(), x.shape()) << v << " stage " << s + 1;
    }
  }
}

TEST(EncoderBlock, LayerScaleGradientMatchesFiniteDifferences) {
  auto cfg = pf::preset("micro");
  auto g = pf::build_block<double>(cfg, 3, 5);
  Rng rng(21);
  for (auto& l : g.layers)
    if (l.kind == LayerKind::layerscale_add)
      l.slot("lambda").mutable_value() = Tensor<double>::uniform({64}, rng, 0.5, 1.5);
  auto x = VarD::leaf(Tensor<double>::randn({2, 64, 3, 3}, rng));
  std::vector<VarD> lambdas{g.layer("block.mixer_residual").slot("lambda"), g.layer("block.ffn_residual").slot("lambda")};
  EXPECT_LT(oracle::max_grad_rel_err(lambdas, [&] { return weighted_sum(pf::forward(g, x, BnMode::train)); }), 1e-4);
}

// ------------------------------------------------------------------- head

TEST(ClassifierHead, WidthsForT) {
  auto g = pf::build_model<float>(pf::preset("T"));
  EXPECT_EQ(g.layer("head.fc1").slot("weight").shape(), (Shape{1280, 384}));
  EXPECT_EQ(g.layer("head.fc2").slot("weight").shape(), (Shape{1000, 1280}));
  std::int64_t head = 0;
  for (const auto& l : g.layers)
    if (l.path.rfind("head.", 0) == 0) head += pf::layer_params(l);
  EXPECT_EQ(head, 384 * 1280 + 1280 + 1280 * 1000 + 1000);
}

TEST(ClassifierHead, ZeroInputZeroBiasGivesZeroLogits) {
  ModuleGraph<float> g;
  g.config = pf::preset("T");
  pf::GraphBuilder<float> b(g, 3);
  g.output = pf::append_classifier_head(b, g.input, 384, 1280, 1000);
  auto y = pf::infer(g, Tensor<float>({2, 384, 7, 7}));
  EXPECT_EQ(y.shape(), (Shape{2, 1000}));
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

// ----------------------------------------------------------- build_model

namespace {
int blocks_in_stage(const ModuleGraph<float>& g, int stage) {
  int n = 0;
  const std::string prefix = "stage" + std::to_string(stage) + ".block";
  for (const auto& l : g.layers)
    if (l.kind == LayerKind::layerscale_add && l.path.rfind(prefix, 0) == 0 &&
        l.path.find(".mixer_residual") != std::string::npos)
      ++n;
  return n;
}
}  // namespace

TEST(BuildModel, VariantT) {
  auto g = pf::build_model<float>(pf::preset("T"));
  const std::vector<int> dims{48, 96, 192, 384}, blocks{1, 2, 7, 2};
  for (int s = 0; s < 4; ++s) {
    const auto path = "stage" + std::to_string(s + 1) + ".embed.conv";
    EXPECT_EQ(g.layer(path).slot("weight").shape()[0], dims[s]);
    EXPECT_EQ(blocks_in_stage(g, s + 1), blocks[s]);
  }
  EXPECT_EQ(g.config.stages[3].ratio, Ratio(1, 4));
  for (int s = 0; s < 3; ++s) EXPECT_TRUE(g.config.stages[s].ratio.is_zero());
  EXPECT_EQ(g.count_kind(LayerKind::attention), 2u);
  EXPECT_EQ(g.layer("stage1.embed.conv").slot("weight").shape(), (Shape{48, 3, 7, 7}));
  EXPECT_EQ(g.layer("stage2.embed.conv").slot("weight").shape(), (Shape{96, 48, 3, 3}));
}

TEST(BuildModel, VariantL) {
  auto g = pf::build_model<float>(pf::preset("L"));
  const std::vector<int> dims{112, 224, 448, 896}, blocks{2, 4, 9, 3};
  for (int s = 0; s < 4; ++s) {
    EXPECT_EQ(g.layer("stage" + std::to_string(s + 1) + ".embed.conv").slot("weight").shape()[0], dims[s]);
    EXPECT_EQ(blocks_in_stage(g, s + 1), blocks[s]);
  }
}

TEST(BuildModel, ConvOnlyAblationOfS) {
  auto cfg = pf::with_pm_ratios(pf::preset("S"), {0, 0, 0, 0});
  auto g = pf::build_model<float>(cfg);
  EXPECT_EQ(g.count_kind(LayerKind::attention), 0u);
  EXPECT_EQ(g.layer("stage3.block1.mixer.in_proj").slot("weight").shape(), (Shape{512, 256}));
  EXPECT_EQ(g.layer("stage3.block1.mixer.out_proj").slot("weight").shape(), (Shape{256, 512}));
}

TEST(BuildModel, InitializationScheme) {
  auto g = pf::build_model<float>(pf::preset("T"), 4);
  const auto& w = g.layer("stage3.block1.ffn.fc1").slot("weight").value();
  double sum = 0, sq = 0;
  for (float v : w.data()) {
    EXPECT_LE(std::abs(v), 0.04f + 1e-7f);
    sum += v;
    sq += double(v) * v;
  }
  const double mean = sum / w.size(), sd = std::sqrt(sq / w.size() - mean * mean);
  EXPECT_NEAR(mean, 0.0, 1e-3);
  EXPECT_NEAR(sd, 0.02 * 0.8796, 1e-3);  // std of N(0, s) truncated at 2s
  for (float v : g.layer("stage1.embed.bn").slot("gamma").value().data()) EXPECT_EQ(v, 1.0f);
  for (float v : g.layer("stage1.block1.mixer_residual").slot("lambda").value().data()) EXPECT_EQ(v, 1e-5f);
  for (float v : g.layer("stage1.embed.scam").slot("weight").value().data()) EXPECT_EQ(v, 0.0f);
}

TEST(BuildModel, DeterministicPerSeed) {
  auto a = pf::build_model<float>(pf::preset("T"), 7);
  auto b = pf::build_model<float>(pf::preset("T"), 7);
  auto c = pf::build_model<float>(pf::preset("T"), 8);
  ASSERT_EQ(a.layers.size(), b.layers.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    for (std::size_t s = 0; s < a.layers[i].slots.size(); ++s) {
      EXPECT_EQ(a.layers[i].slots[s].value.value(), b.layers[i].slots[s].value.value());
      any_diff = any_diff || !(a.layers[i].slots[s].value.value() == c.layers[i].slots[s].value.value());
    }
  EXPECT_TRUE(any_diff);
}

TEST(BuildModel, ParameterNamesUnique) {
  auto g = pf::build_model<float>(pf::preset("S"));
  std::vector<std::string> names;
  g.for_each_slot([&](const std::string& n, const pf::Slot<float>&) { names.push_back(n); });
  std::sort(names.begin(), names.end());
  EXPECT_EQ(std::adjacent_find(names.begin(), names.end()), names.end());
}

TEST(BuildModel, RejectsInvalidConfigs) {
  auto bad_kernel = pf::preset("T");
  bad_kernel.stages[1].patch_kernel = 5;
  EXPECT_ERROR_CODE(pf::build_model<float>(bad_kernel), "config");
  auto shrinking = pf::preset("T");
  shrinking.stages[2].dim = 64;
  EXPECT_ERROR_CODE(pf::build_model<float>(shrinking), "config");
  auto wide_qk = pf::preset("S");
  wide_qk.stages[3].qk_dim = 64;
  EXPECT_ERROR_CODE(pf::build_model<float>(wide_qk), "config");
  EXPECT_ERROR_CODE(pf::build_model<float>(pf::with_pm_ratios(pf::preset("S"), {0, 0, Ratio(3, 2), 0})), "config");
}

TEST(Builder, DuplicatePathRejected) {
  ModuleGraph<float> g;
  pf::GraphBuilder<float> b(g, 0);
  b.gelu("a", "input");
  EXPECT_ERROR_CODE(b.gelu("a", "input"), "graph");
}

// ------------------------------------------------------- model properties

TEST(ModelProperties, IdentityAtInitWithZeroLayerScale) {
  auto g = pf::build_model<float>(pf::preset("micro"), 9);
  set_lambdas(g, 0.0f);
  std::map<std::string, Tensor<float>> seen;
  pf::LayerObserver<float> obs = [&](const pf::Layer<float>& l, const std::vector<VarF>& out) {
    seen[l.outputs.back()] = out.back().value();
  };
  Rng rng(22);
  pf::infer(g, Tensor<float>::randn({2, 3, 64, 64}, rng), &obs);
  const auto outs = pf::stage_outputs(g);
  for (std::size_t s = 0; s < outs.size(); ++s) {
    const auto embed = "stage" + std::to_string(s + 1) + ".embed.scam";
    EXPECT_EQ(seen.at(outs[s]), seen.at(embed)) << "stage " << s + 1;
  }
}

TEST(ModelProperties, SpatialContractForT) {
  auto g = pf::build_model<float>(pf::preset("T"));
  std::map<std::string, Shape> shapes;
  pf::LayerObserver<float> obs = [&](const pf::Layer<float>& l, const std::vector<VarF>& out) {
    shapes[l.outputs.back()] = out.back().shape();
  };
  Rng rng(23);
  auto logits = pf::infer(g, Tensor<float>::randn({1, 3, 224, 224}, rng), &obs);
  const std::vector<Shape> want{{1, 48, 56, 56}, {1, 96, 28, 28}, {1, 192, 14, 14}, {1, 384, 7, 7}};
  const auto outs = pf::stage_outputs(g);
  for (std::size_t s = 0; s < 4; ++s) EXPECT_EQ(shapes.at(outs[s]), want[s]);
  EXPECT_EQ(logits.shape(), (Shape{1, 1000}));
}
