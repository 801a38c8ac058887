#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include <unistd.h>

#include "parformer/analysis.hpp"
#include "parformer/arch.hpp"
#include "parformer/bench.hpp"
#include "parformer/data.hpp"
#include "parformer/gradcheck.hpp"
#include "parformer/optim.hpp"
#include "parformer/train.hpp"
#include "test_util.hpp"

namespace pf = parformer;
using pf::Dataset;
using pf::LayerKind;
using pf::ModelConfig;
using pf::ModuleGraph;
using pf::Rng;
using pf::Tensor;
using pf::TrainConfig;
using pf::Var;

namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() /
            ("parformer_" + std::string(info->name()) + "_" + std::to_string(::getpid()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<std::uint8_t> random_records(std::size_t n, Rng& rng, std::vector<int>& labels) {
  std::vector<std::uint8_t> bytes(n * pf::cifar10::kRecord);
  std::uniform_int_distribution<int> byte(0, 255), label(0, 9);
  labels.clear();
  for (std::size_t i = 0; i < n; ++i) {
    labels.push_back(label(rng));
    bytes[i * pf::cifar10::kRecord] = static_cast<std::uint8_t>(labels.back());
    for (std::size_t p = 1; p < pf::cifar10::kRecord; ++p) {
      bytes[i * pf::cifar10::kRecord + p] = static_cast<std::uint8_t>(byte(rng));
    }
  }
  return bytes;
}

Dataset synth(int classes, int per_class, std::uint64_t seed = 1, int size = 32) {
  pf::SynthOptions o;
  o.classes = classes;
  o.per_class = per_class;
  o.seed = seed;
  o.size = size;
  return pf::synth_dataset(o);
}

// Two stages, a 1/2 attention split in the last one, three classes.
ModelConfig tiny_config() {
  auto c = pf::preset("micro");
  c.name = "tiny";
  c.stages.resize(2);
  c.stages[0].dim = 4;
  c.stages[1].dim = 8;
  c.stages[1].ratio = pf::Ratio(1, 2);
  c.stages[1].qk_dim = 4;
  c.head_hidden = 8;
  c.num_classes = 3;
  return c;
}

TrainConfig quick_train(int steps, int batch) {
  TrainConfig tc;
  tc.steps = steps;
  tc.batch_size = batch;
  tc.seed = 5;
  return tc;
}

}  // namespace

// ------------------------------------------------------------------ CIFAR-10

TEST(Cifar10, SingleWhiteRecord) {
  std::vector<std::uint8_t> rec(pf::cifar10::kRecord, 255);
  rec[0] = 7;
  const auto ds = pf::parse_cifar10(rec, "train");
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.labels[0], 7);
  EXPECT_EQ(ds.images.shape(), (pf::Shape{1, 3, 32, 32}));
  for (float v : ds.images.data()) EXPECT_EQ(v, 1.0f);
  EXPECT_EQ(ds.num_classes, 10);
}

TEST(Cifar10, TruncatedFileIsRejected) {
  TempDir dir;
  write_bytes(dir.path() / "data_batch_1.bin", std::vector<std::uint8_t>(pf::cifar10::kRecord - 1, 0));
  EXPECT_ERROR_CODE(pf::load_cifar10_binary(dir.path() / "data_batch_1.bin"), "data");
  EXPECT_ERROR_CODE(pf::load_cifar10_binary(dir.path()), "data");
}

TEST(Cifar10, LabelAboveNineIsRejected) {
  std::vector<std::uint8_t> rec(pf::cifar10::kRecord, 0);
  rec[0] = 10;
  EXPECT_ERROR_CODE(pf::parse_cifar10(rec, "train"), "data");
}

TEST(Cifar10, MissingPathIsAnIoError) {
  TempDir dir;
  EXPECT_ERROR_CODE(pf::load_cifar10_binary(dir.path() / "nope"), "io");
  EXPECT_ERROR_CODE(pf::load_cifar10_binary(dir.path(), "test"), "io");
}

TEST(Cifar10, WriteThenLoadIsBitEqual) {
  Rng rng(3);
  std::vector<int> labels;
  const auto bytes = random_records(6, rng, labels);
  // Known tensor: byte / 255 for every pixel.
  Tensor<float> known({6, 3, 32, 32});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::int64_t p = 0; p < pf::cifar10::kPixels; ++p)
      known[i * pf::cifar10::kPixels + static_cast<std::size_t>(p)] =
          static_cast<float>(bytes[i * pf::cifar10::kRecord + 1 + static_cast<std::size_t>(p)]) / 255.0f;

  TempDir dir;
  const auto file = dir.path() / "data_batch_1.bin";
  pf::write_cifar10_binary(file, known, labels);
  const auto ds = pf::load_cifar10_binary(file);
  EXPECT_TRUE(ds.images == known);
  EXPECT_EQ(ds.labels, labels);

  std::ifstream in(file, std::ios::binary);
  std::vector<std::uint8_t> back((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(back, bytes);
}

TEST(Cifar10, DirectoryConcatenatesTrainBatchesInOrder) {
  TempDir dir;
  Rng rng(4);
  std::vector<int> l1, l2, lt;
  write_bytes(dir.path() / "data_batch_2.bin", random_records(2, rng, l2));
  write_bytes(dir.path() / "data_batch_1.bin", random_records(3, rng, l1));
  write_bytes(dir.path() / "test_batch.bin", random_records(1, rng, lt));
  write_bytes(dir.path() / "batches.meta.txt", {'a', '\n'});

  const auto train = pf::load_cifar10_binary(dir.path(), "train");
  std::vector<int> expected = l1;
  expected.insert(expected.end(), l2.begin(), l2.end());
  EXPECT_EQ(train.labels, expected);
  EXPECT_EQ(train.split, "train");

  const auto test = pf::load_cifar10_binary(dir.path(), "test");
  EXPECT_EQ(test.labels, lt);
  EXPECT_ERROR_CODE(pf::load_cifar10_binary(dir.path(), "valid"), "data");
}

TEST(Cifar10, EncodeRejectsBadInput) {
  Tensor<float> img({1, 3, 32, 32});
  const std::vector<int> bad_label{11};
  EXPECT_ERROR_CODE(pf::encode_cifar10(img, bad_label), "data");
  const std::vector<int> ok{1};
  EXPECT_ERROR_CODE(pf::encode_cifar10(Tensor<float>({1, 3, 16, 16}), ok), "shape");
}

TEST(Cifar10, ChannelStatsMatchTwoPassOracle) {
  Rng rng(5);
  std::vector<int> labels;
  const auto ds = pf::parse_cifar10(random_records(5, rng, labels), "train");
  for (std::int64_t c = 0; c < 3; ++c) {
    std::vector<double> vals;
    for (std::int64_t n = 0; n < 5; ++n)
      for (std::int64_t p = 0; p < 1024; ++p) vals.push_back(ds.images[static_cast<std::size_t>((n * 3 + c) * 1024 + p)]);
    const double m = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
    double ss = 0;
    for (double v : vals) ss += (v - m) * (v - m);
    EXPECT_NEAR(ds.mean[c], m, 1e-6);
    EXPECT_NEAR(ds.stddev[c], std::sqrt(ss / static_cast<double>(vals.size())), 1e-6);
  }
}

// ------------------------------------------------------------------ datasets

TEST(Synth, SameSeedSameDataset) {
  const auto a = synth(4, 8, 11), b = synth(4, 8, 11), c = synth(4, 8, 12);
  EXPECT_TRUE(a.images == b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_FALSE(a.images == c.images);
}

TEST(Synth, BalancedLabelsAndUnitRange) {
  const auto ds = synth(5, 6);
  EXPECT_NO_THROW(pf::validate(ds));
  std::vector<int> counts(5, 0);
  for (int l : ds.labels) ++counts[static_cast<std::size_t>(l)];
  for (int n : counts) EXPECT_EQ(n, 6);
  EXPECT_EQ(ds.images.shape(), (pf::Shape{30, 3, 32, 32}));
}

TEST(Synth, NormalizedBatchIsStandardizedPerChannel) {
  const auto ds = synth(4, 16);
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto x = ds.batch_images<double>(all);
  const auto moments = [&](std::int64_t c) {
    double s = 0, ss = 0, n = 0;
    for (std::int64_t i = 0; i < x.dim(0); ++i)
      for (std::int64_t p = 0; p < 32 * 32; ++p) {
        const double v = x[static_cast<std::size_t>((i * 3 + c) * 1024 + p)];
        s += v;
        ss += v * v;
        ++n;
      }
    return std::pair{s / n, ss / n - (s / n) * (s / n)};
  };
  for (std::int64_t c = 0; c < 3; ++c) {
    const auto [m, var] = moments(c);
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(Dataset, ValidateRejectsLabelsOutsideClasses) {
  auto ds = synth(3, 2);
  ds.labels[0] = 3;
  EXPECT_ERROR_CODE(pf::validate(ds), "data");
}

TEST(Dataset, TakeKeepsPrefixAndConstants) {
  const auto ds = synth(4, 4);
  const auto head = pf::take(ds, 8);
  EXPECT_EQ(head.size(), 8u);
  EXPECT_EQ(head.mean, ds.mean);
  EXPECT_EQ(std::vector<int>(ds.labels.begin(), ds.labels.begin() + 8), head.labels);
  EXPECT_ERROR_CODE(pf::take(ds, 17), "data");
}

// ------------------------------------------------------------------ optimizers

TEST(Optimizer, SgdMomentumMatchesHandComputation) {
  auto w = Var<double>::leaf(Tensor<double>({1}, {1.0}), true);
  TrainConfig tc;
  tc.optimizer = pf::OptimizerKind::sgd;
  tc.lr = 0.1;
  tc.momentum = 0.9;
  tc.weight_decay = 0.0;
  pf::Optimizer<double> opt(tc, {w});
  w.mutable_grad() = Tensor<double>({1}, {0.5});
  opt.step();
  EXPECT_DOUBLE_EQ(w.value()[0], 0.95);  // v = 0.5
  opt.step();
  EXPECT_DOUBLE_EQ(w.value()[0], 0.95 - 0.1 * 0.95);  // v = 0.9 * 0.5 + 0.5
}

TEST(Optimizer, AdamwFirstStepIsSignedLrPlusDecoupledDecay) {
  auto w = Var<double>::leaf(Tensor<double>({1, 2}, {2.0, -1.0}), true);
  auto b = Var<double>::leaf(Tensor<double>({2}, {2.0, -1.0}), true);
  TrainConfig tc;
  tc.dtype = pf::DType::f64;
  pf::Optimizer<double> opt(tc, {w, b});
  w.mutable_grad() = Tensor<double>({1, 2}, {0.3, -4.0});
  b.mutable_grad() = Tensor<double>({2}, {0.3, -4.0});
  opt.step();
  // m_hat / sqrt(v_hat) = sign(g) on the first step, up to eps.
  EXPECT_NEAR(w.value()[0], 2.0 * (1 - 1e-3 * 0.05) - 1e-3, 1e-10);
  EXPECT_NEAR(w.value()[1], -1.0 * (1 - 1e-3 * 0.05) + 1e-3, 1e-10);
  // Rank-1 tensors are not decayed.
  EXPECT_NEAR(b.value()[0], 2.0 - 1e-3, 1e-10);
  EXPECT_NEAR(b.value()[1], -1.0 + 1e-3, 1e-10);
}

TEST(Optimizer, ParametersWithoutGradientStayPut) {
  auto w = Var<float>::leaf(Tensor<float>({2, 2}, 1.0f), true);
  pf::Optimizer<float> opt(TrainConfig{}, {w});
  opt.step();
  for (float v : w.value().data()) EXPECT_EQ(v, 1.0f);
}

TEST(TrainConfig, ValidateRejectsBadValues) {
  TrainConfig tc;
  tc.lr = -1e-3;
  EXPECT_ERROR_CODE(pf::validate(tc), "config");
  tc = TrainConfig{};
  tc.batch_size = 0;
  EXPECT_ERROR_CODE(pf::validate(tc), "config");
  tc = TrainConfig{};
  tc.beta2 = 1.0;
  EXPECT_ERROR_CODE(pf::validate(tc), "config");
  tc = TrainConfig{};
  tc.lr = 0.0;
  EXPECT_NO_THROW(pf::validate(tc));
  EXPECT_ERROR_CODE(pf::parse_optimizer("adam"), "config");
}

// ------------------------------------------------------------------ training

TEST(Train, FrozenIdentityModelHasConstantLoss) {
  auto cfg = pf::preset("micro");
  cfg.layerscale_init = 0.0;
  auto g = pf::build_model<float>(cfg, 3);
  const auto ds = synth(4, 4);
  auto tc = quick_train(5, 16);
  tc.lr = 0.0;
  const auto res = pf::train(g, ds, tc);
  ASSERT_EQ(res.curve.size(), 5u);
  // Every step sees the whole set in a different order, so only the
  // summation order changes.
  for (const auto& r : res.curve) EXPECT_NEAR(r.loss, res.curve[0].loss, 1e-6 * res.curve[0].loss);
}

TEST(Train, FirstStepLossIsNearLogK) {
  for (int k : {2, 4}) {
    auto cfg = pf::preset("micro");
    cfg.num_classes = k;
    auto g = pf::build_model<float>(cfg, 1);
    const auto res = pf::train(g, synth(k, 8), quick_train(1, 16));
    EXPECT_NEAR(res.curve[0].loss, std::log(k), 0.1 * std::log(k)) << "k=" << k;
  }
}

TEST(Train, SameSeedGivesBitIdenticalCurve) {
  const auto ds = synth(4, 8);
  auto run = [&](std::uint64_t seed) {
    auto g = pf::build_model<float>(pf::preset("micro"), 2);
    auto tc = quick_train(12, 8);
    tc.seed = seed;
    return pf::train(g, ds, tc).curve;
  };
  const auto a = run(9), b = run(9), c = run(10);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Train, LossDecreasesOnTinyProblem) {
  auto g = pf::build_model<float>(pf::preset("micro"), 0);
  const auto res = pf::train(g, synth(4, 8), quick_train(40, 16));
  double head = 0, tail = 0;
  for (int i = 0; i < 5; ++i) {
    head += res.curve[static_cast<std::size_t>(i)].loss;
    tail += res.curve[res.curve.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  EXPECT_LT(tail, head);
}

TEST(Train, SgdRunsInDouble) {
  auto g = pf::build_model<double>(tiny_config(), 0);
  auto tc = quick_train(3, 6);
  tc.optimizer = pf::OptimizerKind::sgd;
  tc.lr = 0.05;
  tc.dtype = pf::DType::f64;
  const auto res = pf::train(g, synth(3, 2, 1, 16), tc);
  EXPECT_EQ(res.curve.size(), 3u);
  for (const auto& r : res.curve) EXPECT_TRUE(std::isfinite(r.loss));
}

TEST(Train, DivergenceAbortsWithDiagnostic) {
  auto g = pf::build_model<float>(tiny_config(), 0);
  auto tc = quick_train(10, 6);
  tc.optimizer = pf::OptimizerKind::sgd;
  tc.lr = 1e30;
  try {
    pf::train(g, synth(3, 2, 1, 16), tc);
    FAIL() << "expected divergence";
  } catch (const pf::Error& e) {
    EXPECT_EQ(e.code(), "numeric");
    EXPECT_NE(std::string(e.what()).find("diverged at step"), std::string::npos) << e.what();
  }
}

TEST(Train, RejectsInconsistentSetups) {
  auto g = pf::build_model<float>(tiny_config(), 0);
  const auto ds = synth(3, 2, 1, 16);
  EXPECT_ERROR_CODE(pf::train(g, ds, quick_train(1, 7)), "config");
  auto tc = quick_train(1, 2);
  tc.dtype = pf::DType::f64;
  EXPECT_ERROR_CODE(pf::train(g, ds, tc), "config");
  EXPECT_ERROR_CODE(pf::train(g, synth(4, 2, 1, 16), quick_train(1, 2)), "data");
  auto folded = pf::fold_batchnorm(g);
  EXPECT_ERROR_CODE(pf::train(folded, ds, quick_train(1, 2)), "state");
}

TEST(Train, CurveCsvUsesFixedDecimals) {
  const std::vector<pf::StepRecord> curve{{1, 1.5, 0.25}, {2, 0.125, 1.0}};
  EXPECT_EQ(pf::curve_csv(curve), "step,loss,acc\n1,1.500000,0.250000\n2,0.125000,1.000000\n");
}

// ------------------------------------------------------------------ evaluation

TEST(Evaluate, ConstantLogitsScoreOneOverK) {
  auto g = pf::build_model<float>(pf::preset("micro"), 0);
  auto& fc2 = g.layer("head.fc2");
  fc2.slot("weight").mutable_value().fill(0.0f);
  fc2.slot("bias").mutable_value().fill(0.0f);
  const auto r = pf::evaluate(g, synth(4, 5));
  EXPECT_DOUBLE_EQ(r.accuracy(), 0.25);
  EXPECT_EQ(r.ties, 20u);
}

TEST(Evaluate, PerfectLogitsScoreOne) {
  const std::vector<int> labels{2, 0, 1, 1};
  Tensor<float> logits({4, 3});
  for (std::size_t i = 0; i < labels.size(); ++i) logits[i * 3 + static_cast<std::size_t>(labels[i])] = 5.0f;
  pf::EvalResult r;
  pf::score_logits(logits, labels, r);
  EXPECT_DOUBLE_EQ(r.accuracy(), 1.0);
  EXPECT_EQ(r.ties, 0u);
}

TEST(Evaluate, HandCheckedArgmaxOnTenSamples) {
  // argmax per row: 1 0 2 2 1 0 0 2 1 1
  const Tensor<float> logits({10, 3}, {0.1f, 0.9f, 0.2f,  0.8f, 0.1f, 0.3f,  -1.f, -2.f, 0.f,
                                       0.2f, 0.3f, 0.4f,  1.f, 2.f, -3.f,    4.f, 3.f, 2.f,
                                       0.5f, -0.5f, 0.f,  0.f, 0.1f, 0.2f,   -1.f, 1.f, -1.f,
                                       0.3f, 0.6f, 0.5f});
  const std::vector<int> labels{1, 0, 2, 1, 1, 2, 0, 2, 0, 1};
  pf::EvalResult r;
  pf::score_logits(logits, labels, r);
  EXPECT_EQ(r.correct, 7u);
  EXPECT_EQ(r.total, 10u);
  EXPECT_EQ(r.ties, 0u);
}

TEST(Evaluate, FoldedAndUnfoldedAgreeAfterTraining) {
  auto g = pf::build_model<float>(pf::preset("micro"), 4);
  const auto ds = synth(4, 8);
  pf::train(g, ds, quick_train(30, 16));
  const auto folded = pf::fold_batchnorm(g);
  const auto a = pf::evaluate(g, ds), b = pf::evaluate(folded, ds);
  EXPECT_EQ(a.correct, b.correct);
  EXPECT_EQ(a.ties, 0u);
  EXPECT_EQ(b.ties, 0u);
}

// ------------------------------------------------------------------ gradcheck

TEST(Gradcheck, RelativeErrorUsesFloor) {
  EXPECT_DOUBLE_EQ(pf::grad_rel_err(2.0, 1.0, 1e-6), 0.5);
  EXPECT_DOUBLE_EQ(pf::grad_rel_err(1e-9, 0.0, 1e-6), 1e-3);
  EXPECT_DOUBLE_EQ(pf::grad_rel_err(0.0, 0.0, 1e-6), 0.0);
}

TEST(Gradcheck, TinyModelPassesAndLeavesStateUntouched) {
  pf::GradcheckSetup setup;
  setup.config = tiny_config();
  setup.input = 16;
  setup.batch = 3;
  auto g = pf::build_model<double>(setup.config, 0);
  pf::randomize_for_gradcheck(g, 0);
  const auto before = pf::cast_graph<double>(g);
  Rng rng(1);
  const auto x = Tensor<double>::randn({3, 3, 16, 16}, rng);
  const std::vector<int> labels{0, 2, 1};
  const auto rep = pf::gradcheck(g, x, labels);
  EXPECT_TRUE(rep.passed()) << rep.max_rel_err << " at " << rep.worst;
  std::size_t total = 0;
  for (const auto& p : g.parameters()) total += p.value().size();
  EXPECT_EQ(rep.checked, total);
  for (std::size_t i = 0; i < g.layers.size(); ++i)
    for (std::size_t s = 0; s < g.layers[i].slots.size(); ++s)
      EXPECT_TRUE(g.layers[i].slots[s].value.value() == before.layers[i].slots[s].value.value())
          << g.layers[i].path << "." << g.layers[i].slots[s].name;
}

TEST(Gradcheck, ModelDriverMatchesManualSetup) {
  pf::GradcheckSetup setup;
  setup.config = tiny_config();
  setup.input = 16;
  const auto rep = pf::gradcheck_model(setup);
  EXPECT_TRUE(rep.passed()) << rep.max_rel_err;
  EXPECT_LT(rep.max_rel_err, 1e-4);
}

TEST(Gradcheck, RejectsFoldedGraph) {
  auto g = pf::build_model<double>(tiny_config(), 0);
  auto folded = pf::fold_batchnorm(g);
  const std::vector<int> labels{0};
  EXPECT_ERROR_CODE(pf::gradcheck(folded, Tensor<double>({1, 3, 16, 16}), labels), "state");
}

// ------------------------------------------------------------------ bench

TEST(Bench, SingleRepeatIsOneTimedRun) {
  const auto g = pf::build_model<float>(tiny_config(), 0);
  pf::BenchOptions o;
  o.batch = 2;
  o.repeats = 1;
  o.warmup = 0;
  o.input = 32;
  const auto r = pf::bench(g, o);
  ASSERT_EQ(r.unfolded.seconds.size(), 1u);
  ASSERT_EQ(r.folded.seconds.size(), 1u);
  EXPECT_DOUBLE_EQ(r.unfolded.median_seconds, r.unfolded.seconds[0]);
  EXPECT_DOUBLE_EQ(r.folded.images_per_sec, 2.0 / r.folded.seconds[0]);
  EXPECT_LT(r.folded.layers, r.unfolded.layers);
}

TEST(Bench, MedianOfOddAndEvenSamples) {
  EXPECT_DOUBLE_EQ(pf::median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_DOUBLE_EQ(pf::median({4.0, 1.0, 3.0, 2.0}), 2.5);
  EXPECT_ERROR_CODE(pf::median({}), "state");
}

TEST(Bench, RejectsBadOptions) {
  const auto g = pf::build_model<float>(tiny_config(), 0);
  pf::BenchOptions o;
  o.repeats = 0;
  EXPECT_ERROR_CODE(pf::bench(g, o), "config");
}
