#pragma once

// Training loop and top-1 evaluation.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "parformer/data.hpp"
#include "parformer/graph.hpp"
#include "parformer/optim.hpp"

namespace parformer {

struct StepRecord {
  int step = 0;     // 1-based
  double loss = 0;  // mean cross-entropy of the batch, before the update
  double acc = 0;   // batch top-1 accuracy, before the update

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct TrainResult {
  std::vector<StepRecord> curve;
};

struct EvalResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::size_t ties = 0;  // rows whose maximum logit is shared by several classes
  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

/// Scores a [N,K] logit block. Ties go to the lowest class index and are counted.
template <typename T>
void score_logits(const Tensor<T>& logits, std::span<const int> labels, EvalResult& r) {
  require_rank(logits, 2, "score_logits");
  const std::int64_t N = logits.dim(0), K = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != N) throw Error("shape", "score_logits: label count");
  for (std::int64_t n = 0; n < N; ++n) {
    const T* row = logits.ptr() + n * K;
    std::int64_t best = 0;
    int shared = 1;
    for (std::int64_t k = 1; k < K; ++k) {
      if (row[k] > row[best]) {
        best = k;
        shared = 1;
      } else if (row[k] == row[best]) {
        ++shared;
      }
    }
    if (shared > 1) ++r.ties;
    if (best == labels[static_cast<std::size_t>(n)]) ++r.correct;
    ++r.total;
  }
}

/// Top-1 accuracy with running batchnorm statistics.
template <typename T>
EvalResult evaluate(const ModuleGraph<T>& g, const Dataset& ds, int batch_size = 64) {
  if (batch_size < 1) throw Error("config", "batch_size must be >= 1");
  EvalResult r;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(ds.size(), start + static_cast<std::size_t>(batch_size));
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto logits = infer(g, ds.batch_images<T>(idx));
    score_logits(logits, ds.batch_labels(idx), r);
  }
  return r;
}

/// Runs `cfg.steps` steps of minibatch training with train-mode batchnorm.
/// Batches are drawn without replacement from a seeded permutation that is
/// redrawn each epoch; a trailing partial batch is skipped. A non-finite
/// value anywhere in a step aborts with Error("numeric").
template <typename T>
TrainResult train(ModuleGraph<T>& g, const Dataset& ds, const TrainConfig& cfg,
                  const std::function<void(const StepRecord&)>& on_step = {}) {
  validate(cfg);
  validate(ds);
  if (cfg.dtype != dtype_of<T>()) throw Error("config", "TrainConfig dtype does not match the graph");
  if (g.folded) throw Error("state", "cannot train a graph with folded batchnorm");
  if (static_cast<std::size_t>(cfg.batch_size) > ds.size()) {
    throw Error("config", "batch_size " + std::to_string(cfg.batch_size) + " exceeds dataset size " +
                              std::to_string(ds.size()));
  }
  const auto classes = static_cast<int>(g.config.num_classes);
  for (int l : ds.labels) {
    if (l >= classes) throw Error("data", "dataset label " + std::to_string(l) + " exceeds model classes");
  }

  Optimizer<T> opt(cfg, g.parameters());
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(ds.size());
  std::size_t cursor = order.size();
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::size_t> idx(B);

  TrainResult result;
  result.curve.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 1; step <= cfg.steps; ++step) {
    if (cursor + B > order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    std::copy_n(order.begin() + static_cast<std::ptrdiff_t>(cursor), B, idx.begin());
    cursor += B;
    const auto labels = ds.batch_labels(idx);

    StepRecord rec;
    rec.step = step;
    try {
      auto logits = forward(g, Var<T>::leaf(ds.batch_images<T>(idx)), BnMode::train);
      auto loss = ops::cross_entropy(logits, labels);
      rec.loss = static_cast<double>(loss.value().item());
      EvalResult batch;
      score_logits(logits.value(), labels, batch);
      rec.acc = batch.accuracy();
      opt.zero_grad();
      backward(loss);
      opt.step();
      for (const auto& p : g.parameters()) {
        if (!p.value().all_finite()) throw Error("numeric", "parameter became non-finite");
      }
    } catch (const Error& e) {
      if (e.code() != "numeric") throw;
      throw Error("numeric", "training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    result.curve.push_back(rec);
    if (on_step) on_step(rec);
  }
  return result;
}

/// Fixed-decimal CSV with header step,loss,acc.
inline std::string curve_csv(const std::vector<StepRecord>& curve) {
  std::string out = "step,loss,acc\n";
  char buf[96];
  for (const auto& r : curve) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f\n", r.step, r.loss, r.acc);
    out += buf;
  }
  return out;
}

inline void write_curve_csv(const std::filesystem::path& path, const std::vector<StepRecord>& curve) {
  std::ofstream out(path);
  if (!out) throw Error("io", "cannot create " + path.string());
  out << curve_csv(curve);
  if (!out) throw Error("io", "write failed: " + path.string());
}

}  // namespace parformer
