#pragma once

// Inference throughput of a graph before and after batchnorm folding.
// Runs are timed with the process CPU clock: the kernels are single
// threaded, so this equals wall time on an idle core and is less exposed to
// preemption on a shared one. Unfolded and folded runs alternate so both see
// the same machine state, and the pair order flips every repeat so neither
// side always runs second. Each side reports the median over its repeats.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <string>
#include <vector>

#include "parformer/analysis.hpp"
#include "parformer/graph.hpp"

namespace parformer {

struct BenchOptions {
  std::int64_t batch = 256;
  int repeats = 5;
  int warmup = 1;
  std::int64_t input = 224;
  std::uint64_t seed = 0;
};

struct BenchSide {
  std::size_t layers = 0;
  std::vector<double> seconds;  // one entry per timed repeat, in run order
  double median_seconds = 0;
  double images_per_sec = 0;
};

struct BenchResult {
  std::string model;
  BenchOptions options;
  BenchSide unfolded;
  BenchSide folded;
};

inline double process_cpu_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_PROCESS_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("state", "median of an empty sample");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// `g` must be unfolded; its folded copy is built here.
inline BenchResult bench(const ModuleGraph<float>& g, const BenchOptions& opt) {
  if (opt.batch < 1 || opt.repeats < 1 || opt.warmup < 0 || opt.input < 1) {
    throw Error("config", "bench needs batch >= 1, repeats >= 1, warmup >= 0, input >= 1");
  }
  if (g.folded) throw Error("state", "bench expects an unfolded graph");
  const auto folded = fold_batchnorm(g);
  Rng rng(opt.seed);
  const auto x = Tensor<float>::randn({opt.batch, g.config.in_channels, opt.input, opt.input}, rng);

  BenchResult r;
  r.model = g.config.name;
  r.options = opt;
  r.unfolded.layers = g.layers.size();
  r.folded.layers = folded.layers.size();
  const ModuleGraph<float>* graphs[2] = {&g, &folded};
  BenchSide* sides[2] = {&r.unfolded, &r.folded};

  for (int w = 0; w < opt.warmup; ++w)
    for (const auto* gr : graphs) (void)infer(*gr, x);
  for (int rep = 0; rep < opt.repeats; ++rep) {
    for (int i = 0; i < 2; ++i) {
      const int k = rep % 2 == 0 ? i : 1 - i;
      const double t0 = process_cpu_seconds();
      (void)infer(*graphs[k], x);
      sides[k]->seconds.push_back(process_cpu_seconds() - t0);
    }
  }
  for (auto* s : sides) {
    s->median_seconds = median(s->seconds);
    s->images_per_sec = static_cast<double>(opt.batch) / s->median_seconds;
  }
  return r;
}

}  // namespace parformer
