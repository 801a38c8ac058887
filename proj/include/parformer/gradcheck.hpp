#pragma once

// Central finite-difference check of every learnable parameter in f64.
// Perturbing a parameter of layer i only re-runs layers i..end: the values of
// earlier layers are cached from one unperturbed forward pass.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "parformer/arch.hpp"
#include "parformer/graph.hpp"

namespace parformer {

struct GradcheckOptions {
  double tol = 1e-4;
  // Denominator floor of the relative error, so parameters whose gradient is
  // at roundoff level are judged by absolute error instead.
  double floor = 1e-6;
  double step = 1e-5;  // h = step * max(1, |theta|)
  // Called after each parameter tensor with (elements done, elements total).
  std::function<void(std::size_t, std::size_t)> progress;
};

struct GradcheckReport {
  double max_rel_err = 0;
  double max_abs_err = 0;
  std::string worst;  // "<layer>.<slot>[index]"
  std::size_t checked = 0;
  double seconds = 0;
  double tol = 0;
  bool passed() const { return checked > 0 && max_rel_err < tol; }
};

/// rel = |a - n| / max(|a|, |n|, floor)
inline double grad_rel_err(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Checks d(cross_entropy(g(x), labels))/d(theta) for every learnable element,
/// with batchnorm in train mode. Running statistics are restored afterwards.
inline GradcheckReport gradcheck(ModuleGraph<double>& g, const Tensor<double>& x, std::span<const int> labels,
                                 const GradcheckOptions& opt = {}) {
  using Clock = std::chrono::steady_clock;
  const auto t0 = Clock::now();
  if (g.folded) throw Error("state", "gradcheck needs an unfolded graph");
  if (!(opt.tol > 0) || !(opt.floor > 0) || !(opt.step > 0)) {
    throw Error("config", "gradcheck tol, floor and step must be positive");
  }

  std::vector<Tensor<double>> buffers;
  g.for_each_slot([&](const std::string&, const Slot<double>& s) {
    if (!s.learnable) buffers.push_back(s.value.value());
  });

  g.zero_grad();
  {
    auto loss = ops::cross_entropy(forward(g, Var<double>::leaf(x), BnMode::train), labels);
    backward(loss);
  }

  NoGradGuard no_grad;
  ValueEnv<double> base{{g.input, Var<double>::leaf(x)}};
  resume(g, base, 0, BnMode::train);
  auto loss_from = [&](std::size_t layer) {
    ValueEnv<double> env = base;
    return ops::cross_entropy(resume(g, env, layer, BnMode::train), labels).value().item();
  };

  std::size_t total = 0;
  for (const auto& p : g.parameters()) total += p.value().size();

  GradcheckReport rep;
  rep.tol = opt.tol;
  for (std::size_t li = 0; li < g.layers.size(); ++li) {
    auto& layer = g.layers[li];
    for (auto& slot : layer.slots) {
      if (!slot.learnable) continue;
      auto& w = slot.value.mutable_value();
      const Tensor<double> grad = slot.value.has_grad() ? slot.value.grad() : Tensor<double>(w.shape());
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double orig = w[j];
        const double h = opt.step * std::max(1.0, std::abs(orig));
        w[j] = orig + h;
        const double up = w[j];
        const double lp = loss_from(li);
        w[j] = orig - h;
        const double down = w[j];
        const double lm = loss_from(li);
        w[j] = orig;
        const double numeric = (lp - lm) / (up - down);
        const double rel = grad_rel_err(grad[j], numeric, opt.floor);
        rep.max_abs_err = std::max(rep.max_abs_err, std::abs(grad[j] - numeric));
        if (rel > rep.max_rel_err || rep.worst.empty()) {
          rep.max_rel_err = std::max(rep.max_rel_err, rel);
          rep.worst = layer.path + "." + slot.name + "[" + std::to_string(j) + "]";
        }
        ++rep.checked;
      }
      if (opt.progress) opt.progress(rep.checked, total);
    }
  }

  std::size_t b = 0;
  g.for_each_slot([&](const std::string&, Slot<double>& s) {
    if (!s.learnable) s.value.mutable_value() = buffers[b++];
  });
  g.zero_grad();
  rep.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return rep;
}

/// Moves a freshly built graph away from its special initial point so every
/// parameter carries signal: layer scales, SCAM weights and batchnorm affine
/// terms are randomized.
template <typename T>
void randomize_for_gradcheck(ModuleGraph<T>& g, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  for (auto& l : g.layers) {
    if (l.kind == LayerKind::layerscale_add) {
      auto& lam = l.slot("lambda").mutable_value();
      lam = Tensor<T>::uniform(lam.shape(), rng, T(0.2), T(1));
    } else if (l.kind == LayerKind::scam) {
      auto& w = l.slot("weight").mutable_value();
      w = Tensor<T>::randn(w.shape(), rng, T(0.3));
      auto& b = l.slot("bias").mutable_value();
      b = Tensor<T>::randn(b.shape(), rng, T(0.3));
    } else if (l.kind == LayerKind::batchnorm) {
      auto& gamma = l.slot("gamma").mutable_value();
      gamma = Tensor<T>::uniform(gamma.shape(), rng, T(0.5), T(1.5));
      auto& beta = l.slot("beta").mutable_value();
      beta = Tensor<T>::uniform(beta.shape(), rng, T(-0.5), T(0.5));
    }
  }
}

struct GradcheckSetup {
  ModelConfig config = preset("micro");
  std::int64_t batch = 2;
  std::int64_t input = 48;  // smallest square input that keeps a 2x2 final stage
  std::uint64_t seed = 0;
};

/// Builds, randomizes and checks a model with random inputs and labels.
inline GradcheckReport gradcheck_model(const GradcheckSetup& setup, const GradcheckOptions& opt = {}) {
  auto g = build_model<double>(setup.config, setup.seed);
  randomize_for_gradcheck(g, setup.seed);
  Rng rng(setup.seed + 1);
  const auto x = Tensor<double>::randn({setup.batch, setup.config.in_channels, setup.input, setup.input}, rng);
  std::vector<int> labels(static_cast<std::size_t>(setup.batch));
  std::uniform_int_distribution<int> pick(0, setup.config.num_classes - 1);
  for (auto& l : labels) l = pick(rng);
  return gradcheck(g, x, labels, opt);
}

}  // namespace parformer
