#pragma once

// Training configuration and the two optimizers: SGD with momentum and AdamW.
// Weight decay touches rank >= 2 tensors only (conv, pointwise and linear
// weights); biases, batchnorm affine terms and layer scales are not decayed.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "parformer/autograd.hpp"
#include "parformer/tensor.hpp"

namespace parformer {

enum class OptimizerKind { sgd, adamw };

inline const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adamw"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adamw") return OptimizerKind::adamw;
  throw Error("config", "unknown optimizer '" + s + "' (expected sgd or adamw)");
}

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adamw;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9;     // adamw
  double beta2 = 0.999;   // adamw
  double adam_eps = 1e-8;
  int batch_size = 32;
  int steps = 100;
  std::uint64_t seed = 0;
  DType dtype = DType::f32;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// lr = 0 is accepted so a run can be frozen; negative values are not.
inline void validate(const TrainConfig& c) {
  auto fail = [](const std::string& m) { throw Error("config", m); };
  if (!(c.lr >= 0) || !std::isfinite(c.lr)) fail("lr must be finite and >= 0");
  if (!(c.weight_decay >= 0) || !std::isfinite(c.weight_decay)) fail("weight_decay must be finite and >= 0");
  if (!(c.momentum >= 0 && c.momentum < 1)) fail("momentum must lie in [0,1)");
  if (!(c.beta1 >= 0 && c.beta1 < 1)) fail("beta1 must lie in [0,1)");
  if (!(c.beta2 >= 0 && c.beta2 < 1)) fail("beta2 must lie in [0,1)");
  if (!(c.adam_eps > 0)) fail("adam_eps must be positive");
  if (c.batch_size < 1) fail("batch_size must be >= 1");
  if (c.steps < 0) fail("steps must be >= 0");
}

template <typename T>
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::vector<Var<T>> params) : cfg_(cfg), params_(std::move(params)) {
    validate(cfg_);
    for (const auto& p : params_) {
      m_.emplace_back(p.shape());
      if (cfg_.optimizer == OptimizerKind::adamw) v_.emplace_back(p.shape());
    }
  }

  /// Applies one update from the accumulated gradients. Parameters without a
  /// gradient are left untouched.
  void step() {
    ++t_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      const bool decay = p.shape().size() >= 2;
      if (cfg_.optimizer == OptimizerKind::sgd) {
        sgd_update(p.mutable_value(), p.grad(), m_[i], decay);
      } else {
        adamw_update(p.mutable_value(), p.grad(), m_[i], v_[i], decay);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::int64_t steps_taken() const { return t_; }

 private:
  // v = momentum * v + (g + wd * w);  w -= lr * v
  void sgd_update(Tensor<T>& w, const Tensor<T>& g, Tensor<T>& v, bool decay) const {
    const double wd = decay ? cfg_.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double d = static_cast<double>(g[j]) + wd * static_cast<double>(w[j]);
      const double vj = cfg_.momentum * static_cast<double>(v[j]) + d;
      v[j] = static_cast<T>(vj);
      w[j] = static_cast<T>(static_cast<double>(w[j]) - cfg_.lr * vj);
    }
  }

  // Decoupled weight decay, bias-corrected moments.
  void adamw_update(Tensor<T>& w, const Tensor<T>& g, Tensor<T>& m, Tensor<T>& v, bool decay) const {
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1 - std::pow(b2, static_cast<double>(t_));
    const double shrink = 1 - cfg_.lr * (decay ? cfg_.weight_decay : 0.0);
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * static_cast<double>(m[j]) + (1 - b1) * gj;
      const double vj = b2 * static_cast<double>(v[j]) + (1 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = (mj / c1) / (std::sqrt(vj / c2) + cfg_.adam_eps);
      w[j] = static_cast<T>(static_cast<double>(w[j]) * shrink - cfg_.lr * update);
    }
  }

  TrainConfig cfg_;
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::int64_t t_ = 0;
};

}  // namespace parformer
