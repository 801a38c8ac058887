#pragma once

// Differentiable operators over Var<T>. Each op computes its value with a
// kernel from kernels.hpp and registers the matching backward closure.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "parformer/autograd.hpp"
#include "parformer/kernels.hpp"

namespace parformer::ops {

using std::int64_t;

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int64_t stride, int64_t pad) {
  return make_result<T>("conv2d", kernels::conv2d(x.value(), w.value(), b.value(), stride, pad),
                        {x, w, b}, [stride, pad](Node<T>& self) {
                          auto& in = self.inputs;
                          auto g = kernels::conv2d_backward(in[0]->value, in[1]->value, self.grad,
                                                            stride, pad);
                          in[0]->accumulate(std::move(g.dx));
                          in[1]->accumulate(std::move(g.dw));
                          in[2]->accumulate(std::move(g.db));
                        });
}

template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int64_t stride,
                        int64_t pad) {
  return make_result<T>(
      "depthwise_conv2d", kernels::depthwise_conv2d(x.value(), w.value(), b.value(), stride, pad),
      {x, w, b}, [stride, pad](Node<T>& self) {
        auto& in = self.inputs;
        auto g = kernels::depthwise_conv2d_backward(in[0]->value, in[1]->value, self.grad, stride,
                                                    pad);
        in[0]->accumulate(std::move(g.dx));
        in[1]->accumulate(std::move(g.dw));
        in[2]->accumulate(std::move(g.db));
      });
}

template <typename T>
Var<T> pointwise(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return make_result<T>("pointwise", kernels::pointwise(x.value(), w.value(), b.value()), {x, w, b},
                        [](Node<T>& self) {
                          auto& in = self.inputs;
                          auto g = kernels::pointwise_backward(in[0]->value, in[1]->value, self.grad);
                          in[0]->accumulate(std::move(g.dx));
                          in[1]->accumulate(std::move(g.dw));
                          in[2]->accumulate(std::move(g.db));
                        });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return make_result<T>("linear", kernels::linear(x.value(), w.value(), b.value()), {x, w, b},
                        [](Node<T>& self) {
                          auto& in = self.inputs;
                          auto g = kernels::linear_backward(in[0]->value, in[1]->value, self.grad);
                          in[0]->accumulate(std::move(g.dx));
                          in[1]->accumulate(std::move(g.dw));
                          in[2]->accumulate(std::move(g.db));
                        });
}

/// op(a) * op(b) on rank-2 or batched rank-3 operands.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
  return make_result<T>(
      "matmul", kernels::matmul(a.value(), b.value(), trans_a, trans_b), {a, b},
      [trans_a, trans_b](Node<T>& self) {
        auto& in = self.inputs;
        const auto& A = in[0]->value;
        const auto& B = in[1]->value;
        const auto& G = self.grad;
        using kernels::matmul;
        if (in[0]->requires_grad) {
          // C = op(A) op(B): dop(A) = G op(B)^T
          auto d = trans_b ? matmul(G, B) : matmul(G, B, false, true);
          in[0]->accumulate(trans_a ? kernels::transpose_last2(d) : std::move(d));
        }
        if (in[1]->requires_grad) {
          auto d = trans_a ? matmul(A, G) : matmul(A, G, true, false);
          in[1]->accumulate(trans_b ? kernels::transpose_last2(d) : std::move(d));
        }
      });
}

enum class BnMode { train, infer };

namespace detail {
template <typename T>
void check_bn_args(const Var<T>& x, const Tensor<T>& running_mean, const Tensor<T>& running_var,
                   double eps) {
  require_rank(x.value(), 4, "batchnorm");
  if (!(eps > 0)) throw Error("config", "batchnorm eps must be positive");
  const auto C = static_cast<std::size_t>(x.value().dim(1));
  if (running_mean.size() != C || running_var.size() != C) {
    throw Error("shape", "batchnorm running statistics do not match channel count");
  }
}
}  // namespace detail

/// Batch normalization with batch statistics. The running buffers are updated
/// as running = (1 - momentum) * running + momentum * batch.
template <typename T>
Var<T> batchnorm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, double momentum, double eps) {
  detail::check_bn_args(x, running_mean, running_var, eps);
  auto stats = kernels::batch_stats(x.value(), eps);
  for (std::size_t c = 0; c < running_mean.size(); ++c) {
    running_mean[c] = static_cast<T>((1 - momentum) * running_mean[c] + momentum * stats.mean[c]);
    running_var[c] = static_cast<T>((1 - momentum) * running_var[c] + momentum * stats.var[c]);
  }
  auto y = kernels::normalize_affine(x.value(), stats.mean, stats.invstd, gamma.value(), beta.value());
  return make_result<T>("batchnorm", std::move(y), {x, gamma, beta},
                        [mean = std::move(stats.mean), invstd = std::move(stats.invstd)](Node<T>& self) {
                          auto& in = self.inputs;
                          auto g = kernels::batchnorm_train_backward(in[0]->value, in[1]->value, mean,
                                                                     invstd, self.grad);
                          in[0]->accumulate(std::move(g.dx));
                          in[1]->accumulate(std::move(g.dgamma));
                          in[2]->accumulate(std::move(g.dbeta));
                        });
}

/// Batch normalization with fixed running statistics.
template <typename T>
Var<T> batchnorm_infer(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                       const Tensor<T>& running_mean, const Tensor<T>& running_var, double eps) {
  detail::check_bn_args(x, running_mean, running_var, eps);
  const std::size_t C = running_mean.size();
  std::vector<T> mean(running_mean.vec()), invstd(C);
  for (std::size_t c = 0; c < C; ++c) invstd[c] = static_cast<T>(1.0 / std::sqrt(running_var[c] + eps));
  auto y = kernels::normalize_affine(x.value(), mean, invstd, gamma.value(), beta.value());
  return make_result<T>("batchnorm", std::move(y), {x, gamma, beta},
                        [mean = std::move(mean), invstd = std::move(invstd)](Node<T>& self) {
                          auto& in = self.inputs;
                          auto g = kernels::batchnorm_infer_backward(in[0]->value, in[1]->value, mean,
                                                                     invstd, self.grad);
                          in[0]->accumulate(std::move(g.dx));
                          in[1]->accumulate(std::move(g.dgamma));
                          in[2]->accumulate(std::move(g.dbeta));
                        });
}

template <typename T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                 Tensor<T>& running_var, BnMode mode, double momentum, double eps) {
  if (mode == BnMode::train) return batchnorm_train(x, gamma, beta, running_mean, running_var, momentum, eps);
  return batchnorm_infer(x, gamma, beta, running_mean, running_var, eps);
}

template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
  return make_result<T>("softmax", kernels::softmax_lastdim(x.value()), {x}, [](Node<T>& self) {
    // Recompute y rather than holding a second copy alive in the closure.
    auto y = kernels::softmax_lastdim(self.inputs[0]->value);
    self.inputs[0]->accumulate(kernels::softmax_lastdim_backward(y, self.grad));
  });
}

namespace detail {
template <typename T, typename F, typename G>
Var<T> unary(const char* name, const Var<T>& x, F f, G df) {
  Tensor<T> y(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return make_result<T>(name, std::move(y), {x}, [df](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    Tensor<T> dx(xv.shape());
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = self.grad[i] * df(xv[i]);
    self.inputs[0]->accumulate(std::move(dx));
  });
}
}  // namespace detail

template <typename T>
Var<T> gelu(const Var<T>& x) {
  return make_result<T>("gelu", kernels::gelu(x.value()), {x}, [](Node<T>& self) {
    self.inputs[0]->accumulate(kernels::gelu_backward(self.inputs[0]->value, self.grad));
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary<T>("sigmoid", x, kernels::sigmoid_scalar<T>, [](T v) {
    const T s = kernels::sigmoid_scalar(v);
    return s * (T(1) - s);
  });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return detail::unary<T>("square", x, [](T v) { return v * v; }, [](T v) { return T(2) * v; });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  return detail::unary<T>("scale", x, [s](T v) { return v * s; }, [s](T) { return s; });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "add");
  Tensor<T> y = a.value();
  y += b.value();
  return make_result<T>("add", std::move(y), {a, b}, [](Node<T>& self) {
    self.inputs[0]->accumulate(self.grad);
    self.inputs[1]->accumulate(self.grad);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "mul");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return make_result<T>("mul", std::move(y), {a, b}, [](Node<T>& self) {
    auto& in = self.inputs;
    Tensor<T> da(self.grad.shape()), db(self.grad.shape());
    for (std::size_t i = 0; i < da.size(); ++i) {
      da[i] = self.grad[i] * in[1]->value[i];
      db[i] = self.grad[i] * in[0]->value[i];
    }
    in[0]->accumulate(std::move(da));
    in[1]->accumulate(std::move(db));
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  double s = 0;
  for (auto v : x.value().data()) s += v;
  return make_result<T>("sum", Tensor<T>::scalar(static_cast<T>(s)), {x}, [](Node<T>& self) {
    self.inputs[0]->accumulate(Tensor<T>(self.inputs[0]->value.shape(), self.grad[0]));
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  return make_result<T>("global_avg_pool", kernels::global_avg_pool(x.value()), {x},
                        [](Node<T>& self) {
                          const auto& s = self.inputs[0]->value.shape();
                          const int64_t NC = s[0] * s[1], P = s[2] * s[3];
                          Tensor<T> dx(s);
                          for (int64_t i = 0; i < NC; ++i) {
                            const T g = self.grad[i] / static_cast<T>(P);
                            std::fill(dx.ptr() + i * P, dx.ptr() + (i + 1) * P, g);
                          }
                          self.inputs[0]->accumulate(std::move(dx));
                        });
}

/// x [N,C,H,W] scaled by gate [N,C] broadcast over H,W.
template <typename T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& gate) {
  require_rank(x.value(), 4, "scale_channels");
  const auto& s = x.shape();
  if (gate.shape() != Shape{s[0], s[1]}) throw Error("shape", "scale_channels: gate must be [N,C]");
  const int64_t NC = s[0] * s[1], P = s[2] * s[3];
  Tensor<T> y(s);
  for (int64_t i = 0; i < NC; ++i) {
    const T g = gate.value()[i];
    const T* src = x.value().ptr() + i * P;
    T* dst = y.ptr() + i * P;
    for (int64_t j = 0; j < P; ++j) dst[j] = src[j] * g;
  }
  return make_result<T>("scale_channels", std::move(y), {x, gate}, [NC, P](Node<T>& self) {
    auto& in = self.inputs;
    Tensor<T> dx(in[0]->value.shape()), dg(in[1]->value.shape());
    for (int64_t i = 0; i < NC; ++i) {
      const T g = in[1]->value[i];
      const T* src = in[0]->value.ptr() + i * P;
      const T* d = self.grad.ptr() + i * P;
      double acc = 0;
      for (int64_t j = 0; j < P; ++j) {
        dx[i * P + j] = d[j] * g;
        acc += static_cast<double>(d[j]) * src[j];
      }
      dg[i] = static_cast<T>(acc);
    }
    in[0]->accumulate(std::move(dx));
    in[1]->accumulate(std::move(dg));
  });
}

/// x * scale[c] + shift[c] for x [N,C,H,W].
template <typename T>
Var<T> channel_affine(const Var<T>& x, const Var<T>& scale, const Var<T>& shift) {
  require_rank(x.value(), 4, "channel_affine");
  const auto& s = x.shape();
  const int64_t N = s[0], C = s[1], P = s[2] * s[3];
  if (scale.value().size() != static_cast<std::size_t>(C) ||
      shift.value().size() != static_cast<std::size_t>(C)) {
    throw Error("shape", "channel_affine: scale/shift length does not match channels");
  }
  Tensor<T> y(s);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T a = scale.value()[c], b = shift.value()[c];
      const T* src = x.value().ptr() + (n * C + c) * P;
      T* dst = y.ptr() + (n * C + c) * P;
      for (int64_t j = 0; j < P; ++j) dst[j] = src[j] * a + b;
    }
  return make_result<T>("channel_affine", std::move(y), {x, scale, shift},
                        [N, C, P](Node<T>& self) {
                          auto& in = self.inputs;
                          Tensor<T> dx(in[0]->value.shape()), da({C}), db({C});
                          for (int64_t n = 0; n < N; ++n)
                            for (int64_t c = 0; c < C; ++c) {
                              const T a = in[1]->value[c];
                              const T* src = in[0]->value.ptr() + (n * C + c) * P;
                              const T* d = self.grad.ptr() + (n * C + c) * P;
                              for (int64_t j = 0; j < P; ++j) {
                                dx[(n * C + c) * P + j] = d[j] * a;
                                da[c] += d[j] * src[j];
                                db[c] += d[j];
                              }
                            }
                          in[0]->accumulate(std::move(dx));
                          in[1]->accumulate(std::move(da));
                          in[2]->accumulate(std::move(db));
                        });
}

/// x + lambda[c] * y: the layer-scaled residual connection.
template <typename T>
Var<T> layerscale_add(const Var<T>& x, const Var<T>& lambda, const Var<T>& y) {
  require_rank(x.value(), 4, "layerscale_add");
  x.value().require_same_shape(y.value(), "layerscale_add");
  const auto& s = x.shape();
  const int64_t N = s[0], C = s[1], P = s[2] * s[3];
  if (lambda.value().size() != static_cast<std::size_t>(C)) {
    throw Error("shape", "layerscale_add: lambda length does not match channels");
  }
  Tensor<T> out(s);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T l = lambda.value()[c];
      const std::size_t o = static_cast<std::size_t>((n * C + c) * P);
      for (int64_t j = 0; j < P; ++j) out[o + j] = x.value()[o + j] + l * y.value()[o + j];
    }
  return make_result<T>("layerscale_add", std::move(out), {x, lambda, y}, [N, C, P](Node<T>& self) {
    auto& in = self.inputs;
    if (in[0]->requires_grad) in[0]->accumulate(self.grad);
    Tensor<T> dl({C}), dy(in[2]->value.shape());
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const T l = in[1]->value[c];
        const std::size_t o = static_cast<std::size_t>((n * C + c) * P);
        for (int64_t j = 0; j < P; ++j) {
          dl[c] += self.grad[o + j] * in[2]->value[o + j];
          dy[o + j] = self.grad[o + j] * l;
        }
      }
    in[1]->accumulate(std::move(dl));
    in[2]->accumulate(std::move(dy));
  });
}

/// Channels [begin, end) of an [N,C,H,W] tensor.
template <typename T>
Var<T> slice_channels(const Var<T>& x, int64_t begin, int64_t end) {
  require_rank(x.value(), 4, "slice_channels");
  const auto& s = x.shape();
  const int64_t N = s[0], C = s[1], P = s[2] * s[3];
  if (begin < 0 || end > C || begin > end) throw Error("shape", "slice_channels: range out of bounds");
  const int64_t W = end - begin;
  Tensor<T> y({N, W, s[2], s[3]});
  for (int64_t n = 0; n < N; ++n) {
    const T* src = x.value().ptr() + (n * C + begin) * P;
    std::copy(src, src + W * P, y.ptr() + n * W * P);
  }
  return make_result<T>("slice_channels", std::move(y), {x}, [N, C, P, begin, W](Node<T>& self) {
    Tensor<T> dx(self.inputs[0]->value.shape());
    for (int64_t n = 0; n < N; ++n) {
      const T* src = self.grad.ptr() + n * W * P;
      std::copy(src, src + W * P, dx.ptr() + (n * C + begin) * P);
    }
    self.inputs[0]->accumulate(std::move(dx));
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw Error("shape", "concat_channels of nothing");
  const auto& s0 = parts[0].shape();
  if (s0.size() != 4) throw Error("shape", "concat_channels expects rank-4 inputs");
  const int64_t N = s0[0], P = s0[2] * s0[3];
  std::vector<int64_t> widths;
  int64_t C = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != 4 || s[0] != N || s[2] != s0[2] || s[3] != s0[3]) {
      throw Error("shape", "concat_channels: incompatible shapes");
    }
    widths.push_back(s[1]);
    C += s[1];
  }
  Tensor<T> y({N, C, s0[2], s0[3]});
  for (int64_t n = 0; n < N; ++n) {
    int64_t off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const T* src = parts[i].value().ptr() + n * widths[i] * P;
      std::copy(src, src + widths[i] * P, y.ptr() + (n * C + off) * P);
      off += widths[i];
    }
  }
  return make_result<T>("concat_channels", std::move(y), parts, [N, C, P, widths](Node<T>& self) {
    int64_t off = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      auto& in = self.inputs[i];
      if (in->requires_grad) {
        Tensor<T> d(in->value.shape());
        for (int64_t n = 0; n < N; ++n) {
          const T* src = self.grad.ptr() + (n * C + off) * P;
          std::copy(src, src + widths[i] * P, d.ptr() + n * widths[i] * P);
        }
        in->accumulate(std::move(d));
      }
      off += widths[i];
    }
  });
}

/// [N,C,H,W] -> [N,H*W,C]
template <typename T>
Var<T> to_tokens(const Var<T>& x) {
  require_rank(x.value(), 4, "to_tokens");
  const auto& s = x.shape();
  const int64_t N = s[0], C = s[1], P = s[2] * s[3];
  Tensor<T> y({N, P, C});
  for (int64_t n = 0; n < N; ++n) kernels::transpose(C, P, x.value().ptr() + n * C * P, y.ptr() + n * C * P);
  return make_result<T>("to_tokens", std::move(y), {x}, [N, C, P](Node<T>& self) {
    Tensor<T> dx(self.inputs[0]->value.shape());
    for (int64_t n = 0; n < N; ++n)
      kernels::transpose(P, C, self.grad.ptr() + n * C * P, dx.ptr() + n * C * P);
    self.inputs[0]->accumulate(std::move(dx));
  });
}

/// [N,H*W,C] -> [N,C,H,W]
template <typename T>
Var<T> from_tokens(const Var<T>& t, int64_t H, int64_t W) {
  require_rank(t.value(), 3, "from_tokens");
  const auto& s = t.shape();
  const int64_t N = s[0], P = s[1], C = s[2];
  if (P != H * W) throw Error("shape", "from_tokens: token count does not match H*W");
  Tensor<T> y({N, C, H, W});
  for (int64_t n = 0; n < N; ++n) kernels::transpose(P, C, t.value().ptr() + n * C * P, y.ptr() + n * C * P);
  return make_result<T>("from_tokens", std::move(y), {t}, [N, C, P](Node<T>& self) {
    Tensor<T> dt(self.inputs[0]->value.shape());
    for (int64_t n = 0; n < N; ++n)
      kernels::transpose(C, P, self.grad.ptr() + n * C * P, dt.ptr() + n * C * P);
    self.inputs[0]->accumulate(std::move(dt));
  });
}

/// Mean softmax cross-entropy of logits [N,K] against integer labels.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  require_rank(logits.value(), 2, "cross_entropy");
  const int64_t N = logits.value().dim(0), K = logits.value().dim(1);
  if (static_cast<int64_t>(labels.size()) != N) throw Error("shape", "cross_entropy: label count");
  if (N == 0) throw Error("shape", "cross_entropy over an empty batch");
  std::vector<int> lab(labels.begin(), labels.end());
  for (int l : lab)
    if (l < 0 || l >= K) throw Error("data", "cross_entropy: label out of range");
  const Tensor<T> p = kernels::softmax_lastdim(logits.value());
  double loss = 0;
  for (int64_t n = 0; n < N; ++n) {
    const T* row = logits.value().ptr() + n * K;
    T mx = row[0];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double s = 0;
    for (int64_t k = 0; k < K; ++k) s += std::exp(static_cast<double>(row[k] - mx));
    loss += std::log(s) + mx - row[lab[n]];
  }
  loss /= static_cast<double>(N);
  return make_result<T>("cross_entropy", Tensor<T>::scalar(static_cast<T>(loss)), {logits},
                        [p, lab = std::move(lab), N, K](Node<T>& self) {
                          Tensor<T> d = p;
                          const T g = self.grad[0] / static_cast<T>(N);
                          for (int64_t n = 0; n < N; ++n) {
                            d[n * K + lab[n]] -= T(1);
                            for (int64_t k = 0; k < K; ++k) d[n * K + k] *= g;
                          }
                          self.inputs[0]->accumulate(std::move(d));
                        });
}

}  // namespace parformer::ops
