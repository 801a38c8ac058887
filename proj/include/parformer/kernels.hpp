#pragma once

// Raw forward/backward kernels over Tensor<T>. No autograd bookkeeping here;
// see ops.hpp for the differentiable wrappers.
//
// Every output element is reduced in a fixed order (row-major over the
// reduction axes), so results are bit-reproducible for a given build.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <type_traits>
#include <vector>

#include "parformer/tensor.hpp"

namespace parformer::kernels {

using std::int64_t;

namespace detail {

// Register tile of R rows x 16 columns; accumulators stay in registers for the
// whole k loop.
template <int R, typename T, typename TC>
inline void gemm_tile16(int64_t N, int64_t K, const T* __restrict__ A, const T* __restrict__ B,
                        TC* __restrict__ C) {
  double acc[R][16];
  for (int r = 0; r < R; ++r)
    for (int j = 0; j < 16; ++j) acc[r][j] = C[r * N + j];
  for (int64_t k = 0; k < K; ++k) {
    double b[16];
    for (int j = 0; j < 16; ++j) b[j] = B[k * N + j];
    for (int r = 0; r < R; ++r) {
      const double a = A[r * K + k];
      for (int j = 0; j < 16; ++j) acc[r][j] += a * b[j];
    }
  }
  for (int r = 0; r < R; ++r)
    for (int j = 0; j < 16; ++j) C[r * N + j] = static_cast<TC>(acc[r][j]);
}

// The last cols (< 16) columns of B, packed transposed, as dot products over
// k split into 8 interleaved lanes that are combined in a fixed order.
template <typename T, typename TC>
inline void gemm_tail(int64_t M, int64_t cols, int64_t N, int64_t K, const T* A, const T* B, TC* C) {
  constexpr int64_t L = 8;
  std::vector<double> bt(static_cast<std::size_t>(cols * K));
  for (int64_t k = 0; k < K; ++k)
    for (int64_t j = 0; j < cols; ++j) bt[j * K + k] = B[k * N + j];
  const int64_t KL = K - K % L;
  for (int64_t m = 0; m < M; ++m) {
    const T* __restrict__ a = A + m * K;
    for (int64_t j = 0; j < cols; ++j) {
      const double* __restrict__ b = bt.data() + j * K;
      double acc[L] = {};
      for (int64_t k = 0; k < KL; k += L)
        for (int64_t l = 0; l < L; ++l) acc[l] += static_cast<double>(a[k + l]) * b[k + l];
      double rest = 0;
      for (int64_t k = KL; k < K; ++k) rest += static_cast<double>(a[k]) * b[k];
      const double dot = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + rest;
      C[m * N + j] = static_cast<TC>(static_cast<double>(C[m * N + j]) + dot);
    }
  }
}

}  // namespace detail

/// C[M,N] += A[M,K] * B[K,N], all row-major and contiguous. Each output is
/// summed in double in a fixed order, then rounded into C once.
template <typename T, typename TC>
void gemm_acc(int64_t M, int64_t N, int64_t K, const T* A, const T* B, TC* C) {
  const int64_t N16 = N - N % 16;
  if (N16 > 0) {
    int64_t m = 0;
    for (; m + 4 <= M; m += 4)
      for (int64_t j = 0; j < N16; j += 16) detail::gemm_tile16<4>(N, K, A + m * K, B + j, C + m * N + j);
    for (; m < M; ++m)
      for (int64_t j = 0; j < N16; j += 16) detail::gemm_tile16<1>(N, K, A + m * K, B + j, C + m * N + j);
  }
  if (N16 < N) detail::gemm_tail(M, N - N16, N, K, A, B + N16, C + N16);
}

/// out[c,r] = in[r,c] for an R x C row-major matrix.
template <typename T>
void transpose(int64_t R, int64_t C, const T* in, T* out) {
  constexpr int64_t kB = 32;
  for (int64_t r0 = 0; r0 < R; r0 += kB)
    for (int64_t c0 = 0; c0 < C; c0 += kB)
      for (int64_t r = r0; r < std::min(R, r0 + kB); ++r)
        for (int64_t c = c0; c < std::min(C, c0 + kB); ++c) out[c * R + r] = in[r * C + c];
}

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  if (stride <= 0) throw Error("shape", "stride must be positive");
  if (k < 1) throw Error("shape", "kernel size must be >= 1");
  if (pad < 0) throw Error("shape", "padding must be non-negative");
  if (in + 2 * pad < k) throw Error("shape", "input smaller than kernel after padding");
  return (in + 2 * pad - k) / stride + 1;
}

// ---------------------------------------------------------------------------
// Dense convolution (im2col + gemm)

template <typename T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t k, int64_t stride, int64_t pad,
            int64_t Ho, int64_t Wo, T* col) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t kh = 0; kh < k; ++kh)
      for (int64_t kw = 0; kw < k; ++kw) {
        T* row = col + ((c * k + kh) * k + kw) * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          const int64_t ih = oh * stride - pad + kh;
          T* dst = row + oh * Wo;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = x + (c * H + ih) * W;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            const int64_t iw = ow * stride - pad + kw;
            dst[ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
          }
        }
      }
}

template <typename T, typename TD>
void col2im_acc(const T* col, int64_t C, int64_t H, int64_t W, int64_t k, int64_t stride,
                int64_t pad, int64_t Ho, int64_t Wo, TD* dx) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t kh = 0; kh < k; ++kh)
      for (int64_t kw = 0; kw < k; ++kw) {
        const T* row = col + ((c * k + kh) * k + kw) * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          const int64_t ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) continue;
          TD* dst = dx + (c * H + ih) * W;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            const int64_t iw = ow * stride - pad + kw;
            if (iw >= 0 && iw < W) dst[iw] += row[oh * Wo + ow];
          }
        }
      }
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int64_t stride,
                 int64_t pad) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d weight");
  const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin) {
    throw Error("shape", "conv2d: input has " + std::to_string(Cin) + " channels, weight expects " +
                             std::to_string(w.dim(1)));
  }
  if (w.dim(3) != k) throw Error("shape", "conv2d: only square kernels are supported");
  if (b.size() != static_cast<std::size_t>(Cout)) throw Error("shape", "conv2d: bias length");
  const int64_t Ho = conv_out_extent(H, k, stride, pad), Wo = conv_out_extent(W, k, stride, pad);
  const int64_t P = Ho * Wo, CK = Cin * k * k;
  Tensor<T> y({N, Cout, Ho, Wo});
  std::vector<T> col(static_cast<std::size_t>(CK * P));
  for (int64_t n = 0; n < N; ++n) {
    im2col(x.ptr() + n * Cin * H * W, Cin, H, W, k, stride, pad, Ho, Wo, col.data());
    T* out = y.ptr() + n * Cout * P;
    for (int64_t co = 0; co < Cout; ++co) std::fill(out + co * P, out + (co + 1) * P, b[co]);
    gemm_acc(Cout, P, CK, w.ptr(), col.data(), out);
  }
  return y;
}

template <typename T>
struct ConvGrads {
  Tensor<T> dx, dw, db;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                             int64_t stride, int64_t pad) {
  const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(0), k = w.dim(2);
  const int64_t Ho = dy.dim(2), Wo = dy.dim(3), P = Ho * Wo, CK = Cin * k * k;
  ConvGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({Cout})};
  std::vector<T> col(static_cast<std::size_t>(CK * P)), colT(col.size());
  std::vector<T> wT(static_cast<std::size_t>(CK * Cout));
  std::vector<double> dcol(col.size()), dw(w.size()), db(static_cast<std::size_t>(Cout));
  std::vector<double> dx(static_cast<std::size_t>(Cin * H * W));
  transpose(Cout, CK, w.ptr(), wT.data());
  for (int64_t n = 0; n < N; ++n) {
    const T* dyn = dy.ptr() + n * Cout * P;
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t p = 0; p < P; ++p) db[co] += dyn[co * P + p];
    im2col(x.ptr() + n * Cin * H * W, Cin, H, W, k, stride, pad, Ho, Wo, col.data());
    transpose(CK, P, col.data(), colT.data());
    gemm_acc(Cout, CK, P, dyn, colT.data(), dw.data());
    std::fill(dcol.begin(), dcol.end(), 0.0);
    gemm_acc(CK, P, Cout, wT.data(), dyn, dcol.data());
    std::fill(dx.begin(), dx.end(), 0.0);
    col2im_acc(dcol.data(), Cin, H, W, k, stride, pad, Ho, Wo, dx.data());
    std::transform(dx.begin(), dx.end(), g.dx.ptr() + n * Cin * H * W, [](double v) { return static_cast<T>(v); });
  }
  std::transform(dw.begin(), dw.end(), g.dw.ptr(), [](double v) { return static_cast<T>(v); });
  std::transform(db.begin(), db.end(), g.db.ptr(), [](double v) { return static_cast<T>(v); });
  return g;
}

// ---------------------------------------------------------------------------
// Depthwise convolution: weight [C,1,k,k], every channel convolved on its own.

// Output columns ow with 0 <= ow*stride - pad + kw < W form [valid_begin, valid_end).
inline int64_t valid_begin(int64_t pad, int64_t kw, int64_t stride) {
  return pad > kw ? (pad - kw + stride - 1) / stride : 0;
}

inline int64_t valid_end(int64_t W, int64_t Wo, int64_t pad, int64_t kw, int64_t stride) {
  const int64_t last = W - 1 + pad - kw;
  if (last < 0) return 0;
  return std::min<int64_t>(Wo, last / stride + 1);
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           int64_t stride, int64_t pad) {
  require_rank(x, 4, "depthwise_conv2d");
  require_rank(w, 4, "depthwise_conv2d weight");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), k = w.dim(2);
  if (w.dim(0) != C || w.dim(1) != 1 || w.dim(3) != k) {
    throw Error("shape", "depthwise_conv2d: weight " + to_string(w.shape()) +
                             " does not match input " + to_string(x.shape()));
  }
  if (b.size() != static_cast<std::size_t>(C)) throw Error("shape", "depthwise_conv2d: bias length");
  const int64_t Ho = conv_out_extent(H, k, stride, pad), Wo = conv_out_extent(W, k, stride, pad);
  Tensor<T> y({N, C, Ho, Wo});
  std::vector<double> row(static_cast<std::size_t>(Wo));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* src = x.ptr() + (n * C + c) * H * W;
      const T* wk = w.ptr() + c * k * k;
      T* dst = y.ptr() + (n * C + c) * Ho * Wo;
      for (int64_t oh = 0; oh < Ho; ++oh) {
        double* drow = row.data();
        std::fill(row.begin(), row.end(), static_cast<double>(b[c]));
        for (int64_t kh = 0; kh < k; ++kh) {
          const int64_t ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) continue;
          const T* srow = src + ih * W;
          for (int64_t kw = 0; kw < k; ++kw) {
            const double wv = wk[kh * k + kw];
            const int64_t lo = valid_begin(pad, kw, stride);
            const int64_t hi = valid_end(W, Wo, pad, kw, stride);
            if (stride == 1) {
              const T* s = srow - pad + kw;
              for (int64_t ow = lo; ow < hi; ++ow) drow[ow] += wv * static_cast<double>(s[ow]);
            } else {
              for (int64_t ow = lo; ow < hi; ++ow) drow[ow] += wv * static_cast<double>(srow[ow * stride - pad + kw]);
            }
          }
        }
        for (int64_t ow = 0; ow < Wo; ++ow) dst[oh * Wo + ow] = static_cast<T>(drow[ow]);
      }
    }
  return y;
}

template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                                       int64_t stride, int64_t pad) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), k = w.dim(2);
  const int64_t Ho = dy.dim(2), Wo = dy.dim(3);
  ConvGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({C})};
  std::vector<double> dwacc(static_cast<std::size_t>(C * k * k)), dbacc(static_cast<std::size_t>(C));
  std::vector<double> plane(static_cast<std::size_t>(H * W));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* src = x.ptr() + (n * C + c) * H * W;
      const T* wk = w.ptr() + c * k * k;
      const T* d = dy.ptr() + (n * C + c) * Ho * Wo;
      double* dwk = dwacc.data() + c * k * k;
      std::fill(plane.begin(), plane.end(), 0.0);
      for (int64_t p = 0; p < Ho * Wo; ++p) dbacc[c] += d[p];
      for (int64_t oh = 0; oh < Ho; ++oh) {
        const T* drow = d + oh * Wo;
        for (int64_t kh = 0; kh < k; ++kh) {
          const int64_t ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) continue;
          for (int64_t kw = 0; kw < k; ++kw) {
            const int64_t lo = valid_begin(pad, kw, stride);
            const int64_t hi = valid_end(W, Wo, pad, kw, stride);
            const double wv = wk[kh * k + kw];
            double acc = 0;
            for (int64_t ow = lo; ow < hi; ++ow) {
              const int64_t iw = ow * stride - pad + kw;
              acc += static_cast<double>(drow[ow]) * src[ih * W + iw];
              plane[ih * W + iw] += wv * drow[ow];
            }
            dwk[kh * k + kw] += acc;
          }
        }
      }
      T* dsrc = g.dx.ptr() + (n * C + c) * H * W;
      for (int64_t i = 0; i < H * W; ++i) dsrc[i] = static_cast<T>(plane[i]);
    }
  for (std::size_t i = 0; i < dwacc.size(); ++i) g.dw[i] = static_cast<T>(dwacc[i]);
  for (int64_t c = 0; c < C; ++c) g.db[c] = static_cast<T>(dbacc[c]);
  return g;
}

// ---------------------------------------------------------------------------
// Pointwise (1x1) convolution with a [Cout, Cin] weight.

template <typename T>
Tensor<T> pointwise(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x, 4, "pointwise");
  require_rank(w, 2, "pointwise weight");
  const int64_t N = x.dim(0), Cin = x.dim(1), P = x.dim(2) * x.dim(3), Cout = w.dim(0);
  if (w.dim(1) != Cin) {
    throw Error("shape", "pointwise: input has " + std::to_string(Cin) +
                             " channels, weight expects " + std::to_string(w.dim(1)));
  }
  if (b.size() != static_cast<std::size_t>(Cout)) throw Error("shape", "pointwise: bias length");
  Tensor<T> y({N, Cout, x.dim(2), x.dim(3)});
  for (int64_t n = 0; n < N; ++n) {
    T* out = y.ptr() + n * Cout * P;
    for (int64_t co = 0; co < Cout; ++co) std::fill(out + co * P, out + (co + 1) * P, b[co]);
    gemm_acc(Cout, P, Cin, w.ptr(), x.ptr() + n * Cin * P, out);
  }
  return y;
}

template <typename T>
ConvGrads<T> pointwise_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy) {
  const int64_t N = x.dim(0), Cin = x.dim(1), P = x.dim(2) * x.dim(3), Cout = w.dim(0);
  ConvGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({Cout})};
  std::vector<T> wT(static_cast<std::size_t>(Cin * Cout)), xT(static_cast<std::size_t>(P * Cin));
  std::vector<double> dw(w.size()), db(static_cast<std::size_t>(Cout));
  transpose(Cout, Cin, w.ptr(), wT.data());
  for (int64_t n = 0; n < N; ++n) {
    const T* dyn = dy.ptr() + n * Cout * P;
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t p = 0; p < P; ++p) db[co] += dyn[co * P + p];
    transpose(Cin, P, x.ptr() + n * Cin * P, xT.data());
    gemm_acc(Cout, Cin, P, dyn, xT.data(), dw.data());
    gemm_acc(Cin, P, Cout, wT.data(), dyn, g.dx.ptr() + n * Cin * P);
  }
  std::transform(dw.begin(), dw.end(), g.dw.ptr(), [](double v) { return static_cast<T>(v); });
  std::transform(db.begin(), db.end(), g.db.ptr(), [](double v) { return static_cast<T>(v); });
  return g;
}

// ---------------------------------------------------------------------------
// Fully connected: x [N,Cin], w [Cout,Cin], b [Cout] -> [N,Cout]

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear weight");
  const int64_t N = x.dim(0), Cin = x.dim(1), Cout = w.dim(0);
  if (w.dim(1) != Cin) throw Error("shape", "linear: input width does not match weight");
  if (b.size() != static_cast<std::size_t>(Cout)) throw Error("shape", "linear: bias length");
  Tensor<T> y({N, Cout});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Cout; ++co) y[n * Cout + co] = b[co];
  std::vector<T> wT(static_cast<std::size_t>(Cin * Cout));
  transpose(Cout, Cin, w.ptr(), wT.data());
  gemm_acc(N, Cout, Cin, x.ptr(), wT.data(), y.ptr());
  return y;
}

template <typename T>
ConvGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy) {
  const int64_t N = x.dim(0), Cin = x.dim(1), Cout = w.dim(0);
  ConvGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({Cout})};
  std::vector<double> db(static_cast<std::size_t>(Cout));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Cout; ++co) db[co] += dy[n * Cout + co];
  std::transform(db.begin(), db.end(), g.db.ptr(), [](double v) { return static_cast<T>(v); });
  gemm_acc(N, Cin, Cout, dy.ptr(), w.ptr(), g.dx.ptr());
  std::vector<T> dyT(static_cast<std::size_t>(Cout * N));
  transpose(N, Cout, dy.ptr(), dyT.data());
  gemm_acc(Cout, Cin, N, dyT.data(), x.ptr(), g.dw.ptr());
  return g;
}

// ---------------------------------------------------------------------------
// Batched matmul on rank-2 or rank-3 tensors, with optional transposes.

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  const std::size_t r = a.rank();
  if (r != 2 && r != 3) throw Error("shape", "transpose_last2 expects rank 2 or 3");
  const int64_t B = r == 3 ? a.dim(0) : 1, R = a.dim(r - 2), C = a.dim(r - 1);
  Shape s = a.shape();
  std::swap(s[r - 2], s[r - 1]);
  Tensor<T> out(s);
  for (int64_t bi = 0; bi < B; ++bi) transpose(R, C, a.ptr() + bi * R * C, out.ptr() + bi * R * C);
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a_in, const Tensor<T>& b_in, bool trans_a = false,
                 bool trans_b = false) {
  if (a_in.rank() != b_in.rank() || (a_in.rank() != 2 && a_in.rank() != 3)) {
    throw Error("shape", "matmul expects two rank-2 or two rank-3 tensors");
  }
  const Tensor<T> a = trans_a ? transpose_last2(a_in) : a_in;
  const Tensor<T> b = trans_b ? transpose_last2(b_in) : b_in;
  const std::size_t r = a.rank();
  const int64_t B = r == 3 ? a.dim(0) : 1;
  if (r == 3 && b.dim(0) != B) throw Error("shape", "matmul batch mismatch");
  const int64_t M = a.dim(r - 2), K = a.dim(r - 1), N = b.dim(r - 1);
  if (b.dim(r - 2) != K) {
    throw Error("shape", "matmul inner dimensions differ: " + to_string(a.shape()) + " * " +
                             to_string(b.shape()));
  }
  Shape s = r == 3 ? Shape{B, M, N} : Shape{M, N};
  Tensor<T> c(s);
  for (int64_t bi = 0; bi < B; ++bi)
    gemm_acc(M, N, K, a.ptr() + bi * M * K, b.ptr() + bi * K * N, c.ptr() + bi * M * N);
  return c;
}

// ---------------------------------------------------------------------------
// Batch normalization over N x H x W per channel.

template <typename T>
struct BatchStats {
  std::vector<T> mean, var, invstd;  // var is the biased (population) variance
};

template <typename T>
BatchStats<T> batch_stats(const Tensor<T>& x, double eps) {
  const int64_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  const int64_t count = N * P;
  if (count == 0) throw Error("shape", "batchnorm: zero-size batch in train mode");
  BatchStats<T> s{std::vector<T>(C), std::vector<T>(C), std::vector<T>(C)};
  for (int64_t c = 0; c < C; ++c) {
    double sum = 0;
    for (int64_t n = 0; n < N; ++n) {
      const T* p = x.ptr() + (n * C + c) * P;
      for (int64_t i = 0; i < P; ++i) sum += p[i];
    }
    const double mean = sum / static_cast<double>(count);
    double sq = 0;
    for (int64_t n = 0; n < N; ++n) {
      const T* p = x.ptr() + (n * C + c) * P;
      for (int64_t i = 0; i < P; ++i) {
        const double d = p[i] - mean;
        sq += d * d;
      }
    }
    const double var = sq / static_cast<double>(count);
    s.mean[c] = static_cast<T>(mean);
    s.var[c] = static_cast<T>(var);
    s.invstd[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
  }
  return s;
}

/// y = gamma * (x - mean) * invstd + beta, per channel.
template <typename T>
Tensor<T> normalize_affine(const Tensor<T>& x, const std::vector<T>& mean, const std::vector<T>& invstd,
                           const Tensor<T>& gamma, const Tensor<T>& beta) {
  const int64_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  if (gamma.size() != static_cast<std::size_t>(C) || beta.size() != static_cast<std::size_t>(C)) {
    throw Error("shape", "batchnorm: gamma/beta length does not match channels");
  }
  Tensor<T> y(x.shape());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T scale = gamma[c] * invstd[c];
      const T shift = beta[c] - mean[c] * scale;
      const T* src = x.ptr() + (n * C + c) * P;
      T* dst = y.ptr() + (n * C + c) * P;
      for (int64_t i = 0; i < P; ++i) dst[i] = src[i] * scale + shift;
    }
  return y;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> dx, dgamma, dbeta;
};

/// Backward through train-mode batchnorm, where mean/invstd depend on x.
template <typename T>
BatchNormGrads<T> batchnorm_train_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                           const std::vector<T>& mean, const std::vector<T>& invstd,
                                           const Tensor<T>& dy) {
  const int64_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  const double m = static_cast<double>(N * P);
  BatchNormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({C}), Tensor<T>({C})};
  for (int64_t c = 0; c < C; ++c) {
    double sum_dy = 0, sum_dy_xhat = 0;
    for (int64_t n = 0; n < N; ++n) {
      const T* xs = x.ptr() + (n * C + c) * P;
      const T* d = dy.ptr() + (n * C + c) * P;
      for (int64_t i = 0; i < P; ++i) {
        const double xhat = (xs[i] - mean[c]) * invstd[c];
        sum_dy += d[i];
        sum_dy_xhat += d[i] * xhat;
      }
    }
    g.dgamma[c] = static_cast<T>(sum_dy_xhat);
    g.dbeta[c] = static_cast<T>(sum_dy);
    const double k = gamma[c] * invstd[c] / m;
    for (int64_t n = 0; n < N; ++n) {
      const T* xs = x.ptr() + (n * C + c) * P;
      const T* d = dy.ptr() + (n * C + c) * P;
      T* dx = g.dx.ptr() + (n * C + c) * P;
      for (int64_t i = 0; i < P; ++i) {
        const double xhat = (xs[i] - mean[c]) * invstd[c];
        dx[i] = static_cast<T>(k * (m * d[i] - sum_dy - xhat * sum_dy_xhat));
      }
    }
  }
  return g;
}

/// Backward through inference-mode batchnorm (fixed statistics).
template <typename T>
BatchNormGrads<T> batchnorm_infer_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                           const std::vector<T>& mean, const std::vector<T>& invstd,
                                           const Tensor<T>& dy) {
  const int64_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  BatchNormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({C}), Tensor<T>({C})};
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* xs = x.ptr() + (n * C + c) * P;
      const T* d = dy.ptr() + (n * C + c) * P;
      T* dx = g.dx.ptr() + (n * C + c) * P;
      const T scale = gamma[c] * invstd[c];
      for (int64_t i = 0; i < P; ++i) {
        g.dgamma[c] += d[i] * (xs[i] - mean[c]) * invstd[c];
        g.dbeta[c] += d[i];
        dx[i] = d[i] * scale;
      }
    }
  return g;
}

// ---------------------------------------------------------------------------
// Softmax over the last dimension.

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() == 0) throw Error("shape", "softmax needs at least one dimension");
  const int64_t n = x.dim(x.rank() - 1);
  if (n == 0) return x;
  const int64_t rows = static_cast<int64_t>(x.size()) / n;
  Tensor<T> y(x.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = x.ptr() + r * n;
    T* dst = y.ptr() + r * n;
    T mx = src[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, src[i]);
    double sum = 0;
    for (int64_t i = 0; i < n; ++i) {
      dst[i] = std::exp(src[i] - mx);
      sum += dst[i];
    }
    const T inv = static_cast<T>(1.0 / sum);
    for (int64_t i = 0; i < n; ++i) dst[i] *= inv;
  }
  return y;
}

template <typename T>
Tensor<T> softmax_lastdim_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  const int64_t n = y.dim(y.rank() - 1);
  const int64_t rows = n == 0 ? 0 : static_cast<int64_t>(y.size()) / n;
  Tensor<T> dx(y.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const T* yr = y.ptr() + r * n;
    const T* dr = dy.ptr() + r * n;
    T dot = 0;
    for (int64_t i = 0; i < n; ++i) dot += yr[i] * dr[i];
    for (int64_t i = 0; i < n; ++i) dx[r * n + i] = yr[i] * (dr[i] - dot);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Scalar activations. GELU uses the tanh approximation
//   0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).

inline constexpr double kGeluCoeff = 0.044715;

template <typename T>
T gelu_scalar(T x) {
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T u = c * (x + static_cast<T>(kGeluCoeff) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad_scalar(T x) {
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T a = static_cast<T>(kGeluCoeff);
  const T t = std::tanh(c * (x + a * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * a * x * x);
}

namespace detail {
// exp for float written without branches so the surrounding loops vectorize.
// Range reduction x = n ln2 + r with |r| <= ln2/2, degree-6 polynomial for e^r.
inline float exp_f32(float x) {
  x = std::min(std::max(x, -87.3f), 88.3f);
  // Adding 1.5 * 2^23 rounds to an integer held in the low mantissa bits.
  constexpr float kShift = 12582912.0f;
  const float t = x * 1.44269504f + kShift;
  const float n = t - kShift;
  const float r = (x - n * 0.693359375f) + n * 2.12194440e-4f;
  float p = 1.38888889e-3f;
  p = p * r + 8.33333333e-3f;
  p = p * r + 4.16666667e-2f;
  p = p * r + 1.66666667e-1f;
  p = p * r + 0.5f;
  p = p * r + 1.0f;
  p = p * r + 1.0f;
  const std::int32_t e = std::bit_cast<std::int32_t>(t) - std::bit_cast<std::int32_t>(kShift);
  return p * std::bit_cast<float>((e + 127) << 23);
}
}  // namespace detail

/// Elementwise GELU. Float uses gelu(x) = x * sigmoid(2u), the same function
/// as the tanh form, with a vectorizable exp. Double uses std::tanh.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const std::size_t n = x.size();
  const T* xp = x.ptr();
  T* yp = y.ptr();
  if constexpr (std::is_same_v<T, float>) {
    const float c = static_cast<float>(std::sqrt(2.0 / std::numbers::pi));
    const float a = static_cast<float>(kGeluCoeff);
    for (std::size_t i = 0; i < n; ++i) {
      const float v = xp[i];
      const float u = c * (v + a * v * v * v);
      yp[i] = v / (1.0f + detail::exp_f32(-2.0f * u));
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) yp[i] = gelu_scalar(xp[i]);
  }
  return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  const std::size_t n = x.size();
  const T* xp = x.ptr();
  const T* gp = dy.ptr();
  T* dp = dx.ptr();
  if constexpr (std::is_same_v<T, float>) {
    const float c = static_cast<float>(std::sqrt(2.0 / std::numbers::pi));
    const float a = static_cast<float>(kGeluCoeff);
    for (std::size_t i = 0; i < n; ++i) {
      const float v = xp[i];
      const float u = c * (v + a * v * v * v);
      const float s = 1.0f / (1.0f + detail::exp_f32(-2.0f * u));
      const float du = c * (1.0f + 3.0f * a * v * v);
      dp[i] = gp[i] * (s + 2.0f * v * s * (1.0f - s) * du);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) dp[i] = gp[i] * gelu_grad_scalar(xp[i]);
  }
  return dx;
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x, 4, "global_avg_pool");
  const int64_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  if (P == 0) throw Error("shape", "global_avg_pool over an empty spatial extent");
  Tensor<T> y({N, C});
  for (int64_t i = 0; i < N * C; ++i) {
    double s = 0;
    const T* p = x.ptr() + i * P;
    for (int64_t j = 0; j < P; ++j) s += p[j];
    y[i] = static_cast<T>(s / static_cast<double>(P));
  }
  return y;
}

}  // namespace parformer::kernels
