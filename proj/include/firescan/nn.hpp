#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "firescan/error.hpp"
#include "firescan/random.hpp"
#include "firescan/tensor.hpp"

// Forward/backward kernels for the layer types used by the two networks.
// All 4-d tensors are NCHW. Backward functions return fresh gradients; the
// caller decides whether to accumulate them.
namespace firescan::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* what) {
  require(t.rank() == rank, ErrorCode::shape_mismatch,
          std::string(what) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(t.shape()));
}

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, const ConvGeometry& g) {
  require(in + 2 * g.pad >= k, ErrorCode::shape_mismatch, "kernel larger than padded input");
  require(g.stride > 0, ErrorCode::invalid_argument, "stride must be positive");
  return (in + 2 * g.pad - k) / g.stride + 1;
}

inline std::size_t transposed_out_dim(std::size_t in, std::size_t k, const ConvGeometry& g) {
  require(in >= 1 && g.stride > 0, ErrorCode::shape_mismatch, "bad transposed-conv input");
  const std::size_t full = (in - 1) * g.stride + k;
  require(full > 2 * g.pad, ErrorCode::shape_mismatch, "transposed-conv padding too large");
  return full - 2 * g.pad;
}

namespace detail {

// Per-thread im2col workspace, reused across calls. Fresh multi-megabyte
// buffers cost more in page faults than the GEMM they feed at 256 x 256.
template <typename T>
T* scratch(std::size_t n) {
  thread_local AlignedVector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

// One sample, output rows [oh0, oh1): C x H x W -> (C*kh*kw) x ((oh1-oh0)*Wo).
template <typename T>
void im2col_rows(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
                 const ConvGeometry& g, std::size_t oh0, std::size_t oh1, std::size_t Wo, T* col) {
  const std::size_t hw = (oh1 - oh0) * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * hw - oh0 * Wo;
        for (std::size_t oh = oh0; oh < oh1; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          T* out = row + oh * Wo;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(out, out + Wo, T{0});
            continue;
          }
          const T* in = x + (c * H + static_cast<std::size_t>(ih)) * W;
          // Valid columns satisfy 0 <= ow * stride + kj - pad < W.
          std::size_t lo = 0;
          if (kj < g.pad) lo = std::min(Wo, (g.pad - kj + g.stride - 1) / g.stride);
          std::size_t hi = W + g.pad > kj ? std::min(Wo, (W + g.pad - kj + g.stride - 1) / g.stride) : 0;
          hi = std::max(hi, lo);
          std::fill(out, out + lo, T{0});
          std::fill(out + hi, out + Wo, T{0});
          if (hi == lo) continue;
          const T* src = in + (lo * g.stride + kj - g.pad);
          if (g.stride == 1) {
            std::copy(src, src + (hi - lo), out + lo);
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow, src += g.stride) out[ow] = *src;
          }
        }
      }
}

// One sample: C x H x W -> (C*kh*kw) x (Ho*Wo).
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            const ConvGeometry& g, std::size_t Ho, std::size_t Wo, T* col) {
  im2col_rows(x, C, H, W, kh, kw, g, 0, Ho, Wo, col);
}

// Adjoint of im2col: scatter-add columns back into C x H x W (zeroed first).
template <typename T>
void col2im(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            const ConvGeometry& g, std::size_t Ho, std::size_t Wo, T* x) {
  std::fill(x, x + C * H * W, T{0});
  const std::size_t hw = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * hw;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          T* out = x + (c * H + static_cast<std::size_t>(ih)) * W;
          const T* in = row + oh * Wo;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(W)) out[iw] += in[ow];
          }
        }
      }
}

}  // namespace detail

// ---- conv2d ------------------------------------------------------------

template <typename T>
struct ParamGrads {
  BasicTensor<T> dx;
  BasicTensor<T> dw;
  BasicTensor<T> db;
};

inline constexpr std::size_t kConvTileElems = std::size_t{1} << 17;

// Cross-correlation with zero padding. weight: K x C x kh x kw, bias: K.
template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                              const ConvGeometry& g) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  require(w.dim(1) == C, ErrorCode::shape_mismatch,
          "conv2d: weight expects " + std::to_string(w.dim(1)) + " channels, input has " + std::to_string(C));
  require(b.size() == K, ErrorCode::shape_mismatch, "conv2d: bias size must equal output channels");
  const std::size_t Ho = conv_out_dim(H, kh, g), Wo = conv_out_dim(W, kw, g);
  const std::size_t ckk = C * kh * kw, hw = Ho * Wo;
  BasicTensor<T> y({N, K, Ho, Wo});
  // Unroll a band of output rows at a time so the column block stays in cache.
  const std::size_t band = std::clamp<std::size_t>(kConvTileElems / std::max<std::size_t>(ckk * Wo, 1), 1, Ho);
  T* const col = detail::scratch<T>(ckk * band * Wo);
  ConstMatMap<T> wm(w.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(ckk));
  for (std::size_t n = 0; n < N; ++n) {
    const T* xn = x.data() + n * C * H * W;
    MatMap<T> ym(y.data() + n * K * hw, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(hw));
    for (std::size_t oh0 = 0; oh0 < Ho; oh0 += band) {
      const std::size_t oh1 = std::min(Ho, oh0 + band), cols = (oh1 - oh0) * Wo;
      detail::im2col_rows(xn, C, H, W, kh, kw, g, oh0, oh1, Wo, col);
      ConstMatMap<T> cm(col, static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(cols));
      ym.middleCols(static_cast<Eigen::Index>(oh0 * Wo), static_cast<Eigen::Index>(cols)).noalias() = wm * cm;
    }
    for (std::size_t k = 0; k < K; ++k) ym.row(static_cast<Eigen::Index>(k)).array() += b[k];
  }
  return y;
}

template <typename T>
ParamGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& dy,
                              const ConvGeometry& g, bool need_dx = true) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = conv_out_dim(H, kh, g), Wo = conv_out_dim(W, kw, g);
  require(dy.shape() == Shape({N, K, Ho, Wo}), ErrorCode::shape_mismatch, "conv2d backward: bad upstream shape");
  const std::size_t ckk = C * kh * kw, hw = Ho * Wo;
  ParamGrads<T> out{need_dx ? BasicTensor<T>(x.shape()) : BasicTensor<T>(), BasicTensor<T>(w.shape()),
                    BasicTensor<T>({K})};
  T* const col = detail::scratch<T>(ckk * hw);
  ConstMatMap<T> wm(w.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(ckk));
  MatMap<T> dwm(out.dw.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(ckk));
  for (std::size_t n = 0; n < N; ++n) {
    ConstMatMap<T> dym(dy.data() + n * K * hw, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(hw));
    detail::im2col(x.data() + n * C * H * W, C, H, W, kh, kw, g, Ho, Wo, col);
    MatMap<T> cm(col, static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(hw));
    dwm.noalias() += dym * cm.transpose();
    for (std::size_t k = 0; k < K; ++k) out.db[k] += dym.row(static_cast<Eigen::Index>(k)).sum();
    if (need_dx) {
      cm.noalias() = wm.transpose() * dym;
      detail::col2im(col, C, H, W, kh, kw, g, Ho, Wo, out.dx.data() + n * C * H * W);
    }
  }
  return out;
}

// ---- transposed conv ---------------------------------------------------

// Adjoint of conv2d. weight: Ci x Co x k x k, bias: Co.
// Output spatial dim = (in - 1) * stride - 2 * pad + k; 2x for k=2,s=2,p=0.
template <typename T>
BasicTensor<T> transposed_conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                                         const ConvGeometry& g = {2, 0}) {
  require_rank(x, 4, "transposed conv input");
  require_rank(w, 4, "transposed conv weight");
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(w.dim(0) == Ci, ErrorCode::shape_mismatch, "transposed conv: weight/input channel mismatch");
  const std::size_t Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  require(b.size() == Co, ErrorCode::shape_mismatch, "transposed conv: bias size must equal output channels");
  const std::size_t Ho = transposed_out_dim(H, kh, g), Wo = transposed_out_dim(W, kw, g);
  require(conv_out_dim(Ho, kh, g) == H && conv_out_dim(Wo, kw, g) == W, ErrorCode::shape_mismatch,
          "transposed conv geometry is not invertible");
  const std::size_t okk = Co * kh * kw, hw = H * W;
  BasicTensor<T> y({N, Co, Ho, Wo});
  T* const col = detail::scratch<T>(okk * hw);
  ConstMatMap<T> wm(w.data(), static_cast<Eigen::Index>(Ci), static_cast<Eigen::Index>(okk));
  for (std::size_t n = 0; n < N; ++n) {
    ConstMatMap<T> xm(x.data() + n * Ci * hw, static_cast<Eigen::Index>(Ci), static_cast<Eigen::Index>(hw));
    MatMap<T> cm(col, static_cast<Eigen::Index>(okk), static_cast<Eigen::Index>(hw));
    cm.noalias() = wm.transpose() * xm;
    T* yn = y.data() + n * Co * Ho * Wo;
    detail::col2im(col, Co, Ho, Wo, kh, kw, g, H, W, yn);
    for (std::size_t o = 0; o < Co; ++o) {
      T* plane = yn + o * Ho * Wo;
      for (std::size_t i = 0; i < Ho * Wo; ++i) plane[i] += b[o];
    }
  }
  return y;
}

template <typename T>
ParamGrads<T> transposed_conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& dy,
                                         const ConvGeometry& g = {2, 0}, bool need_dx = true) {
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = transposed_out_dim(H, kh, g), Wo = transposed_out_dim(W, kw, g);
  require(dy.shape() == Shape({N, Co, Ho, Wo}), ErrorCode::shape_mismatch,
          "transposed conv backward: bad upstream shape");
  const std::size_t okk = Co * kh * kw, hw = H * W;
  ParamGrads<T> out{need_dx ? BasicTensor<T>(x.shape()) : BasicTensor<T>(), BasicTensor<T>(w.shape()),
                    BasicTensor<T>({Co})};
  T* const col = detail::scratch<T>(okk * hw);
  ConstMatMap<T> wm(w.data(), static_cast<Eigen::Index>(Ci), static_cast<Eigen::Index>(okk));
  MatMap<T> dwm(out.dw.data(), static_cast<Eigen::Index>(Ci), static_cast<Eigen::Index>(okk));
  for (std::size_t n = 0; n < N; ++n) {
    const T* dyn = dy.data() + n * Co * Ho * Wo;
    detail::im2col(dyn, Co, Ho, Wo, kh, kw, g, H, W, col);
    ConstMatMap<T> cm(col, static_cast<Eigen::Index>(okk), static_cast<Eigen::Index>(hw));
    ConstMatMap<T> xm(x.data() + n * Ci * hw, static_cast<Eigen::Index>(Ci), static_cast<Eigen::Index>(hw));
    dwm.noalias() += xm * cm.transpose();
    if (need_dx) {
      MatMap<T> dxm(out.dx.data() + n * Ci * hw, static_cast<Eigen::Index>(Ci), static_cast<Eigen::Index>(hw));
      dxm.noalias() = wm * cm;
    }
    for (std::size_t o = 0; o < Co; ++o) {
      const T* plane = dyn + o * Ho * Wo;
      T s{0};
      for (std::size_t i = 0; i < Ho * Wo; ++i) s += plane[i];
      out.db[o] += s;
    }
  }
  return out;
}

// ---- batch norm --------------------------------------------------------

enum class Mode { train, infer };

template <typename T>
struct BatchNormCache {
  BasicTensor<T> xhat;
  std::vector<T> inv_std;
  std::vector<T> batch_mean;
  std::vector<T> batch_var;  // biased
};

// Per-channel normalization over N, H, W. In train mode uses batch
// statistics (biased variance) and fills `cache`; in infer mode uses the
// running statistics.
template <typename T>
BasicTensor<T> batch_norm_forward(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                                  const BasicTensor<T>& running_mean, const BasicTensor<T>& running_var, Mode mode,
                                  double eps = 1e-5, BatchNormCache<T>* cache = nullptr) {
  require_rank(x, 4, "batch_norm input");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(gamma.size() == C && beta.size() == C && running_mean.size() == C && running_var.size() == C,
          ErrorCode::shape_mismatch, "batch_norm: parameter size must equal channel count");
  BasicTensor<T> y(x.shape());
  std::vector<T> mean(C), inv_std(C), var(C);
  if (mode == Mode::train) {
    const std::size_t M = N * HW;
    require(M >= 2, ErrorCode::invalid_argument, "batch_norm train mode needs at least 2 values per channel");
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(M);
      double ss = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = p[i] - mu;
          ss += d * d;
        }
      }
      const double v = ss / static_cast<double>(M);
      mean[c] = static_cast<T>(mu);
      var[c] = static_cast<T>(v);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(v + eps));
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      var[c] = running_var[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps));
    }
  }
  if (cache) cache->xhat = BasicTensor<T>(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T xh = (x[off + i] - mean[c]) * inv_std[c];
        if (cache) cache->xhat[off + i] = xh;
        y[off + i] = gamma[c] * xh + beta[c];
      }
    }
  if (cache) {
    cache->inv_std = inv_std;
    cache->batch_mean = mean;
    cache->batch_var = var;
  }
  return y;
}

// Exponential moving average update of running statistics (unbiased var).
template <typename T>
void batch_norm_update_running(BasicTensor<T>& running_mean, BasicTensor<T>& running_var,
                               const BatchNormCache<T>& cache, std::size_t count, double momentum = 0.1) {
  const double unbias = count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
  for (std::size_t c = 0; c < running_mean.size(); ++c) {
    running_mean[c] = static_cast<T>((1 - momentum) * running_mean[c] + momentum * cache.batch_mean[c]);
    running_var[c] = static_cast<T>((1 - momentum) * running_var[c] + momentum * cache.batch_var[c] * unbias);
  }
}

// Train-mode backward. Returns dx in `dx`, dgamma in `dw`, dbeta in `db`.
template <typename T>
ParamGrads<T> batch_norm_backward(const BasicTensor<T>& dy, const BasicTensor<T>& gamma,
                                  const BatchNormCache<T>& cache) {
  const std::size_t N = dy.dim(0), C = dy.dim(1), HW = dy.dim(2) * dy.dim(3);
  const double M = static_cast<double>(N * HW);
  ParamGrads<T> out{BasicTensor<T>(dy.shape()), BasicTensor<T>({C}), BasicTensor<T>({C})};
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        sum_dy += dy[off + i];
        sum_dy_xhat += static_cast<double>(dy[off + i]) * cache.xhat[off + i];
      }
    }
    out.dw[c] = static_cast<T>(sum_dy_xhat);
    out.db[c] = static_cast<T>(sum_dy);
    const double k = static_cast<double>(gamma[c]) * cache.inv_std[c] / M;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i)
        out.dx[off + i] = static_cast<T>(k * (M * dy[off + i] - sum_dy - cache.xhat[off + i] * sum_dy_xhat));
    }
  }
  return out;
}

// ---- pooling -----------------------------------------------------------

// 2x2 max pool, stride 2. `argmax` receives the flat input index chosen for
// each output; ties go to the first cell in row-major order.
template <typename T>
BasicTensor<T> max_pool2_forward(const BasicTensor<T>& x, std::vector<std::uint32_t>* argmax = nullptr) {
  require_rank(x, 4, "max_pool2 input");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0, ErrorCode::shape_mismatch, "max_pool2 requires even spatial dims");
  const std::size_t Ho = H / 2, Wo = W / 2;
  BasicTensor<T> y({N, C, Ho, Wo});
  if (argmax) argmax->resize(y.size());
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* in = x.data() + nc * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        std::size_t best = (2 * oh) * W + 2 * ow;
        const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
        for (std::size_t k : cand)
          if (in[k] > in[best]) best = k;
        const std::size_t o = (nc * Ho + oh) * Wo + ow;
        y[o] = in[best];
        if (argmax) (*argmax)[o] = static_cast<std::uint32_t>(nc * H * W + best);
      }
  }
  return y;
}

// Inference-only ReLU -> batch norm (running statistics) -> 2x2 max pool in
// one pass. Same arithmetic and tie rule as the three separate ops.
template <typename T>
BasicTensor<T> relu_bn_pool_infer(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                                  const BasicTensor<T>& running_mean, const BasicTensor<T>& running_var,
                                  double eps = 1e-5) {
  require_rank(x, 4, "relu_bn_pool input");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(gamma.size() == C && beta.size() == C && running_mean.size() == C && running_var.size() == C,
          ErrorCode::shape_mismatch, "batch_norm: parameter size must equal channel count");
  require(H % 2 == 0 && W % 2 == 0, ErrorCode::shape_mismatch, "max_pool2 requires even spatial dims");
  const std::size_t Ho = H / 2, Wo = W / 2;
  BasicTensor<T> y({N, C, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T mean = running_mean[c], g = gamma[c], b = beta[c];
      const T inv_std = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps));
      const auto f = [&](T v) {
        const T r = v > T{0} ? v : T{0};
        const T xh = (r - mean) * inv_std;
        return g * xh + b;
      };
      const T* in = x.data() + (n * C + c) * H * W;
      T* out = y.data() + (n * C + c) * Ho * Wo;
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        const T* r0 = in + 2 * oh * W;
        const T* r1 = r0 + W;
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          T best = f(r0[2 * ow]);
          for (T v : {f(r0[2 * ow + 1]), f(r1[2 * ow]), f(r1[2 * ow + 1])})
            if (v > best) best = v;
          out[oh * Wo + ow] = best;
        }
      }
    }
  return y;
}

template <typename T>
BasicTensor<T> max_pool2_backward(const BasicTensor<T>& dy, const std::vector<std::uint32_t>& argmax,
                                  const Shape& input_shape) {
  BasicTensor<T> dx(input_shape);
  for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax[o]] += dy[o];
  return dx;
}

// N x C x H x W -> N x C, with first-occurrence argmax.
template <typename T>
BasicTensor<T> global_max_pool_forward(const BasicTensor<T>& x, std::vector<std::uint32_t>* argmax = nullptr) {
  require_rank(x, 4, "global_max_pool input");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(HW > 0, ErrorCode::shape_mismatch, "global_max_pool: empty spatial dims");
  BasicTensor<T> y({N, C});
  if (argmax) argmax->resize(N * C);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* in = x.data() + nc * HW;
    std::size_t best = 0;
    for (std::size_t i = 1; i < HW; ++i)
      if (in[i] > in[best]) best = i;
    y[nc] = in[best];
    if (argmax) (*argmax)[nc] = static_cast<std::uint32_t>(nc * HW + best);
  }
  return y;
}

template <typename T>
BasicTensor<T> global_max_pool_backward(const BasicTensor<T>& dy, const std::vector<std::uint32_t>& argmax,
                                        const Shape& input_shape) {
  BasicTensor<T> dx(input_shape);
  for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax[o]] += dy[o];
  return dx;
}

// Nearest-neighbour 2x upsampling (duplicates each cell into a 2x2 block).
template <typename T>
BasicTensor<T> upsample2_nearest(const BasicTensor<T>& x) {
  require_rank(x, 4, "upsample input");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  BasicTensor<T> y({N, C, 2 * H, 2 * W});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t h = 0; h < 2 * H; ++h)
      for (std::size_t w = 0; w < 2 * W; ++w) y[(nc * 2 * H + h) * 2 * W + w] = x[(nc * H + h / 2) * W + w / 2];
  return y;
}

// ---- dense -------------------------------------------------------------

// x: N x F, weight: F x O, bias: O.
template <typename T>
BasicTensor<T> dense_forward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  require_rank(x, 2, "dense input");
  require_rank(w, 2, "dense weight");
  const std::size_t N = x.dim(0), F = x.dim(1), O = w.dim(1);
  require(w.dim(0) == F && b.size() == O, ErrorCode::shape_mismatch, "dense: shape mismatch");
  BasicTensor<T> y({N, O});
  ConstMatMap<T> xm(x.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(F));
  ConstMatMap<T> wm(w.data(), static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(O));
  MatMap<T> ym(y.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(O));
  ym.noalias() = xm * wm;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) y[n * O + o] += b[o];
  return y;
}

template <typename T>
ParamGrads<T> dense_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& dy) {
  const std::size_t N = x.dim(0), F = x.dim(1), O = w.dim(1);
  require(dy.shape() == Shape({N, O}), ErrorCode::shape_mismatch, "dense backward: bad upstream shape");
  ParamGrads<T> out{BasicTensor<T>(x.shape()), BasicTensor<T>(w.shape()), BasicTensor<T>({O})};
  ConstMatMap<T> xm(x.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(F));
  ConstMatMap<T> wm(w.data(), static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(O));
  ConstMatMap<T> dym(dy.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(O));
  MatMap<T>(out.dx.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(F)).noalias() = dym * wm.transpose();
  MatMap<T>(out.dw.data(), static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(O)).noalias() = xm.transpose() * dym;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) out.db[o] += dy[n * O + o];
  return out;
}

// ---- activations -------------------------------------------------------

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return y;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy) {
  BasicTensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T{0} ? dy[i] : T{0};
  return dx;
}

template <typename T>
T sigmoid(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <typename T>
BasicTensor<T> sigmoid_forward(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid(x[i]);
  return y;
}

// Takes the forward output y = sigmoid(x).
template <typename T>
BasicTensor<T> sigmoid_backward(const BasicTensor<T>& y, const BasicTensor<T>& dy) {
  BasicTensor<T> dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (T{1} - y[i]);
  return dx;
}

// ---- concat ------------------------------------------------------------

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank(a, 4, "concat lhs");
  require_rank(b, 4, "concat rhs");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3), ErrorCode::shape_mismatch,
          "concat: batch/spatial dims differ");
  const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  BasicTensor<T> y({N, Ca + Cb, a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.data() + n * Ca * HW, Ca * HW, y.data() + n * (Ca + Cb) * HW);
    std::copy_n(b.data() + n * Cb * HW, Cb * HW, y.data() + (n * (Ca + Cb) + Ca) * HW);
  }
  return y;
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>& y, std::size_t Ca) {
  const std::size_t N = y.dim(0), C = y.dim(1), H = y.dim(2), W = y.dim(3), HW = H * W;
  BasicTensor<T> a({N, Ca, H, W}), b({N, C - Ca, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(y.data() + n * C * HW, Ca * HW, a.data() + n * Ca * HW);
    std::copy_n(y.data() + (n * C + Ca) * HW, (C - Ca) * HW, b.data() + n * (C - Ca) * HW);
  }
  return {std::move(a), std::move(b)};
}

// ---- loss --------------------------------------------------------------

struct LossConfig {
  double positive_weight = 1.0;
};

inline constexpr double kProbabilityClamp = 1e-7;

namespace detail {
template <typename T>
void check_targets(const BasicTensor<T>& pred, const BasicTensor<T>& target, const LossConfig& cfg) {
  require(pred.size() == target.size() && !pred.empty(), ErrorCode::shape_mismatch,
          "bce: prediction/target size mismatch");
  require(cfg.positive_weight > 0, ErrorCode::config, "positive_weight must be > 0");
  for (std::size_t i = 0; i < target.size(); ++i)
    require(target[i] == T{0} || target[i] == T{1}, ErrorCode::invalid_argument, "bce: target not binary");
}
}  // namespace detail

// Mean of -[w*y*log p + (1-y)*log(1-p)] with p clamped to [1e-7, 1-1e-7].
template <typename T>
double weighted_bce(const BasicTensor<T>& pred, const BasicTensor<T>& target, const LossConfig& cfg) {
  detail::check_targets(pred, target, cfg);
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(static_cast<double>(pred[i]), kProbabilityClamp, 1 - kProbabilityClamp);
    const double y = target[i];
    s -= cfg.positive_weight * y * std::log(p) + (1 - y) * std::log(1 - p);
  }
  return s / static_cast<double>(pred.size());
}

// d loss / d pred; zero where the clamp is active.
template <typename T>
BasicTensor<T> weighted_bce_backward(const BasicTensor<T>& pred, const BasicTensor<T>& target, const LossConfig& cfg) {
  detail::check_targets(pred, target, cfg);
  BasicTensor<T> d(pred.shape());
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i];
    if (p < kProbabilityClamp || p > 1 - kProbabilityClamp) continue;
    const double y = target[i];
    d[i] = static_cast<T>(inv_n * (-cfg.positive_weight * y / p + (1 - y) / (1 - p)));
  }
  return d;
}

template <typename T>
struct LossAndGrad {
  double loss = 0;
  BasicTensor<T> grad;
};

// Fused sigmoid + weighted BCE on logits, used for training. Equal to
// weighted_bce(sigmoid(z)) wherever the probability clamp is inactive, and
// keeps a useful gradient when float sigmoid saturates.
template <typename T>
LossAndGrad<T> weighted_bce_with_logits(const BasicTensor<T>& logits, const BasicTensor<T>& target,
                                        const LossConfig& cfg) {
  detail::check_targets(logits, target, cfg);
  LossAndGrad<T> out{0.0, BasicTensor<T>(logits.shape())};
  const double inv_n = 1.0 / static_cast<double>(logits.size());
  const double w = cfg.positive_weight;
  double s = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i], y = target[i];
    // log(1 + e^z) computed stably
    const double softplus_z = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    const double softplus_neg = softplus_z - z;  // log(1 + e^-z)
    s += w * y * softplus_neg + (1 - y) * softplus_z;
    const double p = sigmoid(z);
    out.grad[i] = static_cast<T>(inv_n * (p * (w * y + 1 - y) - w * y));
  }
  out.loss = s * inv_n;
  return out;
}

// ---- initialization ----------------------------------------------------

// He-uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
inline void he_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  for (auto& v : t.values()) v = static_cast<float>(uniform(rng, -limit, limit));
}

// ---- optimizer ---------------------------------------------------------

struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::int64_t t = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update over every parameter's grad slot. The
// state is sized on first use and must keep matching afterwards.
inline void adam_step(std::span<Tensor* const> params, AdamState& state) {
  require(state.lr > 0, ErrorCode::config, "adam: lr must be > 0");
  if (state.m.empty() && state.t == 0) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->size(), 0.0f);
      state.v.emplace_back(p->size(), 0.0f);
    }
  }
  require(state.m.size() == params.size(), ErrorCode::shape_mismatch, "adam: parameter count changed");
  for (std::size_t k = 0; k < params.size(); ++k) {
    require(state.m[k].size() == params[k]->size(), ErrorCode::shape_mismatch,
            "adam: moment/parameter shape mismatch");
    require(params[k]->has_grad(), ErrorCode::state, "adam: parameter has no gradient");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    auto g = p.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = state.beta1 * m[i] + (1 - state.beta1) * gi;
      const double vi = state.beta2 * v[i] + (1 - state.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double mhat = mi / c1, vhat = vi / c2;
      p[i] = static_cast<float>(p[i] - state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

}  // namespace firescan::nn
