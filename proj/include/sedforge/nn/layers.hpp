#pragma once

// Batched layer primitives with their exact gradients.
//
// Layouts: convolutional stage [B, C, F, T]; sequence stage [B, D, T]. Time is
// always the innermost (contiguous) axis.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "sedforge/error.hpp"
#include "sedforge/random.hpp"
#include "sedforge/tensor.hpp"

namespace sedforge::nn {

template <class S>
S sigmoid(S x) {
  if (x >= 0) {
    const S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  const S e = std::exp(x);
  return e / (S(1) + e);
}

// ---- 2-D same convolution -------------------------------------------------

/// Output positions i in [0, n) whose source i + shift lies inside [0, n).
inline std::pair<std::size_t, std::size_t> overlap(std::size_t n, std::ptrdiff_t shift) {
  const std::ptrdiff_t len = static_cast<std::ptrdiff_t>(n);
  const std::ptrdiff_t lo = std::clamp<std::ptrdiff_t>(-shift, 0, len);
  const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>(len - shift, lo, len);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

/// Cross-correlation with zero padding so that F and T are preserved. For a
/// kernel extent k the padding before is (k-1)/2 and after is k-1-(k-1)/2.
template <class S>
Tensor<S> conv2d_same_forward(const Tensor<S>& in, const Tensor<S>& weight,
                              const Tensor<S>& bias) {
  require_rank(in, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const std::size_t B = in.dim(0), Ci = in.dim(1), F = in.dim(2), T = in.dim(3);
  const std::size_t Co = weight.dim(0), kf = weight.dim(2), kt = weight.dim(3);
  if (weight.dim(1) != Ci)
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                     " input maps, got " + std::to_string(Ci));
  require_shape(bias, {Co}, "conv2d bias");
  const std::ptrdiff_t pf = static_cast<std::ptrdiff_t>((kf - 1) / 2);
  const std::ptrdiff_t pt = static_cast<std::ptrdiff_t>((kt - 1) / 2);
  Tensor<S> out({B, Co, F, T});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t co = 0; co < Co; ++co) {
      S* dst_map = &out.at(b, co, 0, 0);
      std::fill(dst_map, dst_map + F * T, bias[co]);
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const S* src_map = &in.at(b, ci, 0, 0);
        for (std::size_t df = 0; df < kf; ++df) {
          const std::ptrdiff_t sf = static_cast<std::ptrdiff_t>(df) - pf;
          const auto [f_lo, f_hi] = overlap(F, sf);
          for (std::size_t dt = 0; dt < kt; ++dt) {
            const S w = weight.at(co, ci, df, dt);
            const std::ptrdiff_t st = static_cast<std::ptrdiff_t>(dt) - pt;
            const auto [t_lo, t_hi] = overlap(T, st);
            for (std::size_t f = f_lo; f < f_hi; ++f) {
              S* dst = dst_map + f * T;
              const S* src = src_map + static_cast<std::ptrdiff_t>(f + sf) * static_cast<std::ptrdiff_t>(T) + st;
              for (std::size_t t = t_lo; t < t_hi; ++t) dst[t] += w * src[t];
            }
          }
        }
      }
    }
  }
  return out;
}

template <class S>
struct Conv2dGrads {
  Tensor<S> input, weight, bias;
};

template <class S>
Conv2dGrads<S> conv2d_same_backward(const Tensor<S>& in, const Tensor<S>& weight,
                                    const Tensor<S>& grad_out, bool need_input_grad = true) {
  const std::size_t B = in.dim(0), Ci = in.dim(1), F = in.dim(2), T = in.dim(3);
  const std::size_t Co = weight.dim(0), kf = weight.dim(2), kt = weight.dim(3);
  require_shape(grad_out, {B, Co, F, T}, "conv2d grad");
  const std::ptrdiff_t pf = static_cast<std::ptrdiff_t>((kf - 1) / 2);
  const std::ptrdiff_t pt = static_cast<std::ptrdiff_t>((kt - 1) / 2);
  Conv2dGrads<S> g{need_input_grad ? Tensor<S>(in.shape()) : Tensor<S>(),
                   Tensor<S>(weight.shape()), Tensor<S>({Co})};
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t co = 0; co < Co; ++co) {
      const S* go_map = &grad_out.at(b, co, 0, 0);
      S bsum = 0;
      for (std::size_t i = 0; i < F * T; ++i) bsum += go_map[i];
      g.bias[co] += bsum;
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const S* src_map = &in.at(b, ci, 0, 0);
        S* gi_map = need_input_grad ? &g.input.at(b, ci, 0, 0) : nullptr;
        for (std::size_t df = 0; df < kf; ++df) {
          const std::ptrdiff_t sf = static_cast<std::ptrdiff_t>(df) - pf;
          const auto [f_lo, f_hi] = overlap(F, sf);
          for (std::size_t dt = 0; dt < kt; ++dt) {
            const S w = weight.at(co, ci, df, dt);
            const std::ptrdiff_t st = static_cast<std::ptrdiff_t>(dt) - pt;
            const auto [t_lo, t_hi] = overlap(T, st);
            S wsum = 0;
            for (std::size_t f = f_lo; f < f_hi; ++f) {
              const S* go = go_map + f * T;
              const std::ptrdiff_t off =
                  static_cast<std::ptrdiff_t>(f + sf) * static_cast<std::ptrdiff_t>(T) + st;
              const S* src = src_map + off;
              S acc = 0;
#pragma omp simd reduction(+ : acc)
              for (std::size_t t = t_lo; t < t_hi; ++t) acc += go[t] * src[t];
              wsum += acc;
              if (gi_map) {
                S* gi = gi_map + off;
                for (std::size_t t = t_lo; t < t_hi; ++t) gi[t] += w * go[t];
              }
            }
            g.weight.at(co, ci, df, dt) += wsum;
          }
        }
      }
    }
  }
  return g;
}

// ---- elementwise activations ----------------------------------------------

template <class S>
Tensor<S> relu_forward(const Tensor<S>& in) {
  Tensor<S> out = in;
  for (auto& v : out.values()) v = v > 0 ? v : S(0);
  return out;
}

/// Gradient through ReLU given its output.
template <class S>
Tensor<S> relu_backward(const Tensor<S>& out, const Tensor<S>& grad_out) {
  Tensor<S> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(out[i] > 0)) g[i] = 0;
  return g;
}

template <class S>
Tensor<S> sigmoid_forward(const Tensor<S>& in) {
  Tensor<S> out = in;
  for (auto& v : out.values()) v = sigmoid(v);
  return out;
}

template <class S>
Tensor<S> sigmoid_backward(const Tensor<S>& out, const Tensor<S>& grad_out) {
  Tensor<S> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= out[i] * (S(1) - out[i]);
  return g;
}

// ---- frequency max pooling ------------------------------------------------

/// Non-overlapping max over p consecutive frequency bins; time untouched.
/// `argmax` (optional) receives the source frequency index of each output.
template <class S>
Tensor<S> freq_max_pool_forward(const Tensor<S>& in, std::size_t p,
                                std::vector<std::uint32_t>* argmax = nullptr) {
  require_rank(in, 4, "frequency pooling input");
  const std::size_t B = in.dim(0), C = in.dim(1), F = in.dim(2), T = in.dim(3);
  if (p == 0 || F % p != 0)
    throw ShapeError("pool size " + std::to_string(p) + " does not divide " +
                     std::to_string(F) + " frequency bins");
  const std::size_t Fo = F / p;
  Tensor<S> out({B, C, Fo, T});
  if (argmax) argmax->assign(out.size(), 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t fo = 0; fo < Fo; ++fo)
        for (std::size_t t = 0; t < T; ++t) {
          std::size_t best = fo * p;
          S v = in.at(b, c, best, t);
          for (std::size_t j = 1; j < p; ++j) {
            const S cand = in.at(b, c, fo * p + j, t);
            if (cand > v) {
              v = cand;
              best = fo * p + j;
            }
          }
          out.at(b, c, fo, t) = v;
          if (argmax) (*argmax)[((b * C + c) * Fo + fo) * T + t] = static_cast<std::uint32_t>(best);
        }
  return out;
}

template <class S>
Tensor<S> freq_max_pool_backward(const Shape& in_shape, const std::vector<std::uint32_t>& argmax,
                                 const Tensor<S>& grad_out) {
  const std::size_t B = grad_out.dim(0), C = grad_out.dim(1), Fo = grad_out.dim(2),
                    T = grad_out.dim(3);
  Tensor<S> g(in_shape);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t fo = 0; fo < Fo; ++fo)
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t idx = ((b * C + c) * Fo + fo) * T + t;
          g.at(b, c, argmax[idx], t) += grad_out[idx];
        }
  return g;
}

// ---- map stacking ----------------------------------------------------------

/// [B, M, F', T] -> [B, M*F', T]; row index m*F' + f (map-major).
template <class S>
Tensor<S> stack_maps(const Tensor<S>& in) {
  require_rank(in, 4, "stack input");
  Tensor<S> out = in;
  out.reshape({in.dim(0), in.dim(1) * in.dim(2), in.dim(3)});
  return out;
}

template <class S>
Tensor<S> unstack_maps(const Tensor<S>& in, std::size_t maps) {
  require_rank(in, 3, "unstack input");
  if (maps == 0 || in.dim(1) % maps != 0)
    throw ShapeError("cannot unstack " + std::to_string(in.dim(1)) + " rows into " +
                     std::to_string(maps) + " maps");
  Tensor<S> out = in;
  out.reshape({in.dim(0), maps, in.dim(1) / maps, in.dim(2)});
  return out;
}

// ---- dense (per-frame) ----------------------------------------------------

/// out[b, u, t] = sum_d W[u, d] in[b, d, t] + bias[u], the same weights at every frame.
template <class S>
Tensor<S> dense_forward(const Tensor<S>& in, const Tensor<S>& weight, const Tensor<S>& bias) {
  require_rank(in, 3, "dense input");
  const std::size_t B = in.dim(0), D = in.dim(1), T = in.dim(2), U = weight.dim(0);
  if (weight.rank() != 2 || weight.dim(1) != D)
    throw ShapeError("dense: weight " + shape_string(weight.shape()) + " does not accept " +
                     std::to_string(D) + " inputs");
  require_shape(bias, {U}, "dense bias");
  Tensor<S> out({B, U, T});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t u = 0; u < U; ++u) {
      S* dst = &out.at(b, u, 0);
      std::fill(dst, dst + T, bias[u]);
      for (std::size_t d = 0; d < D; ++d) {
        const S w = weight.at(u, d);
        const S* src = &in.at(b, d, 0);
        for (std::size_t t = 0; t < T; ++t) dst[t] += w * src[t];
      }
    }
  return out;
}

template <class S>
struct DenseGrads {
  Tensor<S> input, weight, bias;
};

template <class S>
DenseGrads<S> dense_backward(const Tensor<S>& in, const Tensor<S>& weight,
                             const Tensor<S>& grad_out) {
  const std::size_t B = in.dim(0), D = in.dim(1), T = in.dim(2), U = weight.dim(0);
  require_shape(grad_out, {B, U, T}, "dense grad");
  DenseGrads<S> g{Tensor<S>(in.shape()), Tensor<S>(weight.shape()), Tensor<S>({U})};
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t u = 0; u < U; ++u) {
      const S* go = &grad_out.at(b, u, 0);
      S bs = 0;
      for (std::size_t t = 0; t < T; ++t) bs += go[t];
      g.bias[u] += bs;
      for (std::size_t d = 0; d < D; ++d) {
        const S* src = &in.at(b, d, 0);
        S* gi = &g.input.at(b, d, 0);
        const S w = weight.at(u, d);
        S acc = 0;
        for (std::size_t t = 0; t < T; ++t) {
          acc += go[t] * src[t];
          gi[t] += w * go[t];
        }
        g.weight.at(u, d) += acc;
      }
    }
  return g;
}

// ---- batch normalization --------------------------------------------------

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.99;

/// Statistics are per channel (axis 1) over every other axis: (B, F, T) for
/// convolutional maps and (B, T) for per-frame units.
template <class S>
struct BatchNormCache {
  Tensor<S> xhat;
  std::vector<S> invstd;
};

template <class S>
struct BatchNormBatchStats {
  std::vector<double> mean, var;
};

template <class S>
Tensor<S> batch_norm_train_forward(const Tensor<S>& in, const Tensor<S>& gamma,
                                   const Tensor<S>& beta, BatchNormCache<S>* cache,
                                   BatchNormBatchStats<S>* stats, double eps = kBatchNormEps) {
  const std::size_t B = in.dim(0), C = in.dim(1), inner = in.size() / (B * C);
  require_shape(gamma, {C}, "batch norm gamma");
  Tensor<S> out(in.shape());
  if (cache) {
    cache->xhat = Tensor<S>(in.shape());
    cache->invstd.assign(C, S(0));
  }
  if (stats) {
    stats->mean.assign(C, 0.0);
    stats->var.assign(C, 0.0);
  }
  const double n = static_cast<double>(B * inner);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const S* x = in.data() + (b * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) s += x[i];
    }
    const double mean = s / n;
    double q = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const S* x = in.data() + (b * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double d = x[i] - mean;
        q += d * d;
      }
    }
    const double var = q / n;
    const S invstd = static_cast<S>(1.0 / std::sqrt(var + eps));
    const S m = static_cast<S>(mean);
    if (cache) cache->invstd[c] = invstd;
    if (stats) {
      stats->mean[c] = mean;
      stats->var[c] = var;
    }
    for (std::size_t b = 0; b < B; ++b) {
      const S* x = in.data() + (b * C + c) * inner;
      S* y = out.data() + (b * C + c) * inner;
      S* xh = cache ? cache->xhat.data() + (b * C + c) * inner : nullptr;
      for (std::size_t i = 0; i < inner; ++i) {
        const S h = (x[i] - m) * invstd;
        if (xh) xh[i] = h;
        y[i] = gamma[c] * h + beta[c];
      }
    }
  }
  return out;
}

template <class S>
struct BatchNormGrads {
  Tensor<S> input, gamma, beta;
};

template <class S>
BatchNormGrads<S> batch_norm_train_backward(const BatchNormCache<S>& cache,
                                            const Tensor<S>& gamma, const Tensor<S>& grad_out) {
  const std::size_t B = grad_out.dim(0), C = grad_out.dim(1), inner = grad_out.size() / (B * C);
  BatchNormGrads<S> g{Tensor<S>(grad_out.shape()), Tensor<S>({C}), Tensor<S>({C})};
  const double n = static_cast<double>(B * inner);
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const S* dy = grad_out.data() + (b * C + c) * inner;
      const S* xh = cache.xhat.data() + (b * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += static_cast<double>(dy[i]) * xh[i];
      }
    }
    g.gamma[c] = static_cast<S>(sum_dy_xhat);
    g.beta[c] = static_cast<S>(sum_dy);
    const S k = static_cast<S>(gamma[c] * cache.invstd[c] / n);
    const S mdy = static_cast<S>(sum_dy), mdyx = static_cast<S>(sum_dy_xhat);
    const S nn = static_cast<S>(n);
    for (std::size_t b = 0; b < B; ++b) {
      const S* dy = grad_out.data() + (b * C + c) * inner;
      const S* xh = cache.xhat.data() + (b * C + c) * inner;
      S* dx = g.input.data() + (b * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) dx[i] = k * (nn * dy[i] - mdy - xh[i] * mdyx);
    }
  }
  return g;
}

template <class S>
Tensor<S> batch_norm_infer_forward(const Tensor<S>& in, const Tensor<S>& gamma,
                                   const Tensor<S>& beta, const Tensor<S>& running_mean,
                                   const Tensor<S>& running_var, double eps = kBatchNormEps) {
  const std::size_t B = in.dim(0), C = in.dim(1), inner = in.size() / (B * C);
  require_shape(gamma, {C}, "batch norm gamma");
  Tensor<S> out(in.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const S scale = static_cast<S>(gamma[c] / std::sqrt(static_cast<double>(running_var[c]) + eps));
    const S shift = beta[c] - scale * running_mean[c];
    for (std::size_t b = 0; b < B; ++b) {
      const S* x = in.data() + (b * C + c) * inner;
      S* y = out.data() + (b * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) y[i] = scale * x[i] + shift;
    }
  }
  return out;
}

/// Gradients of the inference-mode (affine) normalization.
template <class S>
BatchNormGrads<S> batch_norm_infer_backward(const Tensor<S>& in, const Tensor<S>& gamma,
                                            const Tensor<S>& running_mean,
                                            const Tensor<S>& running_var, const Tensor<S>& grad_out,
                                            double eps = kBatchNormEps) {
  const std::size_t B = grad_out.dim(0), C = grad_out.dim(1), inner = grad_out.size() / (B * C);
  require_shape(in, grad_out.shape(), "batch norm cached input");
  BatchNormGrads<S> g{Tensor<S>(grad_out.shape()), Tensor<S>({C}), Tensor<S>({C})};
  for (std::size_t c = 0; c < C; ++c) {
    const double invstd = 1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps);
    const S scale = static_cast<S>(gamma[c] * invstd);
    double dg = 0.0, db = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const S* x = in.data() + (b * C + c) * inner;
      const S* dy = grad_out.data() + (b * C + c) * inner;
      S* dx = g.input.data() + (b * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        dx[i] = scale * dy[i];
        db += dy[i];
        dg += static_cast<double>(dy[i]) * (x[i] - running_mean[c]) * invstd;
      }
    }
    g.gamma[c] = static_cast<S>(dg);
    g.beta[c] = static_cast<S>(db);
  }
  return g;
}

// ---- dropout ----------------------------------------------------------------

/// Inverted-dropout keep mask: entries are 0 or 1/(1-rate). With
/// `sequence_constant` the last (time) axis is dropped from the mask shape
/// and the caller broadcasts it across frames.
template <class S>
Tensor<S> dropout_mask(const Shape& shape, double rate, std::uint64_t seed,
                       bool sequence_constant) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  Shape mshape = shape;
  if (sequence_constant) {
    if (mshape.empty()) throw ShapeError("sequence-constant mask needs a time axis");
    mshape.pop_back();
  }
  Tensor<S> mask(mshape, S(1));
  if (rate == 0.0) return mask;
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  Rng rng(seed);
  std::bernoulli_distribution keep(1.0 - rate);
  for (auto& v : mask.values()) v = keep(rng) ? keep_scale : S(0);
  return mask;
}

template <class S>
Tensor<S> apply_mask(const Tensor<S>& in, const Tensor<S>& mask) {
  if (mask.size() != in.size()) throw ShapeError("dropout mask does not match input");
  Tensor<S> out = in;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return out;
}

// ---- gated recurrent unit -------------------------------------------------

/// Gate blocks are stacked in the order z (update), r (reset), h (candidate):
/// wx [3H, D], wh [3H, H], bias [3H].
template <class S>
struct GruParams {
  Tensor<S> wx, wh, bias;
  std::size_t units() const { return wh.dim(1); }
  std::size_t inputs() const { return wx.dim(1); }
};

template <class S>
struct GruCache {
  Tensor<S> input;            // [B, D, T]
  Tensor<S> z, r, c;          // [B, H, T]
  Tensor<S> hprev_masked;     // [B, H, T]  m * h_{t-1}
  Tensor<S> hprev;            // [B, H, T]  h_{t-1}
  Tensor<S> mask;             // [B, H] or empty
};

/// Runs the recursion, for each sequence in the batch from a zero (or given)
/// initial state:
///   hm  = m * h_{t-1}          (m: sequence-constant recurrent dropout mask)
///   z   = sigmoid(Wxz x + Whz hm + bz)
///   r   = sigmoid(Wxr x + Whr hm + br)
///   c   = tanh(Wxh x + Whh (r * hm) + bh)
///   h_t = z * h_{t-1} + (1 - z) * c
template <class S>
Tensor<S> gru_forward(const Tensor<S>& in, const GruParams<S>& p, const Tensor<S>& mask,
                      GruCache<S>* cache, const Tensor<S>* initial_state = nullptr) {
  require_rank(in, 3, "gru input");
  const std::size_t B = in.dim(0), D = in.dim(1), T = in.dim(2), H = p.units();
  if (p.inputs() != D)
    throw ShapeError("gru: expects " + std::to_string(p.inputs()) + " input features, got " +
                     std::to_string(D));
  if (!mask.empty()) require_shape(mask, {B, H}, "gru recurrent mask");
  if (initial_state) require_shape(*initial_state, {B, H}, "gru initial state");
  Tensor<S> out({B, H, T});
  if (cache) {
    cache->input = in;
    cache->z = Tensor<S>({B, H, T});
    cache->r = Tensor<S>({B, H, T});
    cache->c = Tensor<S>({B, H, T});
    cache->hprev_masked = Tensor<S>({B, H, T});
    cache->hprev = Tensor<S>({B, H, T});
    cache->mask = mask;
  }
  std::vector<S> proj(3 * H * T), h(H), hm(H), rh(H), az(H), ar(H), ah(H);
  for (std::size_t b = 0; b < B; ++b) {
    // Input projections for every frame at once: proj[g, t].
    for (std::size_t g = 0; g < 3 * H; ++g) {
      S* dst = proj.data() + g * T;
      std::fill(dst, dst + T, p.bias[g]);
      for (std::size_t d = 0; d < D; ++d) {
        const S w = p.wx.at(g, d);
        const S* src = &in.at(b, d, 0);
        for (std::size_t t = 0; t < T; ++t) dst[t] += w * src[t];
      }
    }
    for (std::size_t j = 0; j < H; ++j) h[j] = initial_state ? initial_state->at(b, j) : S(0);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < H; ++j) hm[j] = mask.empty() ? h[j] : h[j] * mask.at(b, j);
      for (std::size_t j = 0; j < H; ++j) {
        S sz = proj[j * T + t], sr = proj[(H + j) * T + t];
        const S* wz = &p.wh.at(j, 0);
        const S* wr = &p.wh.at(H + j, 0);
        for (std::size_t k = 0; k < H; ++k) {
          sz += wz[k] * hm[k];
          sr += wr[k] * hm[k];
        }
        az[j] = sigmoid(sz);
        ar[j] = sigmoid(sr);
      }
      for (std::size_t j = 0; j < H; ++j) rh[j] = ar[j] * hm[j];
      for (std::size_t j = 0; j < H; ++j) {
        S sh = proj[(2 * H + j) * T + t];
        const S* wh = &p.wh.at(2 * H + j, 0);
        for (std::size_t k = 0; k < H; ++k) sh += wh[k] * rh[k];
        ah[j] = std::tanh(sh);
      }
      for (std::size_t j = 0; j < H; ++j) {
        const S hn = az[j] * h[j] + (S(1) - az[j]) * ah[j];
        if (cache) {
          cache->z.at(b, j, t) = az[j];
          cache->r.at(b, j, t) = ar[j];
          cache->c.at(b, j, t) = ah[j];
          cache->hprev_masked.at(b, j, t) = hm[j];
          cache->hprev.at(b, j, t) = h[j];
        }
        h[j] = hn;
        out.at(b, j, t) = hn;
      }
    }
  }
  return out;
}

template <class S>
struct GruGrads {
  Tensor<S> input, wx, wh, bias;
};

/// Backpropagation through time over the whole cached sequence.
template <class S>
GruGrads<S> gru_backward(const GruCache<S>& cache, const GruParams<S>& p,
                         const Tensor<S>& grad_out) {
  const std::size_t B = cache.input.dim(0), D = cache.input.dim(1), T = cache.input.dim(2),
                    H = p.units();
  require_shape(grad_out, {B, H, T}, "gru grad");
  GruGrads<S> g{Tensor<S>(cache.input.shape()), Tensor<S>(p.wx.shape()),
                Tensor<S>(p.wh.shape()), Tensor<S>(p.bias.shape())};
  std::vector<S> da(3 * H * T);  // pre-activation grads [g, t]
  std::vector<S> dh(H), dhm(H), drh(H), rh(H);
  for (std::size_t b = 0; b < B; ++b) {
    std::fill(dh.begin(), dh.end(), S(0));
    for (std::size_t tt = T; tt-- > 0;) {
      for (std::size_t j = 0; j < H; ++j) dh[j] += grad_out.at(b, j, tt);
      for (std::size_t j = 0; j < H; ++j) {
        const S z = cache.z.at(b, j, tt), c = cache.c.at(b, j, tt);
        const S hp = cache.hprev.at(b, j, tt);
        da[j * T + tt] = dh[j] * (hp - c) * z * (S(1) - z);
        da[(2 * H + j) * T + tt] = dh[j] * (S(1) - z) * (S(1) - c * c);
      }
      for (std::size_t k = 0; k < H; ++k) {
        S s = 0;
        for (std::size_t j = 0; j < H; ++j) s += p.wh.at(2 * H + j, k) * da[(2 * H + j) * T + tt];
        drh[k] = s;
      }
      for (std::size_t j = 0; j < H; ++j) {
        const S r = cache.r.at(b, j, tt), hm = cache.hprev_masked.at(b, j, tt);
        da[(H + j) * T + tt] = drh[j] * hm * r * (S(1) - r);
        rh[j] = r * hm;
      }
      for (std::size_t k = 0; k < H; ++k) {
        S s = drh[k] * cache.r.at(b, k, tt);
        for (std::size_t j = 0; j < H; ++j)
          s += p.wh.at(j, k) * da[j * T + tt] + p.wh.at(H + j, k) * da[(H + j) * T + tt];
        dhm[k] = s;
      }
      // Recurrent weight grads for this step.
      for (std::size_t j = 0; j < H; ++j) {
        const S gz = da[j * T + tt], gr = da[(H + j) * T + tt], gh = da[(2 * H + j) * T + tt];
        S* wz = &g.wh.at(j, 0);
        S* wr = &g.wh.at(H + j, 0);
        S* wh = &g.wh.at(2 * H + j, 0);
        for (std::size_t k = 0; k < H; ++k) {
          const S hm = cache.hprev_masked.at(b, k, tt);
          wz[k] += gz * hm;
          wr[k] += gr * hm;
          wh[k] += gh * rh[k];
        }
      }
      for (std::size_t j = 0; j < H; ++j) {
        const S m = cache.mask.empty() ? S(1) : cache.mask.at(b, j);
        dh[j] = dh[j] * cache.z.at(b, j, tt) + m * dhm[j];
      }
    }
    // Input-side grads from the accumulated pre-activation grads.
    for (std::size_t gi = 0; gi < 3 * H; ++gi) {
      const S* dg = da.data() + gi * T;
      S bs = 0;
      for (std::size_t t = 0; t < T; ++t) bs += dg[t];
      g.bias[gi] += bs;
      for (std::size_t d = 0; d < D; ++d) {
        const S* x = &cache.input.at(b, d, 0);
        S* dx = &g.input.at(b, d, 0);
        const S w = p.wx.at(gi, d);
        S acc = 0;
        for (std::size_t t = 0; t < T; ++t) {
          acc += dg[t] * x[t];
          dx[t] += w * dg[t];
        }
        g.wx.at(gi, d) += acc;
      }
    }
  }
  return g;
}

// ---- temporal max pooling ---------------------------------------------------

/// [B, N, T] -> [B, N, 1]: per-feature maximum over time.
template <class S>
Tensor<S> temporal_max_pool_forward(const Tensor<S>& in,
                                    std::vector<std::uint32_t>* argmax = nullptr) {
  require_rank(in, 3, "temporal pooling input");
  const std::size_t B = in.dim(0), N = in.dim(1), T = in.dim(2);
  if (T == 0) throw ShapeError("temporal pooling needs at least one frame");
  Tensor<S> out({B, N, 1});
  if (argmax) argmax->assign(B * N, 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n) {
      const S* x = &in.at(b, n, 0);
      std::size_t best = 0;
      for (std::size_t t = 1; t < T; ++t)
        if (x[t] > x[best]) best = t;
      out.at(b, n, 0) = x[best];
      if (argmax) (*argmax)[b * N + n] = static_cast<std::uint32_t>(best);
    }
  return out;
}

template <class S>
Tensor<S> temporal_max_pool_backward(const Shape& in_shape,
                                     const std::vector<std::uint32_t>& argmax,
                                     const Tensor<S>& grad_out) {
  Tensor<S> g(in_shape);
  const std::size_t B = in_shape[0], N = in_shape[1];
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n) g.at(b, n, argmax[b * N + n]) += grad_out.at(b, n, 0);
  return g;
}

}  // namespace sedforge::nn
