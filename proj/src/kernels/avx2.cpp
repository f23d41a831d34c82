// Compiled with -mavx2 -mfma. Only reached after a CPUID check, so nothing in
// this translation unit may be an inline/template entity shared with other
// TUs (the linker could otherwise pick the AVX2 copy for generic callers).

#include <immintrin.h>

#include "ecgclip/kernels.hpp"

namespace ecgclip::kernels::avx2 {

namespace {

struct F32 {
  using T = float;
  using R = __m256;
  static constexpr std::size_t W = 8;
  static R zero() { return _mm256_setzero_ps(); }
  static R load(const T* p) { return _mm256_loadu_ps(p); }
  static void store(T* p, R v) { _mm256_storeu_ps(p, v); }
  static R set1(T v) { return _mm256_set1_ps(v); }
  static R fma(R a, R b, R c) { return _mm256_fmadd_ps(a, b, c); }
  static T hsum(R v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 sh = _mm_movehdup_ps(lo);
    __m128 s = _mm_add_ps(lo, sh);
    sh = _mm_movehl_ps(sh, s);
    s = _mm_add_ss(s, sh);
    return _mm_cvtss_f32(s);
  }
};

struct F64 {
  using T = double;
  using R = __m256d;
  static constexpr std::size_t W = 4;
  static R zero() { return _mm256_setzero_pd(); }
  static R load(const T* p) { return _mm256_loadu_pd(p); }
  static void store(T* p, R v) { _mm256_storeu_pd(p, v); }
  static R set1(T v) { return _mm256_set1_pd(v); }
  static R fma(R a, R b, R c) { return _mm256_fmadd_pd(a, b, c); }
  static T hsum(R v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
  }
};

// out[co0 + c][t0 .. t0 + NV*W) for c < CO, accumulated in registers over all
// (ci, k).
template <class V, int CO, int NV>
inline void forward_tile(const ConvDims& d, const typename V::T* w, const typename V::T* in,
                         typename V::T* out, std::size_t co0, std::size_t t0) {
  using R = typename V::R;
  R acc[CO][NV];
  for (int c = 0; c < CO; ++c)
    for (int v = 0; v < NV; ++v) acc[c][v] = V::zero();
  const std::size_t row = d.in_channels * d.taps;
  for (std::size_t ci = 0; ci < d.in_channels; ++ci) {
    const typename V::T* x = in + ci * d.in_stride + t0;
    const typename V::T* wc = w + co0 * row + ci * d.taps;
    for (std::size_t k = 0; k < d.taps; ++k) {
      R xv[NV];
      for (int v = 0; v < NV; ++v) xv[v] = V::load(x + k + v * V::W);
      for (int c = 0; c < CO; ++c) {
        const R b = V::set1(wc[c * row + k]);
        for (int v = 0; v < NV; ++v) acc[c][v] = V::fma(b, xv[v], acc[c][v]);
      }
    }
  }
  for (int c = 0; c < CO; ++c)
    for (int v = 0; v < NV; ++v) V::store(out + (co0 + c) * d.out_stride + t0 + v * V::W, acc[c][v]);
}

template <class V>
inline void forward_scalar_point(const ConvDims& d, const typename V::T* w, const typename V::T* in,
                                 typename V::T* out, std::size_t co, std::size_t t) {
  typename V::T acc = 0;
  for (std::size_t ci = 0; ci < d.in_channels; ++ci) {
    const typename V::T* x = in + ci * d.in_stride + t;
    const typename V::T* wk = w + (co * d.in_channels + ci) * d.taps;
    for (std::size_t k = 0; k < d.taps; ++k) acc += wk[k] * x[k];
  }
  out[co * d.out_stride + t] = acc;
}

template <class V, int CO>
inline void forward_rows(const ConvDims& d, const typename V::T* w, const typename V::T* in,
                         typename V::T* out, std::size_t co0) {
  constexpr std::size_t W = V::W;
  std::size_t t = 0;
  for (; t + 2 * W <= d.out_length; t += 2 * W) forward_tile<V, CO, 2>(d, w, in, out, co0, t);
  for (; t + W <= d.out_length; t += W) forward_tile<V, CO, 1>(d, w, in, out, co0, t);
  for (; t < d.out_length; ++t)
    for (int c = 0; c < CO; ++c) forward_scalar_point<V>(d, w, in, out, co0 + c, t);
}

template <class V>
void forward_impl(const ConvDims& d, const typename V::T* w, const typename V::T* in, typename V::T* out) {
  std::size_t co = 0;
  for (; co + 4 <= d.out_channels; co += 4) forward_rows<V, 4>(d, w, in, out, co);
  for (; co < d.out_channels; ++co) forward_rows<V, 1>(d, w, in, out, co);
}

// grad_w[co0 + c][ci][k0 + j] += sum_t g[co0 + c][t] * x[ci][t + k0 + j], c < CO, j < KC.
template <class V, int CO, int KC>
inline void wgrad_tile(const ConvDims& d, const typename V::T* g, const typename V::T* x,
                       typename V::T* gw, std::size_t co0, std::size_t ci, std::size_t k0) {
  using T = typename V::T;
  using R = typename V::R;
  constexpr std::size_t W = V::W;
  R acc[CO][KC];
  for (int c = 0; c < CO; ++c)
    for (int j = 0; j < KC; ++j) acc[c][j] = V::zero();
  const T* xr = x + ci * d.in_stride + k0;
  const T* gr[CO];
  for (int c = 0; c < CO; ++c) gr[c] = g + (co0 + c) * d.out_stride;
  std::size_t t = 0;
  for (; t + W <= d.out_length; t += W) {
    R gv[CO];
    for (int c = 0; c < CO; ++c) gv[c] = V::load(gr[c] + t);
    for (int j = 0; j < KC; ++j) {
      const R xv = V::load(xr + t + j);
      for (int c = 0; c < CO; ++c) acc[c][j] = V::fma(gv[c], xv, acc[c][j]);
    }
  }
  for (int c = 0; c < CO; ++c) {
    T* dst = gw + ((co0 + c) * d.in_channels + ci) * d.taps + k0;
    for (int j = 0; j < KC; ++j) {
      T s = V::hsum(acc[c][j]);
      for (std::size_t u = t; u < d.out_length; ++u) s += gr[c][u] * xr[u + j];
      dst[j] += s;
    }
  }
}

template <class V, int CO>
inline void wgrad_rows(const ConvDims& d, const typename V::T* g, const typename V::T* x,
                       typename V::T* gw, std::size_t co0) {
  for (std::size_t ci = 0; ci < d.in_channels; ++ci) {
    std::size_t k = 0;
    for (; k + 4 <= d.taps; k += 4) wgrad_tile<V, CO, 4>(d, g, x, gw, co0, ci, k);
    switch (d.taps - k) {
      case 3: wgrad_tile<V, CO, 3>(d, g, x, gw, co0, ci, k); break;
      case 2: wgrad_tile<V, CO, 2>(d, g, x, gw, co0, ci, k); break;
      case 1: wgrad_tile<V, CO, 1>(d, g, x, gw, co0, ci, k); break;
      default: break;
    }
  }
}

template <class V>
void wgrad_impl(const ConvDims& d, const typename V::T* g, const typename V::T* x, typename V::T* gw) {
  std::size_t co = 0;
  for (; co + 2 <= d.out_channels; co += 2) wgrad_rows<V, 2>(d, g, x, gw, co);
  for (; co < d.out_channels; ++co) wgrad_rows<V, 1>(d, g, x, gw, co);
}

template <class V>
typename V::T dot_impl(const typename V::T* a, const typename V::T* b, std::size_t n) {
  constexpr std::size_t W = V::W;
  typename V::R s0 = V::zero(), s1 = V::zero();
  std::size_t i = 0;
  for (; i + 2 * W <= n; i += 2 * W) {
    s0 = V::fma(V::load(a + i), V::load(b + i), s0);
    s1 = V::fma(V::load(a + i + W), V::load(b + i + W), s1);
  }
  for (; i + W <= n; i += W) s0 = V::fma(V::load(a + i), V::load(b + i), s0);
  typename V::T s = V::hsum(s0) + V::hsum(s1);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <class V>
void axpy_impl(typename V::T a, const typename V::T* x, typename V::T* y, std::size_t n) {
  constexpr std::size_t W = V::W;
  const typename V::R av = V::set1(a);
  std::size_t i = 0;
  for (; i + W <= n; i += W) V::store(y + i, V::fma(av, V::load(x + i), V::load(y + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

template <class T> struct VecOf;
template <> struct VecOf<float> { using type = F32; };
template <> struct VecOf<double> { using type = F64; };

}  // namespace

template <class T>
void conv_forward(const ConvDims& d, const T* w, const T* in, T* out) {
  forward_impl<typename VecOf<T>::type>(d, w, in, out);
}

template <class T>
void conv_weight_grad(const ConvDims& d, const T* grad_out, const T* in, T* grad_w) {
  wgrad_impl<typename VecOf<T>::type>(d, grad_out, in, grad_w);
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  return dot_impl<typename VecOf<T>::type>(a, b, n);
}

template <class T>
void axpy(T a, const T* x, T* y, std::size_t n) {
  axpy_impl<typename VecOf<T>::type>(a, x, y, n);
}

template void conv_forward<float>(const ConvDims&, const float*, const float*, float*);
template void conv_forward<double>(const ConvDims&, const double*, const double*, double*);
template void conv_weight_grad<float>(const ConvDims&, const float*, const float*, float*);
template void conv_weight_grad<double>(const ConvDims&, const double*, const double*, double*);
template float dot<float>(const float*, const float*, std::size_t);
template double dot<double>(const double*, const double*, std::size_t);
template void axpy<float>(float, const float*, float*, std::size_t);
template void axpy<double>(double, const double*, double*, std::size_t);

}  // namespace ecgclip::kernels::avx2
