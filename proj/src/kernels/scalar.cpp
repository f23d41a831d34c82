#include "ecgclip/kernels.hpp"

namespace ecgclip::kernels::scalar {

template <class T>
void conv_forward(const ConvDims& d, const T* w, const T* in, T* out) {
  for (std::size_t co = 0; co < d.out_channels; ++co) {
    T* y = out + co * d.out_stride;
    for (std::size_t t = 0; t < d.out_length; ++t) y[t] = T(0);
    for (std::size_t ci = 0; ci < d.in_channels; ++ci) {
      const T* x = in + ci * d.in_stride;
      const T* wk = w + (co * d.in_channels + ci) * d.taps;
      for (std::size_t k = 0; k < d.taps; ++k) {
        const T a = wk[k];
        for (std::size_t t = 0; t < d.out_length; ++t) y[t] += a * x[t + k];
      }
    }
  }
}

template <class T>
void conv_weight_grad(const ConvDims& d, const T* grad_out, const T* in, T* grad_w) {
  for (std::size_t co = 0; co < d.out_channels; ++co) {
    const T* g = grad_out + co * d.out_stride;
    for (std::size_t ci = 0; ci < d.in_channels; ++ci) {
      const T* x = in + ci * d.in_stride;
      T* gw = grad_w + (co * d.in_channels + ci) * d.taps;
      for (std::size_t k = 0; k < d.taps; ++k) {
        T acc = T(0);
        for (std::size_t t = 0; t < d.out_length; ++t) acc += g[t] * x[t + k];
        gw[k] += acc;
      }
    }
  }
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
void axpy(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template void conv_forward<float>(const ConvDims&, const float*, const float*, float*);
template void conv_forward<double>(const ConvDims&, const double*, const double*, double*);
template void conv_weight_grad<float>(const ConvDims&, const float*, const float*, float*);
template void conv_weight_grad<double>(const ConvDims&, const double*, const double*, double*);
template float dot<float>(const float*, const float*, std::size_t);
template double dot<double>(const double*, const double*, std::size_t);
template void axpy<float>(float, const float*, float*, std::size_t);
template void axpy<double>(double, const double*, double*, std::size_t);

}  // namespace ecgclip::kernels::scalar
