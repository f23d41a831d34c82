#include <atomic>
#include <cstdlib>
#include <string>

#include "ecgclip/errors.hpp"
#include "ecgclip/kernels.hpp"

namespace ecgclip::kernels {

namespace {

Isa detect() {
  if (const char* env = std::getenv("ECGCLIP_ISA")) {
    const std::string v(env);
    if (v == "scalar") return Isa::scalar;
    if (v == "avx2" && isa_available(Isa::avx2)) return Isa::avx2;
  }
  return isa_available(Isa::avx2) ? Isa::avx2 : Isa::scalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

}  // namespace

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

bool isa_available(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(ECGCLIP_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void set_isa(Isa isa) {
  if (!isa_available(isa)) throw UsageError(std::string("ISA not available: ") + std::string(isa_name(isa)));
  current().store(isa, std::memory_order_relaxed);
}

#if defined(ECGCLIP_HAVE_AVX2)
#define ECGCLIP_DISPATCH(fn, ...) \
  (active_isa() == Isa::avx2 ? avx2::fn(__VA_ARGS__) : scalar::fn(__VA_ARGS__))
#else
#define ECGCLIP_DISPATCH(fn, ...) scalar::fn(__VA_ARGS__)
#endif

template <class T>
void conv_forward(const ConvDims& d, const T* w, const T* in, T* out) {
  ECGCLIP_DISPATCH(conv_forward<T>, d, w, in, out);
}

template <class T>
void conv_weight_grad(const ConvDims& d, const T* grad_out, const T* in, T* grad_w) {
  ECGCLIP_DISPATCH(conv_weight_grad<T>, d, grad_out, in, grad_w);
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  return ECGCLIP_DISPATCH(dot<T>, a, b, n);
}

template <class T>
void axpy(T a, const T* x, T* y, std::size_t n) {
  ECGCLIP_DISPATCH(axpy<T>, a, x, y, n);
}

#undef ECGCLIP_DISPATCH

template void conv_forward<float>(const ConvDims&, const float*, const float*, float*);
template void conv_forward<double>(const ConvDims&, const double*, const double*, double*);
template void conv_weight_grad<float>(const ConvDims&, const float*, const float*, float*);
template void conv_weight_grad<double>(const ConvDims&, const double*, const double*, double*);
template float dot<float>(const float*, const float*, std::size_t);
template double dot<double>(const double*, const double*, std::size_t);
template void axpy<float>(float, const float*, float*, std::size_t);
template void axpy<double>(double, const double*, double*, std::size_t);

}  // namespace ecgclip::kernels
