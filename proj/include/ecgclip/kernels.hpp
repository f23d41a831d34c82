#pragma once

// Data-parallel inner loops of the encoder. Each kernel has a scalar
// reference implementation and an AVX2+FMA implementation; the active one is
// chosen once at startup from CPUID and can be overridden with the
// ECGCLIP_ISA environment variable ("scalar" or "avx2") or set_isa().
//
// All convolutions are stride-1 "valid" correlations over pre-padded rows.
// Strided convolutions are rewritten into this form by polyphase
// decomposition in the encoder.

#include <cstddef>
#include <string_view>

namespace ecgclip::kernels {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);
bool isa_available(Isa isa);
Isa active_isa();
/// Throws UsageError if the requested ISA is not supported by this CPU.
void set_isa(Isa isa);

/// Geometry of a stride-1 correlation.
///   out[co][t] = sum_{ci,k} w[co][ci][k] * in[ci][t + k],  0 <= t < out_length
/// Rows are separated by in_stride / out_stride elements; in rows must hold
/// at least out_length + taps - 1 elements.
struct ConvDims {
  std::size_t out_channels = 0;
  std::size_t in_channels = 0;
  std::size_t taps = 0;
  std::size_t out_length = 0;
  std::size_t in_stride = 0;
  std::size_t out_stride = 0;
};

/// Overwrites out with the correlation of in by w.
template <class T>
void conv_forward(const ConvDims& d, const T* w, const T* in, T* out);

/// Accumulates grad_w[co][ci][k] += sum_t grad_out[co][t] * in[ci][t + k].
template <class T>
void conv_weight_grad(const ConvDims& d, const T* grad_out, const T* in, T* grad_w);

template <class T>
T dot(const T* a, const T* b, std::size_t n);

/// y += a * x
template <class T>
void axpy(T a, const T* x, T* y, std::size_t n);

// Per-ISA entry points, exposed for equivalence tests and benchmarks.
namespace scalar {
template <class T> void conv_forward(const ConvDims& d, const T* w, const T* in, T* out);
template <class T> void conv_weight_grad(const ConvDims& d, const T* grad_out, const T* in, T* grad_w);
template <class T> T dot(const T* a, const T* b, std::size_t n);
template <class T> void axpy(T a, const T* x, T* y, std::size_t n);
}  // namespace scalar

namespace avx2 {
template <class T> void conv_forward(const ConvDims& d, const T* w, const T* in, T* out);
template <class T> void conv_weight_grad(const ConvDims& d, const T* grad_out, const T* in, T* grad_w);
template <class T> T dot(const T* a, const T* b, std::size_t n);
template <class T> void axpy(T a, const T* x, T* y, std::size_t n);
}  // namespace avx2

}  // namespace ecgclip::kernels
