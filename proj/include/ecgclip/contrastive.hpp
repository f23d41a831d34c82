#pragma once

// Cosine similarity and the symmetric (ECG->text, text->ECG) InfoNCE
// objective with a log-parameterized temperature. Everything here runs in
// double precision regardless of the encoder's precision.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace ecgclip {

inline constexpr double kInitialTau = 0.07;
inline constexpr double kMinTau = 1e-3;
inline constexpr double kMaxTau = 100.0;

/// tau = exp(log_tau), positive by construction.
struct Temperature {
  double log_tau = std::log(kInitialTau);

  static Temperature from_tau(double tau) { return {std::log(tau)}; }
  double tau() const { return std::exp(log_tau); }
  /// Clamps tau to [kMinTau, kMaxTau].
  void clamp();
};

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  Matrix transposed() const;
};

/// t.e / (|t| |e|). Throws NumericError on a zero-norm input or length mismatch.
double cosine_sim(std::span<const double> t, std::span<const double> e);

/// S(i, j) = cosine_sim(text row i, ecg row j).
Matrix similarity_matrix(const Matrix& text, const Matrix& ecg);

/// l_i = -log softmax_j(S(i, j) / tau)[i], with the row max subtracted first.
std::vector<double> loss_e2t(const Matrix& s, double tau);

/// Same over the other axis: softmax over S(j, i) for fixed i.
std::vector<double> loss_t2e(const Matrix& s, double tau);

/// Mean over i of (loss_e2t[i] + loss_t2e[i]) / 2.
double total_loss(const Matrix& s, double tau);

struct LossGradient {
  double loss = 0.0;
  Matrix d_similarity;   // dL/dS
  double d_log_tau = 0.0;  // dL/d(log tau)
};

/// Total loss and its gradient with respect to S and log tau.
LossGradient total_loss_gradient(const Matrix& s, double tau);

/// Back-propagates dL/dS through the row normalization of both embedding
/// matrices. Outputs are gradients w.r.t. the unnormalized rows.
void similarity_backward(const Matrix& text, const Matrix& ecg, const Matrix& s, const Matrix& d_s,
                         Matrix& d_text, Matrix& d_ecg);

}  // namespace ecgclip
