#include "ecgclip/contrastive.hpp"

#include <algorithm>
#include <string>

#include "ecgclip/errors.hpp"

namespace ecgclip {

namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

void check_finite(const Matrix& s) {
  for (double v : s.data) {
    if (!std::isfinite(v)) throw NumericError("similarity matrix contains a non-finite entry");
  }
}

void check_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw NumericError("temperature must be positive and finite");
}

// Row-wise log-softmax of s / tau evaluated at the diagonal entry.
std::vector<double> diagonal_nll(const Matrix& s, double tau) {
  check_tau(tau);
  check_finite(s);
  std::vector<double> out(s.rows);
  for (std::size_t i = 0; i < s.rows; ++i) {
    auto r = s.row(i);
    const double m = *std::max_element(r.begin(), r.end()) / tau;
    double z = 0.0;
    for (double v : r) z += std::exp(v / tau - m);
    out[i] = -(r[i] / tau - m - std::log(z));
  }
  return out;
}

// Row-wise softmax of s / tau.
Matrix softmax_rows(const Matrix& s, double tau) {
  Matrix p(s.rows, s.cols);
  for (std::size_t i = 0; i < s.rows; ++i) {
    auto r = s.row(i);
    const double m = *std::max_element(r.begin(), r.end()) / tau;
    double z = 0.0;
    for (std::size_t j = 0; j < s.cols; ++j) z += (p(i, j) = std::exp(r[j] / tau - m));
    for (std::size_t j = 0; j < s.cols; ++j) p(i, j) /= z;
  }
  return p;
}

}  // namespace

void Temperature::clamp() { log_tau = std::clamp(log_tau, std::log(kMinTau), std::log(kMaxTau)); }

Matrix Matrix::transposed() const {
  Matrix t(cols, rows);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
  return t;
}

double cosine_sim(std::span<const double> t, std::span<const double> e) {
  if (t.size() != e.size()) {
    throw NumericError("cosine similarity of vectors with lengths " + std::to_string(t.size()) +
                       " and " + std::to_string(e.size()));
  }
  const double nt = norm(t);
  const double ne = norm(e);
  if (nt == 0.0 || ne == 0.0) throw NumericError("cosine similarity of a zero-norm vector");
  double d = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) d += t[k] * e[k];
  return d / (nt * ne);
}

Matrix similarity_matrix(const Matrix& text, const Matrix& ecg) {
  if (text.cols != ecg.cols) throw NumericError("text and ECG embeddings differ in dimension");
  if (text.rows == 0 || ecg.rows == 0) throw NumericError("similarity matrix needs at least one row");
  Matrix s(text.rows, ecg.rows);
  for (std::size_t i = 0; i < text.rows; ++i)
    for (std::size_t j = 0; j < ecg.rows; ++j) s(i, j) = cosine_sim(text.row(i), ecg.row(j));
  return s;
}

std::vector<double> loss_e2t(const Matrix& s, double tau) { return diagonal_nll(s, tau); }

std::vector<double> loss_t2e(const Matrix& s, double tau) { return diagonal_nll(s.transposed(), tau); }

double total_loss(const Matrix& s, double tau) {
  const auto a = loss_e2t(s, tau);
  const auto b = loss_t2e(s, tau);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] + b[i]) / 2.0;
  return sum / static_cast<double>(a.size());
}

LossGradient total_loss_gradient(const Matrix& s, double tau) {
  LossGradient g;
  g.loss = total_loss(s, tau);
  const std::size_t n = s.rows;
  const Matrix p = softmax_rows(s, tau);                     // over j for row i
  const Matrix q = softmax_rows(s.transposed(), tau);        // q(i, j): over S(j, i)
  g.d_similarity = Matrix(n, n);
  const double scale = 1.0 / (2.0 * static_cast<double>(n) * tau);
  double dtau = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double delta = i == j ? 2.0 : 0.0;
      const double d = scale * (p(i, j) + q(j, i) - delta);
      g.d_similarity(i, j) = d;
      dtau += d * s(i, j);
    }
  }
  // Every logit is S / tau, so dL/dlog_tau = -sum dL/dS * S.
  g.d_log_tau = -dtau;
  return g;
}

void similarity_backward(const Matrix& text, const Matrix& ecg, const Matrix& s, const Matrix& d_s,
                         Matrix& d_text, Matrix& d_ecg) {
  const std::size_t n = text.rows;
  const std::size_t m = ecg.rows;
  const std::size_t dim = text.cols;
  std::vector<double> nt(n), ne(m);
  for (std::size_t i = 0; i < n; ++i) nt[i] = norm(text.row(i));
  for (std::size_t j = 0; j < m; ++j) ne[j] = norm(ecg.row(j));
  d_text = Matrix(n, dim);
  d_ecg = Matrix(m, dim);
  // dS_ij/dt_i = e_j/(|t_i||e_j|) - S_ij t_i/|t_i|^2, symmetric for e_j.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double g = d_s(i, j);
      if (g == 0.0) continue;
      const double a = g / (nt[i] * ne[j]);
      const double bt = g * s(i, j) / (nt[i] * nt[i]);
      const double be = g * s(i, j) / (ne[j] * ne[j]);
      auto t = text.row(i);
      auto e = ecg.row(j);
      auto dt = d_text.row(i);
      auto de = d_ecg.row(j);
      for (std::size_t k = 0; k < dim; ++k) {
        dt[k] += a * e[k] - bt * t[k];
        de[k] += a * t[k] - be * e[k];
      }
    }
  }
}

}  // namespace ecgclip
