#pragma once

// Dense 64-bit vector/matrix arithmetic, probability utilities and singular
// values. Everything here is a pure function over its inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace protokd {

/// Floor applied to every probability before renormalization.
inline constexpr double kProbEpsilon = 1e-12;
/// Added under the square root of every Euclidean distance so that the
/// direction (f - c) / ||f - c|| is 0 rather than NaN at coincidence.
inline constexpr double kDistEpsilon = 1e-24;

/// Raised when a numerical routine receives NaN or infinity.
class NonFiniteError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

inline void require_finite(std::span<const double> xs, const char* what) {
  for (double x : xs)
    if (!std::isfinite(x)) throw NonFiniteError(std::string(what) + ": non-finite entry");
}

}  // namespace detail

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
  explicit Vector(std::vector<double> data) : data_(std::move(data)) {}
  Vector(std::initializer_list<double> xs) : data_(xs) {}

  [[nodiscard]] std::size_t dim() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  [[nodiscard]] std::span<double> span() noexcept { return data_; }
  [[nodiscard]] std::span<const double> span() const noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& values() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

/// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    detail::require(data_.size() == rows_ * cols_, "Matrix: data size != rows * cols");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  [[nodiscard]] std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  [[nodiscard]] Vector row_vector(std::size_t r) const {
    auto s = row(r);
    return Vector(std::vector<double>(s.begin(), s.end()));
  }

  [[nodiscard]] std::span<double> span() noexcept { return data_; }
  [[nodiscard]] std::span<const double> span() const noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& values() const noexcept { return data_; }

  [[nodiscard]] Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// A probability vector whose entries have been floored at kProbEpsilon and
/// renormalized. Construction from raw values always applies the smoothing.
class ProbVector {
 public:
  ProbVector() = default;
  explicit ProbVector(std::vector<double> raw) : probs_(std::move(raw)) {
    detail::require(!probs_.empty(), "ProbVector: empty");
    detail::require_finite(probs_, "ProbVector");
    double sum = 0.0;
    for (double& p : probs_) {
      detail::require(p >= 0.0, "ProbVector: negative entry");
      p = std::max(p, kProbEpsilon);
      sum += p;
    }
    for (double& p : probs_) p /= sum;
  }

  [[nodiscard]] std::size_t n() const noexcept { return probs_.size(); }
  double operator[](std::size_t i) const noexcept { return probs_[i]; }
  [[nodiscard]] std::span<const double> span() const noexcept { return probs_; }
  [[nodiscard]] const std::vector<double>& values() const noexcept { return probs_; }

  friend bool operator==(const ProbVector&, const ProbVector&) = default;

 private:
  std::vector<double> probs_;
};

// ---------------------------------------------------------------------------
// Vector kernels

inline double dot(std::span<const double> a, std::span<const double> b) {
  detail::require(a.size() == b.size(), "dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  detail::require(x.size() == y.size(), "axpy: dimension mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  detail::require(a.size() == b.size(), "squared_distance: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

/// sqrt(sum (a_i - b_i)^2 + kDistEpsilon).
inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  detail::require(a.size() == b.size(), "euclidean_distance: dimension mismatch");
  return std::sqrt(squared_distance(a, b) + kDistEpsilon);
}
inline double euclidean_distance(const Vector& a, const Vector& b) {
  return euclidean_distance(a.span(), b.span());
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = std::sqrt(squared_norm(a));
  const double nb = std::sqrt(squared_norm(b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

// ---------------------------------------------------------------------------
// Matrix products used by the dense layers.

inline Matrix matmul(const Matrix& a, const Matrix& b);

/// A * B^T, shapes (n x k) * (m x k)^T -> (n x m).
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  detail::require(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
  return matmul(a, b.transposed());
}

/// A^T * B, shapes (k x n)^T * (k x m) -> (n x m).
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  detail::require(a.rows() == b.rows(), "matmul_tn: inner dimension mismatch");
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto ak = a.row(k);
    auto bk = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double s = ak[i];
      if (s == 0.0) continue;
      auto oi = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) oi[j] += s * bk[j];
    }
  }
  return out;
}

/// A * B, shapes (n x k) * (k x m) -> (n x m).
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto oi = out.row(i);
    auto ai = a.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double s = ai[k];
      if (s == 0.0) continue;
      auto bk = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) oi[j] += s * bk[j];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Probabilities

/// Max-shifted softmax, then floored and renormalized.
inline ProbVector softmax(std::span<const double> logits) {
  detail::require(!logits.empty(), "softmax: empty input");
  detail::require_finite(logits, "softmax");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> e(logits.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    e[k] = std::exp(logits[k] - mx);
    sum += e[k];
  }
  for (double& v : e) v /= sum;
  return ProbVector(std::move(e));
}

/// p_k = exp(-d_k / tau) / sum_k' exp(-d_k' / tau)
inline ProbVector softmax_neg_dist(std::span<const double> distances, double tau = 1.0) {
  detail::require(!distances.empty(), "softmax_neg_dist: empty input");
  detail::require(tau > 0.0, "softmax_neg_dist: tau must be positive");
  detail::require_finite(distances, "softmax_neg_dist");
  std::vector<double> logits(distances.size());
  for (std::size_t k = 0; k < distances.size(); ++k) logits[k] = -distances[k] / tau;
  return softmax(logits);
}

/// KL(p || q) = sum p_k ln(p_k / q_k).
inline double kl_divergence(const ProbVector& p, const ProbVector& q) {
  detail::require(p.n() == q.n(), "kl_divergence: length mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < p.n(); ++k) s += p[k] * std::log(p[k] / q[k]);
  // Rounding can leave -1e-17 for p == q.
  return std::max(s, 0.0);
}

/// KL(p || q) + KL(q || p).
inline double symmetric_kl(const ProbVector& p, const ProbVector& q) {
  detail::require(p.n() == q.n(), "symmetric_kl: length mismatch");
  // Written as sum (p - q)(ln p - ln q) so that swapping the arguments
  // produces the same products term by term.
  double s = 0.0;
  for (std::size_t k = 0; k < p.n(); ++k) s += (p[k] - q[k]) * (std::log(p[k]) - std::log(q[k]));
  return std::max(s, 0.0);
}

// ---------------------------------------------------------------------------
// Singular values by one-sided (Hestenes) Jacobi on the thinner side.

inline std::vector<double> singular_values(const Matrix& m) {
  detail::require(m.rows() >= 1 && m.cols() >= 1, "singular_values: empty matrix");
  detail::require_finite(m.span(), "singular_values");

  // Columns of the tall orientation, stored contiguously.
  const bool tall = m.rows() >= m.cols();
  const std::size_t n = tall ? m.cols() : m.rows();
  const std::size_t len = tall ? m.rows() : m.cols();
  std::vector<std::vector<double>> cols(n, std::vector<double>(len));
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (tall)
        cols[c][r] = m(r, c);
      else
        cols[r][c] = m(r, c);
    }

  constexpr double tol = 1e-15;
  constexpr int max_sweeps = 100;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto& a = cols[p];
        auto& b = cols[q];
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          alpha += a[i] * a[i];
          beta += b[i] * b[i];
          gamma += a[i] * b[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < len; ++i) {
          const double ai = a[i];
          const double bi = b[i];
          a[i] = c * ai - s * bi;
          b[i] = s * ai + c * bi;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) sv[j] = std::sqrt(squared_norm(cols[j]));
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

}  // namespace protokd
