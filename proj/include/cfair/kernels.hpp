#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cfair/errors.hpp"
#include "cfair/types.hpp"

namespace cfair {

// Negative MMD^2 estimates above this value are cancellation noise and are
// clamped to zero; anything lower is reported as a numerical failure.
inline constexpr double kMmdNegativeFloor = -1e-9;

/// Inverse multiquadric kernel k(x, y) = (rho + |x - y|^2)^(-1/2).
///
/// The feature map is never materialized; every squared RKHS norm in the
/// losses is expanded into sums of kernel evaluations.
class Kernel {
 public:
  explicit Kernel(double rho) : rho_(rho) {
    if (!(rho > 0.0) || !std::isfinite(rho))
      throw ConfigError("IMQ kernel requires rho > 0, got " + std::to_string(rho));
  }

  double rho() const noexcept { return rho_; }

  // k(x, x) = rho^(-1/2), the maximum of the kernel.
  double self_similarity() const noexcept { return 1.0 / std::sqrt(rho_); }

  double from_sq_dist(double sq) const noexcept { return 1.0 / std::sqrt(rho_ + sq); }

  double operator()(const double* x, const double* y, Index d) const noexcept {
    double sq = 0.0;
    for (Index c = 0; c < d; ++c) {
      const double diff = x[c] - y[c];
      sq += diff * diff;
    }
    return from_sq_dist(sq);
  }

 private:
  double rho_;
};

inline double imq(std::span<const double> x, std::span<const double> y, double rho) {
  if (x.size() != y.size())
    throw ArgumentError("imq: dimension mismatch (" + std::to_string(x.size()) + " vs " +
                        std::to_string(y.size()) + ")");
  const Kernel k(rho);
  return k(x.data(), y.data(), static_cast<Index>(x.size()));
}

inline double clamp_mmd(double value) {
  if (!std::isfinite(value)) throw NumericalError("MMD^2 estimate is not finite");
  if (value < kMmdNegativeFloor)
    throw NumericalError("MMD^2 estimate " + std::to_string(value) +
                         " is below the cancellation floor; inputs are numerically unstable");
  return std::max(value, 0.0);
}

namespace detail {

// Pointer to row r of a row-major block with d columns.
inline const double* row_ptr(const double* base, Index r, Index d) { return base + r * d; }
inline double* row_ptr(double* base, Index r, Index d) { return base + r * d; }

// Sum over all ordered pairs (j, k) of k(s_j, s_k), diagonal included.
inline double self_sum(const double* s, Index q, Index d, const Kernel& k) {
  double off = 0.0;
  for (Index j = 0; j < q; ++j)
    for (Index l = j + 1; l < q; ++l) off += k(row_ptr(s, j, d), row_ptr(s, l, d), d);
  return static_cast<double>(q) * k.self_similarity() + 2.0 * off;
}

// Sum over all (i, j) of k(a_i, b_j), a-major order.
inline double cross_sum(const double* a, Index m, const double* b, Index n, Index d,
                        const Kernel& k) {
  double total = 0.0;
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) total += k(row_ptr(a, i, d), row_ptr(b, j, d), d);
  return total;
}

// grad += coef * d(self_sum)/ds. Uses dk/dx = -k^3 (x - y).
inline void self_sum_grad(const double* s, Index q, Index d, const Kernel& k, double coef,
                          double* grad) {
  for (Index j = 0; j < q; ++j) {
    const double* sj = row_ptr(s, j, d);
    for (Index l = j + 1; l < q; ++l) {
      const double* sl = row_ptr(s, l, d);
      const double kv = k(sj, sl, d);
      const double w = -2.0 * coef * kv * kv * kv;
      double* gj = row_ptr(grad, j, d);
      double* gl = row_ptr(grad, l, d);
      for (Index c = 0; c < d; ++c) {
        const double diff = sj[c] - sl[c];
        gj[c] += w * diff;
        gl[c] -= w * diff;
      }
    }
  }
}

// grad_a += coef * d(cross_sum)/da, grad_b likewise; either may be null.
inline void cross_sum_grad(const double* a, Index m, const double* b, Index n, Index d,
                           const Kernel& k, double coef, double* grad_a, double* grad_b) {
  for (Index i = 0; i < m; ++i) {
    const double* ai = row_ptr(a, i, d);
    for (Index j = 0; j < n; ++j) {
      const double* bj = row_ptr(b, j, d);
      const double kv = k(ai, bj, d);
      const double w = -coef * kv * kv * kv;
      for (Index c = 0; c < d; ++c) {
        const double diff = ai[c] - bj[c];
        if (grad_a) row_ptr(grad_a, i, d)[c] += w * diff;
        if (grad_b) row_ptr(grad_b, j, d)[c] -= w * diff;
      }
    }
  }
}

// Unclamped |mean Phi(s) - Phi(t)|^2 for q rows starting at s.
inline double mean_vs_point_raw(const double* s, Index q, const double* t, Index d,
                                const Kernel& k) {
  const double qd = static_cast<double>(q);
  return self_sum(s, q, d, k) / (qd * qd) - 2.0 * cross_sum(s, q, t, 1, d, k) / qd +
         k.self_similarity();
}

// Unclamped |mean Phi(a) - mean Phi(b)|^2.
inline double mean_vs_mean_raw(const double* a, Index m, const double* b, Index n, Index d,
                               const Kernel& k) {
  const double md = static_cast<double>(m);
  const double nd = static_cast<double>(n);
  const double within = self_sum(a, m, d, k) / (md * md) + self_sum(b, n, d, k) / (nd * nd);
  return within - 2.0 * cross_sum(a, m, b, n, d, k) / (md * nd);
}

// Total order on matrices used to make the two-sample estimator exactly
// symmetric: both argument orders are evaluated as the same canonical pair.
inline bool canonical_less(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) return a.rows() < b.rows();
  if (a.cols() != b.cols()) return a.cols() < b.cols();
  return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(),
                                      b.data() + b.size());
}

}  // namespace detail

/// |(1/q) sum_j Phi(s_j) - Phi(target)|^2, clamped at zero.
inline double mmd2_mean_vs_point(const Matrix& samples, std::span<const double> target,
                                 const Kernel& kernel) {
  if (samples.rows() < 1) throw ArgumentError("mmd2_mean_vs_point: empty sample set");
  if (static_cast<Index>(target.size()) != samples.cols())
    throw ArgumentError("mmd2_mean_vs_point: target dimension does not match samples");
  return clamp_mmd(detail::mean_vs_point_raw(samples.data(), samples.rows(), target.data(),
                                             samples.cols(), kernel));
}

/// Squared distance between the empirical kernel mean embeddings of two sample sets.
inline double mmd2_mean_vs_mean(const Matrix& a, const Matrix& b, const Kernel& kernel) {
  if (a.rows() < 1 || b.rows() < 1) throw ArgumentError("mmd2_mean_vs_mean: empty sample set");
  if (a.cols() != b.cols()) throw ArgumentError("mmd2_mean_vs_mean: dimension mismatch");
  const bool swap = detail::canonical_less(b, a);
  const Matrix& first = swap ? b : a;
  const Matrix& second = swap ? a : b;
  return clamp_mmd(detail::mean_vs_mean_raw(first.data(), first.rows(), second.data(),
                                            second.rows(), a.cols(), kernel));
}

/// Median pairwise squared distance, used as the default IMQ offset.
///
/// At most 512 rows take part, picked at evenly spaced indices so the result
/// needs no randomness. Falls back to the mean nonzero distance when more than
/// half the pairs coincide, and to 1.0 when every row is identical.
inline double median_heuristic(const Matrix& samples) {
  const Index n = samples.rows();
  if (n < 2) throw ArgumentError("median_heuristic: need at least 2 rows");
  constexpr Index kMaxRows = 512;
  const Index used = std::min(n, kMaxRows);
  std::vector<Index> rows(static_cast<std::size_t>(used));
  for (Index i = 0; i < used; ++i) rows[static_cast<std::size_t>(i)] = (i * n) / used;

  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>(used * (used - 1) / 2));
  for (Index i = 0; i < used; ++i)
    for (Index j = i + 1; j < used; ++j)
      dists.push_back((samples.row(rows[static_cast<std::size_t>(i)]) -
                       samples.row(rows[static_cast<std::size_t>(j)]))
                          .squaredNorm());

  std::vector<double> sorted = dists;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  const double median = (m % 2 == 1) ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  if (median > 0.0) return median;

  double sum = 0.0;
  std::size_t count = 0;
  for (double v : sorted)
    if (v > 0.0) {
      sum += v;
      ++count;
    }
  return count == 0 ? 1.0 : sum / static_cast<double>(count);
}

}  // namespace cfair
