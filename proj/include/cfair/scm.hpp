#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfair/dataset.hpp"
#include "cfair/errors.hpp"
#include "cfair/random.hpp"
#include "cfair/types.hpp"

namespace cfair {

// Seed under which the default synthetic SCM coefficients are drawn; the
// resulting coefficients are frozen in assets/insurance_scm.json.
inline constexpr std::uint64_t kDefaultScmSeed = 20240917;

/// Ground-truth linear-Gaussian SCM for the synthetic benchmark.
///
///   A ~ N(0, sigma_a^2),  U ~ N(0, I),
///   X = W_A A + W_U U + b_X,
///   Y = w_Y . X + c_A A + c_U . U + b_Y.
///
/// X has no independent noise, so the posterior of U given (X, A) follows
/// from the linear system W_U u = x - W_A a - b_X.
struct LinearGaussianSCM {
  std::uint64_t seed = kDefaultScmSeed;
  Matrix w_a;  // d_x x 1
  Matrix w_u;  // d_x x d_u
  Vector b_x;
  Vector w_y;
  double c_a = 1.0;
  Vector c_u;
  double b_y = 0.0;
  double sigma_a = 1.0;

  Index d_x() const { return w_u.rows(); }
  Index d_u() const { return w_u.cols(); }

  // Coefficients of W_A, W_U, w_Y, c_U drawn from N(0, 1); b_X = 0, b_Y = 0,
  // c_A = 1, sigma_A = 1. Dimensions default to d_u = 5, d_x = 4.
  static LinearGaussianSCM seeded(std::uint64_t seed, Index d_x = 4, Index d_u = 5) {
    RngStream rng(seed, "scm-coefficients");
    LinearGaussianSCM s;
    s.seed = seed;
    s.w_a = sample_gaussian(rng, d_x, 1);
    s.w_u = sample_gaussian(rng, d_x, d_u);
    s.w_y = sample_gaussian(rng, d_x, 1).col(0);
    s.c_u = sample_gaussian(rng, d_u, 1).col(0);
    s.b_x = Vector::Zero(d_x);
    s.validate();
    return s;
  }

  void validate() const {
    if (w_u.rows() < 1 || w_u.cols() < 1) throw ModelError("SCM: empty W_U");
    if (w_a.rows() != d_x() || w_a.cols() != 1 || b_x.size() != d_x() || w_y.size() != d_x() ||
        c_u.size() != d_u())
      throw ModelError("SCM: coefficient shapes are inconsistent");
    if (!(sigma_a > 0.0)) throw ModelError("SCM: sigma_a must be positive");
  }

  nlohmann::json to_json() const {
    auto mat = [](const Matrix& m) {
      nlohmann::json rows = nlohmann::json::array();
      for (Index r = 0; r < m.rows(); ++r)
        rows.push_back(std::vector<double>(m.row(r).data(), m.row(r).data() + m.cols()));
      return rows;
    };
    auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    return {{"seed", seed},       {"W_A", mat(w_a)}, {"W_U", mat(w_u)},
            {"b_X", vec(b_x)},    {"w_Y", vec(w_y)}, {"c_A", c_a},
            {"c_U", vec(c_u)},    {"b_Y", b_y},      {"sigma_A", sigma_a}};
  }

  static LinearGaussianSCM from_json(const nlohmann::json& j) {
    auto mat = [](const nlohmann::json& rows) {
      const auto data = rows.get<std::vector<std::vector<double>>>();
      if (data.empty()) throw SchemaError("SCM asset: empty matrix");
      Matrix m(static_cast<Index>(data.size()), static_cast<Index>(data[0].size()));
      for (std::size_t r = 0; r < data.size(); ++r) {
        if (data[r].size() != data[0].size()) throw SchemaError("SCM asset: ragged matrix");
        for (std::size_t c = 0; c < data[r].size(); ++c)
          m(static_cast<Index>(r), static_cast<Index>(c)) = data[r][c];
      }
      return m;
    };
    auto vec = [](const nlohmann::json& v) {
      const auto data = v.get<std::vector<double>>();
      return Vector(Eigen::Map<const Vector>(data.data(), static_cast<Index>(data.size())));
    };
    try {
      LinearGaussianSCM s;
      s.seed = j.at("seed").get<std::uint64_t>();
      s.w_a = mat(j.at("W_A"));
      s.w_u = mat(j.at("W_U"));
      s.b_x = vec(j.at("b_X"));
      s.w_y = vec(j.at("w_Y"));
      s.c_a = j.at("c_A").get<double>();
      s.c_u = vec(j.at("c_U"));
      s.b_y = j.at("b_Y").get<double>();
      s.sigma_a = j.at("sigma_A").get<double>();
      s.validate();
      return s;
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(std::string("SCM asset: ") + e.what());
    }
  }
};

struct GaussianPosterior {
  Vector mean;
  Matrix covariance;
};

/// n i.i.d. rows (a, x, y) from the SCM, in raw (unnormalized) units.
inline Dataset sample_synthetic(const LinearGaussianSCM& scm, Index n, RngStream& rng) {
  if (n < 1) throw ArgumentError("sample_synthetic: n must be >= 1");
  scm.validate();
  const Index dx = scm.d_x();
  const Index du = scm.d_u();
  Dataset ds;
  ds.a.resize(n, 1);
  ds.x.resize(n, dx);
  ds.y.resize(n, 1);
  Vector u(du);
  for (Index i = 0; i < n; ++i) {
    const double a = scm.sigma_a * rng.normal();
    for (Index k = 0; k < du; ++k) u(k) = rng.normal();
    const Vector x = scm.w_a.col(0) * a + scm.w_u * u + scm.b_x;
    ds.a(i, 0) = a;
    ds.x.row(i) = x.transpose();
    ds.y(i, 0) = scm.w_y.dot(x) + scm.c_a * a + scm.c_u.dot(u) + scm.b_y;
  }
  ds.a_names = {"A"};
  for (Index k = 0; k < dx; ++k) ds.x_names.push_back("X" + std::to_string(k + 1));
  ds.y_names = {"Y"};
  ds.reset_stats();
  return ds;
}

namespace detail {

// (W_U W_U^T)^-1 via a symmetric eigendecomposition, rejecting near-singular systems.
inline Matrix inverse_gram(const LinearGaussianSCM& scm) {
  const Matrix gram = scm.w_u * scm.w_u.transpose();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
  const double max_ev = eig.eigenvalues().maxCoeff();
  const double min_ev = eig.eigenvalues().minCoeff();
  if (!(max_ev > 0.0) || min_ev <= 1e-12 * max_ev)
    throw ModelError("analytic_posterior: W_U W_U^T is numerically singular");
  return eig.eigenvectors() * eig.eigenvalues().cwiseInverse().asDiagonal() *
         eig.eigenvectors().transpose();
}

// Symmetric square root of a PSD matrix; tiny negative eigenvalues are clipped.
inline Matrix psd_sqrt(const Matrix& cov) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  const Vector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace detail

/// Posterior of U given X = x, A = a (raw units): conditioning N(0, I) on the
/// noiseless linear constraint W_U u = x - W_A a - b_X.
inline GaussianPosterior analytic_posterior(const LinearGaussianSCM& scm,
                                            std::span<const double> x, double a) {
  if (static_cast<Index>(x.size()) != scm.d_x())
    throw ArgumentError("analytic_posterior: evidence dimension mismatch");
  const Matrix proj = scm.w_u.transpose() * detail::inverse_gram(scm);  // d_u x d_x
  const Vector xv = Eigen::Map<const Vector>(x.data(), scm.d_x());
  const Vector resid = xv - scm.w_a.col(0) * a - scm.b_x;
  GaussianPosterior post;
  post.mean = proj * resid;
  Matrix cov = Matrix::Identity(scm.d_u(), scm.d_u()) - proj * scm.w_u;
  post.covariance = 0.5 * (cov + cov.transpose());
  return post;
}

/// q counterfactual draws of X under do(A = a_prime), given evidence (x, a): abduct
/// U from the posterior, then replay the X mechanism with a_prime. Raw units.
inline Matrix analytic_counterfactual(const LinearGaussianSCM& scm, std::span<const double> x,
                                      double a, double a_prime, Index q, RngStream& rng) {
  if (q < 1) throw ArgumentError("analytic_counterfactual: q must be >= 1");
  const GaussianPosterior post = analytic_posterior(scm, x, a);
  const Matrix root = detail::psd_sqrt(post.covariance);
  const Matrix z = sample_gaussian(rng, q, scm.d_u());
  Matrix out(q, scm.d_x());
  const Vector shift = scm.w_a.col(0) * a_prime + scm.b_x;
  for (Index r = 0; r < q; ++r) {
    const Vector u = post.mean + root * z.row(r).transpose();
    out.row(r) = (shift + scm.w_u * u).transpose();
  }
  return out;
}

}  // namespace cfair
