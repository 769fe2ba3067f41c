#ifndef LGCP_COVARIANCE_HPP
#define LGCP_COVARIANCE_HPP

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "lgcp/common.hpp"

namespace lgcp {

enum class Kernel { exponential, squared_exponential };

inline std::string kernel_name(Kernel k) {
  return k == Kernel::exponential ? "exponential" : "squared_exponential";
}

// Relative diagonal jitter added to every spatial covariance matrix; absorbed
// as a fixed nugget, never subtracted.
inline constexpr double kJitterRel = 1e-8;

struct CovParams {
  double sigma_sq = 1.0;
  double phi = 1.0;
  double rho = 0.0;
  Kernel kernel = Kernel::exponential;

  void validate() const {
    if (!(sigma_sq > 0.0)) throw config_error("sigma_sq must be positive");
    if (!(phi > 0.0)) throw config_error("phi must be positive");
    if (!(std::abs(rho) < 1.0)) throw config_error("|rho| must be < 1");
  }
};

inline double cov_value(Kernel k, double d, double sigma_sq, double phi) {
  if (k == Kernel::squared_exponential) return sigma_sq * std::exp(-(d * d) / (phi * phi));
  return sigma_sq * std::exp(-d / phi);
}

// d(cov)/d(phi), elementwise
inline double cov_deriv_phi(Kernel k, double d, double sigma_sq, double phi) {
  if (k == Kernel::squared_exponential)
    return cov_value(k, d, sigma_sq, phi) * 2.0 * d * d / (phi * phi * phi);
  return cov_value(k, d, sigma_sq, phi) * d / (phi * phi);
}

// Spatial covariance for one time period, jittered on the diagonal.
inline Eigen::MatrixXd build_sigma0(const Eigen::MatrixXd& coords, const CovParams& p) {
  p.validate();
  const int n = static_cast<int>(coords.rows());
  Eigen::MatrixXd s(n, n);
  for (int i = 0; i < n; ++i) {
    s(i, i) = p.sigma_sq * (1.0 + kJitterRel);
    for (int j = 0; j < i; ++j) {
      double d = (coords.row(i) - coords.row(j)).norm();
      if (d == 0.0)
        throw duplicate_site_error("duplicate coordinates at rows " + std::to_string(j + 1) +
                                   " and " + std::to_string(i + 1));
      double v = cov_value(p.kernel, d, p.sigma_sq, p.phi);
      s(i, j) = v;
      s(j, i) = v;
    }
  }
  return s;
}

// (dSigma0/dsigma_sq, dSigma0/dphi); the jitter scales with sigma_sq so
// dSigma0/dsigma_sq == Sigma0 / sigma_sq exactly.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> cov_derivatives(const Eigen::MatrixXd& coords,
                                                                   const CovParams& p) {
  const int n = static_cast<int>(coords.rows());
  Eigen::MatrixXd ds(n, n), dp(n, n);
  for (int i = 0; i < n; ++i) {
    ds(i, i) = 1.0 + kJitterRel;
    dp(i, i) = 0.0;
    for (int j = 0; j < i; ++j) {
      double d = (coords.row(i) - coords.row(j)).norm();
      double v = cov_value(p.kernel, d, p.sigma_sq, p.phi) / p.sigma_sq;
      double w = cov_deriv_phi(p.kernel, d, p.sigma_sq, p.phi);
      ds(i, j) = ds(j, i) = v;
      dp(i, j) = dp(j, i) = w;
    }
  }
  return {std::move(ds), std::move(dp)};
}

// AR(1) temporal correlation P_st = rho^|s-t| with cached Cholesky factor,
// closed-form tridiagonal inverse, and log-determinant (T-1) log(1-rho^2).
struct TemporalMatrix {
  int T = 1;
  double rho = 0.0;
  Eigen::MatrixXd P;
  Eigen::MatrixXd R;     // P = R R^T, lower triangular
  Eigen::MatrixXd Pinv;  // tridiagonal
  double log_det = 0.0;

  static TemporalMatrix build(double rho, int T) {
    if (T < 1) throw config_error("T must be >= 1");
    if (!(std::abs(rho) < 1.0)) throw config_error("|rho| must be < 1");
    TemporalMatrix tm;
    tm.T = T;
    tm.rho = rho;
    tm.P.resize(T, T);
    for (int s = 0; s < T; ++s)
      for (int t = 0; t < T; ++t) tm.P(s, t) = std::pow(rho, std::abs(s - t));
    tm.R = Eigen::LLT<Eigen::MatrixXd>(tm.P).matrixL();
    tm.Pinv = Eigen::MatrixXd::Zero(T, T);
    if (T == 1) {
      tm.Pinv(0, 0) = 1.0;
    } else {
      double c = 1.0 / (1.0 - rho * rho);
      for (int t = 0; t < T; ++t) {
        tm.Pinv(t, t) = (t == 0 || t == T - 1) ? c : c * (1.0 + rho * rho);
        if (t + 1 < T) {
          tm.Pinv(t, t + 1) = -c * rho;
          tm.Pinv(t + 1, t) = -c * rho;
        }
      }
    }
    tm.log_det = (T - 1) * std::log(1.0 - rho * rho);
    return tm;
  }

  // (dP/drho)_st = |s-t| rho^{|s-t|-1}
  Eigen::MatrixXd deriv() const {
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(T, T);
    for (int s = 0; s < T; ++s)
      for (int t = 0; t < T; ++t) {
        int k = std::abs(s - t);
        if (k > 0) d(s, t) = k * std::pow(rho, k - 1);
      }
    return d;
  }

  // dR/drho via Cholesky differentiation: dR = R Phi(R^-1 dP R^-T)
  Eigen::MatrixXd chol_deriv() const {
    Eigen::MatrixXd s = R.triangularView<Eigen::Lower>().solve(deriv());
    s = R.triangularView<Eigen::Lower>().solve(s.transpose()).transpose();
    Eigen::MatrixXd phi = s.triangularView<Eigen::StrictlyLower>();
    phi.diagonal() = 0.5 * s.diagonal();
    return R * phi;
  }
};

// Reshapes a time-major stacked vector (z_[1],...,z_[T]) to an n x T matrix.
inline Eigen::Map<const Eigen::MatrixXd> stack_columns(const Eigen::VectorXd& z, int n, int T) {
  if (z.size() != static_cast<Eigen::Index>(n) * T)
    throw dimension_error("stacked vector has length " + std::to_string(z.size()) +
                          ", expected " + std::to_string(n * T));
  return Eigen::Map<const Eigen::MatrixXd>(z.data(), n, T);
}

// z^T (P ⊗ Sigma0)^{-1} z computed as sum_t z_[t]^T Sigma0^{-1} vtilde_[t]
// with vtilde = v P^{-1}; linear in T. sigma0_solve maps an n x k matrix to
// Sigma0^{-1} times it.
template <typename Solve>
double kron_quadratic_form(const Eigen::VectorXd& z, Solve&& sigma0_solve,
                           const TemporalMatrix& P, int n) {
  auto v = stack_columns(z, n, P.T);
  Eigen::MatrixXd vtilde = v * P.Pinv;
  Eigen::MatrixXd siv = sigma0_solve(vtilde);
  double q = 0.0;
  for (int t = 0; t < P.T; ++t) q += v.col(t).dot(siv.col(t));
  return q;
}

inline double kron_log_det(double sigma0_log_det, const TemporalMatrix& P, int n, int T) {
  return n * P.log_det + T * sigma0_log_det;
}

// Dense-covariance engine for the full (unapproximated) model: multivariate
// normal log-likelihood of a stacked latent vector and its gradient in
// (sigma_sq, phi, rho). Used directly for approximation="none" and as the
// oracle target the sparse paths are tested against.
class DenseKron {
public:
  DenseKron(const Eigen::MatrixXd& coords, const CovParams& params, int T)
      : coords_(coords),
        params_(params),
        n_(static_cast<int>(coords.rows())),
        P_(TemporalMatrix::build(params.rho, T)),
        sigma0_(build_sigma0(coords, params)),
        llt_(sigma0_) {
    if (llt_.info() != Eigen::Success) throw factorisation_error("Sigma0 is not positive definite");
    Eigen::VectorXd d = llt_.matrixL().toDenseMatrix().diagonal();
    log_det_sigma0_ = 2.0 * d.array().log().sum();
  }

  int n() const { return n_; }
  int T() const { return P_.T; }
  const TemporalMatrix& temporal() const { return P_; }
  const Eigen::MatrixXd& sigma0() const { return sigma0_; }
  double sigma0_log_det() const { return log_det_sigma0_; }
  Eigen::MatrixXd chol() const { return llt_.matrixL(); }

  double log_det() const { return kron_log_det(log_det_sigma0_, P_, n_, P_.T); }

  double quadratic_form(const Eigen::VectorXd& z) const {
    return kron_quadratic_form(
        z, [this](const Eigen::MatrixXd& m) { return llt_.solve(m); }, P_, n_);
  }

  double loglik(const Eigen::VectorXd& z) const {
    const double ln2pi = 1.8378770664093454836;
    return -0.5 * (n_ * P_.T * ln2pi + log_det() + quadratic_form(z));
  }

  // gradient of loglik(z) in (sigma_sq, phi, rho)
  Eigen::Vector3d grad(const Eigen::VectorXd& z) const {
    auto [dss, dph] = cov_derivatives(coords_, params_);
    auto v = stack_columns(z, n_, P_.T);
    Eigen::MatrixXd vt = v * P_.Pinv;
    Eigen::MatrixXd si_v = llt_.solve(v);
    Eigen::MatrixXd si_vt = llt_.solve(vt);
    Eigen::MatrixXd dP = P_.deriv();
    Eigen::MatrixXd si_vtt = llt_.solve((vt * dP * P_.Pinv).eval());  // Sigma0^-1 v P^-1 dP P^-1

    Eigen::Vector3d g;
    g(0) = -0.5 * P_.T * llt_.solve(dss).trace();
    g(1) = -0.5 * P_.T * llt_.solve(dph).trace();
    g(2) = -0.5 * n_ * (P_.Pinv * dP).trace();
    for (int t = 0; t < P_.T; ++t) {
      g(0) += 0.5 * si_v.col(t).dot(dss * si_vt.col(t));
      g(1) += 0.5 * si_v.col(t).dot(dph * si_vt.col(t));
      g(2) += 0.5 * v.col(t).dot(si_vtt.col(t));
    }
    return g;
  }

private:
  Eigen::MatrixXd coords_;
  CovParams params_;
  int n_;
  TemporalMatrix P_;
  Eigen::MatrixXd sigma0_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  double log_det_sigma0_ = 0.0;
};

struct Semivariogram {
  Eigen::VectorXd bin_centre;
  Eigen::VectorXd gamma;    // NaN where a bin is empty
  Eigen::VectorXi n_pairs;
};

// Classical Matheron estimator over equal-width distance bins up to half the
// maximum pairwise distance.
inline Semivariogram empirical_semivariogram(const Eigen::MatrixXd& coords,
                                             const Eigen::VectorXd& values, int n_bins) {
  const int n = static_cast<int>(coords.rows());
  if (n < 2) throw config_error("semivariogram needs at least 2 sites");
  if (n_bins < 1) throw config_error("n_bins must be >= 1");
  double dmax = 0.0;
  double dmin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < i; ++j) {
      double d = (coords.row(i) - coords.row(j)).norm();
      dmax = std::max(dmax, d);
      dmin = std::min(dmin, d);
    }
  // bins run to half the maximum distance, widened so the nearest pair is
  // never excluded (matters only for tiny inputs)
  double hmax = std::max(0.5 * dmax, dmin);
  double width = hmax / n_bins;

  Semivariogram sv;
  sv.bin_centre.resize(n_bins);
  sv.gamma = Eigen::VectorXd::Zero(n_bins);
  sv.n_pairs = Eigen::VectorXi::Zero(n_bins);
  for (int b = 0; b < n_bins; ++b) sv.bin_centre(b) = (b + 0.5) * width;

  for (int i = 0; i < n; ++i)
    for (int j = 0; j < i; ++j) {
      double d = (coords.row(i) - coords.row(j)).norm();
      if (d > hmax) continue;
      int b = std::min(n_bins - 1, static_cast<int>(d / width));
      sv.gamma(b) += sq(values(i) - values(j));
      sv.n_pairs(b) += 1;
    }
  for (int b = 0; b < n_bins; ++b)
    sv.gamma(b) = sv.n_pairs(b) > 0 ? sv.gamma(b) / (2.0 * sv.n_pairs(b))
                                    : std::numeric_limits<double>::quiet_NaN();
  return sv;
}

}  // namespace lgcp

#endif
