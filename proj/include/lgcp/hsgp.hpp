#ifndef LGCP_HSGP_HPP
#define LGCP_HSGP_HPP

#include <cmath>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "lgcp/common.hpp"
#include "lgcp/covariance.hpp"
#include "lgcp/parallel.hpp"

namespace lgcp {

struct ScaledCoords {
  Eigen::MatrixXd s;        // n x 2 in [-1,1]^2
  Eigen::Vector2d centre;   // original midpoints
  Eigen::Vector2d scale;    // (range/2) per dimension; length scales in scaled
                            // units multiply by these to recover original units
};

inline ScaledCoords scale_coords(const Eigen::MatrixXd& coords) {
  if (coords.rows() < 1) throw config_error("scale_coords needs at least one coordinate");
  ScaledCoords sc;
  sc.s.resize(coords.rows(), 2);
  for (int dim = 0; dim < 2; ++dim) {
    double lo = coords.col(dim).minCoeff();
    double hi = coords.col(dim).maxCoeff();
    if (!(hi > lo)) throw degenerate_extent_error("degenerate coordinate extent in dimension " +
                                                  std::to_string(dim + 1));
    sc.centre(dim) = 0.5 * (lo + hi);
    sc.scale(dim) = 0.5 * (hi - lo);
    sc.s.col(dim) = (coords.col(dim).array() - sc.centre(dim)) / sc.scale(dim);
  }
  return sc;
}

// Dirichlet Laplacian eigenpairs on [-L, L]: lambda_j = (j pi / 2L)^2 and
// phi_j(x) = L^{-1/2} sin(sqrt(lambda_j) (x + L)), j = 1,2,...
inline double hsgp_eigenvalue(int j, double L) {
  double r = j * M_PI / (2.0 * L);
  return r * r;
}

inline double hsgp_eigenfunction(int j, double L, double x) {
  return std::sin(std::sqrt(hsgp_eigenvalue(j, L)) * (x + L)) / std::sqrt(L);
}

// Spectral density of the stationary kernels in D dimensions; normalised so
// (2pi)^-D times its integral over R^D equals sigma_sq. These are the exact
// Fourier transforms of the implemented kernels: sigma_sq exp(-d^2/phi^2)
// transforms to sigma_sq pi^{D/2} phi^D exp(-phi^2 omega^2 / 4), and the
// exponential kernel is Matern nu = 1/2 with length scale phi.
inline double spectral_density(Kernel k, double omega, double sigma_sq, double phi, int D = 2) {
  if (k == Kernel::squared_exponential) {
    double c = std::pow(M_PI, 0.5 * D) * std::pow(phi, D);
    return sigma_sq * c * std::exp(-0.25 * phi * phi * omega * omega);
  }
  // Matern nu = 1/2
  double c = std::pow(2.0, D) * std::pow(M_PI, 0.5 * D) * std::tgamma(0.5 * (D + 1)) /
             std::tgamma(0.5);
  return sigma_sq * c / phi * std::pow(1.0 / (phi * phi) + omega * omega, -0.5 * (D + 1));
}

inline double spectral_density_dphi(Kernel k, double omega, double sigma_sq, double phi,
                                    int D = 2) {
  double s = spectral_density(k, omega, sigma_sq, phi, D);
  if (k == Kernel::squared_exponential) return s * (D / phi - 0.5 * phi * omega * omega);
  double a = 1.0 / (phi * phi) + omega * omega;
  return s * (-1.0 / phi + (D + 1) / (phi * phi * phi * a));
}

struct BasisSpec {
  int m = 15;     // basis functions per dimension
  double c = 2.0; // boundary factor; Hilbert domain is [-c, c] after scaling

  void validate() const {
    if (m < 1) throw config_error("basis size m must be >= 1");
    if (!(c > 1.0)) throw config_error("boundary factor c must be > 1");
  }
};

// Tensor-product eigenbasis on the boxed domain. Phi is theta-free and built
// once; only the spectral weights are recomputed during fitting.
struct HsgpBasis {
  Eigen::MatrixXd phi;                     // n x m^2
  Eigen::VectorXd omega;                   // combined frequency per column
  std::vector<std::pair<int, int>> index;  // column -> (j1, j2), 1-based
  double L = 2.0;
  int m = 15;

  int k() const { return static_cast<int>(phi.cols()); }

  Eigen::VectorXd lambda(Kernel kern, double sigma_sq, double phi_par) const {
    Eigen::VectorXd l(k());
    for (int i = 0; i < k(); ++i) l(i) = spectral_density(kern, omega(i), sigma_sq, phi_par, 2);
    return l;
  }

  // Phi Lambda^{1/2}
  Eigen::MatrixXd factor(Kernel kern, double sigma_sq, double phi_par) const {
    return phi * lambda(kern, sigma_sq, phi_par).array().sqrt().matrix().asDiagonal();
  }

  // d Lambda^{1/2} / d theta, elementwise: 0.5 S^{-1/2} dS/dtheta
  Eigen::VectorXd dhalf_dsigma(Kernel kern, double sigma_sq, double phi_par) const {
    Eigen::VectorXd l = lambda(kern, sigma_sq, phi_par);
    return 0.5 * (l.array() / sigma_sq) / l.array().sqrt();
  }
  Eigen::VectorXd dhalf_dphi(Kernel kern, double sigma_sq, double phi_par) const {
    Eigen::VectorXd out(k());
    for (int i = 0; i < k(); ++i) {
      double s = spectral_density(kern, omega(i), sigma_sq, phi_par, 2);
      out(i) = 0.5 * spectral_density_dphi(kern, omega(i), sigma_sq, phi_par, 2) / std::sqrt(s);
    }
    return out;
  }
};

// scaled_coords live in [-1,1]^2; the Hilbert domain is [-c,c]^2 with L = c.
inline HsgpBasis build_basis(const Eigen::MatrixXd& scaled_coords, const BasisSpec& spec) {
  spec.validate();
  const int n = static_cast<int>(scaled_coords.rows());
  const int m = spec.m;
  HsgpBasis b;
  b.L = spec.c;
  b.m = m;
  b.phi.resize(n, m * m);
  b.omega.resize(m * m);
  b.index.resize(m * m);
  // j1-major, j2-minor enumeration
  for (int j1 = 1; j1 <= m; ++j1)
    for (int j2 = 1; j2 <= m; ++j2) {
      int col = (j1 - 1) * m + (j2 - 1);
      b.index[col] = {j1, j2};
      b.omega(col) = std::sqrt(hsgp_eigenvalue(j1, b.L) + hsgp_eigenvalue(j2, b.L));
    }
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t ui) {
    int i = static_cast<int>(ui);
    Eigen::VectorXd f1(m), f2(m);
    for (int j = 1; j <= m; ++j) {
      f1(j - 1) = hsgp_eigenfunction(j, b.L, scaled_coords(i, 0));
      f2(j - 1) = hsgp_eigenfunction(j, b.L, scaled_coords(i, 1));
    }
    for (int j1 = 0; j1 < m; ++j1)
      for (int j2 = 0; j2 < m; ++j2) b.phi(i, j1 * m + j2) = f1(j1) * f2(j2);
  });
  return b;
}

// (R ⊗ F) beta with F = Phi Lambda^{1/2}; beta stacked time-major with m^2
// entries per period, result stacked time-major with n entries per period.
inline Eigen::VectorXd hsgp_linear_predictor(const Eigen::MatrixXd& F, const TemporalMatrix& P,
                                             const Eigen::VectorXd& beta) {
  const int k = static_cast<int>(F.cols());
  if (beta.size() != static_cast<Eigen::Index>(k) * P.T)
    throw dimension_error("beta has length " + std::to_string(beta.size()) + ", expected " +
                          std::to_string(k * P.T));
  auto B = Eigen::Map<const Eigen::MatrixXd>(beta.data(), k, P.T);
  Eigen::MatrixXd field = F * B * P.R.transpose();
  return Eigen::Map<const Eigen::VectorXd>(field.data(), field.size());
}

// Gradient of the conditional Poisson log-likelihood in (sigma_sq, phi),
// through the spectral weights: (Y - lambda)^T (R ⊗ Phi dLambda^{1/2}) beta.
inline Eigen::Vector2d hsgp_gradient(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda_hat,
                                     const HsgpBasis& basis, const TemporalMatrix& P,
                                     const Eigen::VectorXd& beta, const Eigen::VectorXd& dhalf_sigma,
                                     const Eigen::VectorXd& dhalf_phi) {
  const int k = basis.k();
  auto B = Eigen::Map<const Eigen::MatrixXd>(beta.data(), k, P.T);
  Eigen::VectorXd resid = y - lambda_hat;
  Eigen::Vector2d g;
  for (int which = 0; which < 2; ++which) {
    const Eigen::VectorXd& dh = which == 0 ? dhalf_sigma : dhalf_phi;
    Eigen::MatrixXd field = (basis.phi * dh.asDiagonal()) * B * P.R.transpose();
    g(which) = resid.dot(Eigen::Map<const Eigen::VectorXd>(field.data(), field.size()));
  }
  return g;
}

}  // namespace lgcp

#endif
