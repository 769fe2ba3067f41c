#ifndef LGCP_NNGP_HPP
#define LGCP_NNGP_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "lgcp/common.hpp"
#include "lgcp/covariance.hpp"
#include "lgcp/parallel.hpp"

namespace lgcp {

// Prior-ordered nearest neighbour conditioning sets: sets[j] holds the
// min(j, m) nearest indices < j, ascending.
struct NeighbourSets {
  std::vector<std::vector<int>> sets;
  int m = 0;
};

inline NeighbourSets build_neighbour_sets(const Eigen::MatrixXd& coords, int m) {
  if (m < 1) throw config_error("m must be >= 1");
  const int n = static_cast<int>(coords.rows());
  NeighbourSets ns;
  ns.m = m;
  ns.sets.resize(n);
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t uj) {
    int j = static_cast<int>(uj);
    int p = std::min(j, m);
    if (p == 0) return;
    // distances to all prior points; ties break to the lower index because
    // stable partial ordering keeps the original order of equal keys
    std::vector<std::pair<double, int>> d(j);
    for (int i = 0; i < j; ++i) d[i] = {(coords.row(i) - coords.row(j)).norm(), i};
    std::stable_sort(d.begin(), d.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<int>& s = ns.sets[j];
    s.resize(p);
    for (int k = 0; k < p; ++k) s[k] = d[k].second;
    std::sort(s.begin(), s.end());
  });
  return ns;
}

// Sparse Vecchia factors: A strictly lower triangular with rows supported on
// the neighbour sets, D positive diagonal; Sigma0 ≈ (I-A)^-1 D (I-A)^-T.
struct NngpFactor {
  std::vector<std::vector<int>> sets;
  std::vector<Eigen::VectorXd> a;  // row coefficients A_{j,N_j}
  Eigen::VectorXd D;
  std::vector<Eigen::LLT<Eigen::MatrixXd>> local_llt;  // chol of Sigma_{N_j,N_j}

  int n() const { return static_cast<int>(D.size()); }

  // y = (I - A) x for one period
  Eigen::VectorXd apply_ImA(const Eigen::VectorXd& x) const {
    Eigen::VectorXd y = x;
    for (int j = 1; j < n(); ++j) {
      const auto& s = sets[j];
      for (std::size_t k = 0; k < s.size(); ++k) y(j) -= a[j](k) * x(s[k]);
    }
    return y;
  }

  double spatial_log_det() const { return D.array().log().sum(); }
};

inline double cov_entry(const Eigen::MatrixXd& coords, const CovParams& p, int i, int j) {
  if (i == j) return p.sigma_sq * (1.0 + kJitterRel);
  return cov_value(p.kernel, (coords.row(i) - coords.row(j)).norm(), p.sigma_sq, p.phi);
}

inline NngpFactor compute_factor(const Eigen::MatrixXd& coords, const NeighbourSets& ns,
                                 const CovParams& params) {
  params.validate();
  const int n = static_cast<int>(coords.rows());
  NngpFactor f;
  f.sets = ns.sets;
  f.a.resize(n);
  f.D.resize(n);
  f.local_llt.resize(n);
  std::vector<int> bad(n, 0);
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t uj) {
    int j = static_cast<int>(uj);
    const auto& s = f.sets[j];
    int p = static_cast<int>(s.size());
    if (p == 0) {
      f.D(j) = params.sigma_sq * (1.0 + kJitterRel);
      return;
    }
    Eigen::MatrixXd snn(p, p);
    Eigen::VectorXd snj(p);
    for (int r = 0; r < p; ++r) {
      if ((coords.row(s[r]) - coords.row(j)).norm() == 0.0) {
        bad[j] = 1;
        return;
      }
      snj(r) = cov_entry(coords, params, s[r], j);
      for (int c = 0; c <= r; ++c) {
        if (c < r && (coords.row(s[r]) - coords.row(s[c])).norm() == 0.0) {
          bad[j] = 1;
          return;
        }
        snn(r, c) = cov_entry(coords, params, s[r], s[c]);
        snn(c, r) = snn(r, c);
      }
    }
    f.local_llt[j].compute(snn);
    if (f.local_llt[j].info() != Eigen::Success) {
      bad[j] = 1;
      return;
    }
    f.a[j] = f.local_llt[j].solve(snj);
    f.D(j) = cov_entry(coords, params, j, j) - f.a[j].dot(snj);
    if (!(f.D(j) > 0.0)) bad[j] = 1;
  });
  for (int j = 0; j < n; ++j)
    if (bad[j])
      throw factorisation_error("NNGP local system singular at row " + std::to_string(j + 1));
  return f;
}

// log N(z; 0, P ⊗ (I-A)^-1 D (I-A)^-T) with z stacked time-major.
inline double nngp_quadratic_form(const Eigen::VectorXd& z, const NngpFactor& f,
                                  const TemporalMatrix& P) {
  const int n = f.n();
  auto v = stack_columns(z, n, P.T);
  Eigen::MatrixXd vtilde = v * P.Pinv;
  double q = 0.0;
  for (int t = 0; t < P.T; ++t) {
    Eigen::VectorXd u = f.apply_ImA(v.col(t));
    Eigen::VectorXd w = f.apply_ImA(vtilde.col(t));
    q += (u.array() * w.array() / f.D.array()).sum();
  }
  return q;
}

inline double nngp_log_det(const NngpFactor& f, const TemporalMatrix& P, int n, int T) {
  return n * P.log_det + T * f.spatial_log_det();
}

inline double nngp_loglik(const Eigen::VectorXd& z, const NngpFactor& f,
                          const TemporalMatrix& P) {
  const double ln2pi = 1.8378770664093454836;
  const int n = f.n();
  return -0.5 * (n * P.T * ln2pi + nngp_log_det(f, P, n, P.T) + nngp_quadratic_form(z, f, P));
}

// Ltilde = (I-A)^-1 D^{1/2} by columnwise forward substitution over neighbour
// entries only; columns are independent so the outer loop parallelises.
inline Eigen::MatrixXd approx_cholesky(const NngpFactor& f) {
  const int n = f.n();
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd sqrtD = f.D.array().sqrt();
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t uk) {
    int k = static_cast<int>(uk);
    L(k, k) = sqrtD(k);
    for (int i = k + 1; i < n; ++i) {
      const auto& s = f.sets[i];
      double acc = 0.0;
      for (std::size_t r = 0; r < s.size(); ++r)
        if (s[r] >= k) acc += f.a[i](r) * L(s[r], k);
      L(i, k) = acc;
    }
  });
  return L;
}

// Row derivatives of A and D for theta = (sigma_sq, phi), from the
// differentiated linear systems, reusing the per-row Cholesky factors.
struct NngpDerivs {
  std::vector<Eigen::VectorXd> da_sigma, da_phi;
  Eigen::VectorXd dD_sigma, dD_phi;
};

inline NngpDerivs factor_derivatives(const Eigen::MatrixXd& coords, const CovParams& params,
                                     const NngpFactor& f) {
  const int n = f.n();
  NngpDerivs d;
  d.da_sigma.resize(n);
  d.da_phi.resize(n);
  d.dD_sigma.resize(n);
  d.dD_phi.resize(n);
  auto dcov = [&](int i, int j, bool wrt_phi) {
    if (i == j) return wrt_phi ? 0.0 : 1.0 + kJitterRel;
    double dist = (coords.row(i) - coords.row(j)).norm();
    return wrt_phi ? cov_deriv_phi(params.kernel, dist, params.sigma_sq, params.phi)
                   : cov_value(params.kernel, dist, params.sigma_sq, params.phi) / params.sigma_sq;
  };
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t uj) {
    int j = static_cast<int>(uj);
    const auto& s = f.sets[j];
    int p = static_cast<int>(s.size());
    if (p == 0) {
      d.dD_sigma(j) = 1.0 + kJitterRel;
      d.dD_phi(j) = 0.0;
      return;
    }
    Eigen::VectorXd snj(p);
    for (int r = 0; r < p; ++r) snj(r) = cov_entry(coords, params, s[r], j);
    for (int which = 0; which < 2; ++which) {
      bool wrt_phi = which == 1;
      Eigen::MatrixXd dsnn(p, p);
      Eigen::VectorXd dsnj(p);
      for (int r = 0; r < p; ++r) {
        dsnj(r) = dcov(s[r], j, wrt_phi);
        for (int c = 0; c <= r; ++c) {
          dsnn(r, c) = dcov(s[r], s[c], wrt_phi);
          dsnn(c, r) = dsnn(r, c);
        }
      }
      Eigen::VectorXd da = f.local_llt[j].solve(dsnj - dsnn * f.a[j]);
      double dD = dcov(j, j, wrt_phi) - da.dot(snj) - f.a[j].dot(dsnj);
      if (wrt_phi) {
        d.da_phi[j] = da;
        d.dD_phi(j) = dD;
      } else {
        d.da_sigma[j] = da;
        d.dD_sigma(j) = dD;
      }
    }
  });
  return d;
}

namespace detail {
// y = (dA) x with dA's rows supported on the neighbour sets
inline Eigen::VectorXd apply_dA(const NngpFactor& f, const std::vector<Eigen::VectorXd>& da,
                                const Eigen::VectorXd& x) {
  Eigen::VectorXd y = Eigen::VectorXd::Zero(x.size());
  for (int j = 1; j < f.n(); ++j) {
    const auto& s = f.sets[j];
    for (std::size_t k = 0; k < s.size(); ++k) y(j) += da[j](k) * x(s[k]);
  }
  return y;
}
}  // namespace detail

// Gradient of the NNGP log-likelihood at one stacked latent vector, in
// (sigma_sq, phi, rho).
inline Eigen::Vector3d nngp_loglik_grad(const Eigen::VectorXd& z, const NngpFactor& f,
                                        const NngpDerivs& d, const TemporalMatrix& P) {
  const int n = f.n();
  auto v = stack_columns(z, n, P.T);
  Eigen::MatrixXd vtilde = v * P.Pinv;
  Eigen::MatrixXd dP = P.deriv();
  Eigen::MatrixXd vtt = vtilde * dP * P.Pinv;

  Eigen::Vector3d g;
  g(0) = -0.5 * P.T * (d.dD_sigma.array() / f.D.array()).sum();
  g(1) = -0.5 * P.T * (d.dD_phi.array() / f.D.array()).sum();
  g(2) = -0.5 * n * (P.Pinv * dP).trace();

  for (int t = 0; t < P.T; ++t) {
    Eigen::VectorXd u = f.apply_ImA(v.col(t));
    Eigen::VectorXd w = f.apply_ImA(vtilde.col(t));
    Eigen::VectorXd uD = u.array() / f.D.array();
    Eigen::VectorXd wD = w.array() / f.D.array();
    // theta blocks: z^T dA^T D^-1 (I-A)vt + z^T (I-A)^T D^-1 dA vt
    //               + z^T (I-A)^T D^-1 dD D^-1 (I-A) vt
    Eigen::VectorXd dAv_s = detail::apply_dA(f, d.da_sigma, v.col(t));
    Eigen::VectorXd dAvt_s = detail::apply_dA(f, d.da_sigma, vtilde.col(t));
    Eigen::VectorXd dAv_p = detail::apply_dA(f, d.da_phi, v.col(t));
    Eigen::VectorXd dAvt_p = detail::apply_dA(f, d.da_phi, vtilde.col(t));
    g(0) += 0.5 * (dAv_s.dot(wD) + uD.dot(dAvt_s) +
                   (uD.array() * d.dD_sigma.array() * wD.array()).sum());
    g(1) += 0.5 * (dAv_p.dot(wD) + uD.dot(dAvt_p) +
                   (uD.array() * d.dD_phi.array() * wD.array()).sum());
    // rho block: z^T (I-A)^T D^-1 (I-A) vtt
    Eigen::VectorXd wtt = f.apply_ImA(vtt.col(t));
    g(2) += 0.5 * (uD.array() * wtt.array()).sum();
  }
  return g;
}

// Weighted average of per-draw gradients over a bank of latent vectors
// (columns). Weights must sum to one.
inline Eigen::Vector3d nngp_gradients(const Eigen::MatrixXd& z_draws,
                                      const Eigen::VectorXd& weights, const NngpFactor& f,
                                      const NngpDerivs& d, const TemporalMatrix& P) {
  Eigen::Vector3d g = Eigen::Vector3d::Zero();
  for (Eigen::Index s = 0; s < z_draws.cols(); ++s)
    g += weights(s) * nngp_loglik_grad(z_draws.col(s), f, d, P);
  return g;
}

}  // namespace lgcp

#endif
