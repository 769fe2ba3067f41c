#ifndef LGCP_MODEL_HPP
#define LGCP_MODEL_HPP

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lgcp/common.hpp"
#include "lgcp/covariance.hpp"
#include "lgcp/grid.hpp"

namespace lgcp {

enum class Approx { nngp, hsgp, none };

inline std::string approx_name(Approx a) {
  switch (a) {
    case Approx::nngp: return "nngp";
    case Approx::hsgp: return "hsgp";
    case Approx::none: return "none";
  }
  return "none";
}

struct ModelSpec {
  std::vector<std::string> covariates;         // grid-level X_s
  std::vector<std::string> region_covariates;  // region-level X_r (region models)
  std::string offset;                          // name of the offset column; empty = 1
  Approx approx = Approx::nngp;
  Kernel kernel = Kernel::exponential;
  int m = 15;      // neighbours (nngp) or basis functions per dimension (hsgp)
  double c = 2.0;  // hsgp boundary factor
  std::optional<std::array<double, 3>> known_theta;  // (sigma_sq, phi, rho)
};

// Linear predictors are clamped here before exponentiation; clamp events are
// counted, never silent.
inline constexpr double kEtaClamp = 50.0;

inline double poisson_loglik(const Eigen::VectorXd& y, const Eigen::VectorXd& eta) {
  if (y.size() != eta.size()) throw dimension_error("poisson_loglik: length mismatch");
  double ll = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (!std::isfinite(eta(i))) throw numeric_error("poisson_loglik: nonfinite linear predictor");
    if (y(i) < 0.0 || y(i) != std::floor(y(i)))
      throw numeric_error("poisson_loglik: counts must be nonnegative integers");
    ll += y(i) * eta(i) - std::exp(eta(i)) - std::lgamma(y(i) + 1.0);
  }
  return ll;
}

// lambda(S_i,t) = r exp(X gamma + Z), eta clamped at +-kEtaClamp.
inline Eigen::VectorXd grid_intensity(const Eigen::VectorXd& log_offset, const Eigen::MatrixXd& X,
                                      const Eigen::VectorXd& gamma, const Eigen::VectorXd& z,
                                      long* clamp_counter = nullptr) {
  if (X.cols() != gamma.size()) throw dimension_error("grid_intensity: gamma length mismatch");
  if (X.rows() != z.size() || X.rows() != log_offset.size())
    throw dimension_error("grid_intensity: row mismatch");
  Eigen::VectorXd eta = log_offset + X * gamma + z;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    if (std::abs(eta(i)) > kEtaClamp) {
      eta(i) = eta(i) > 0 ? kEtaClamp : -kEtaClamp;
      if (clamp_counter) ++(*clamp_counter);
    }
  }
  return eta.array().exp();
}

// Sparse region design: A (q x r) region-of-intersection indicator, B (q x n)
// cell-of-intersection indicator, weights w, and C = B^T A. Stored as index
// arrays; every row of A and B has exactly one 1.
struct RegionDesign {
  int q = 0, r = 0, n = 0, T = 1;
  std::vector<int> region_of;  // per intersection
  std::vector<int> cell_of;
  Eigen::VectorXd w;

  // y_j = sum_{k in region j} w_k x_{cell(k)} ; the weighted C^T
  Eigen::VectorXd apply_weighted(const Eigen::VectorXd& x_cells) const {
    Eigen::VectorXd y = Eigen::VectorXd::Zero(r);
    for (int k = 0; k < q; ++k) y(region_of[k]) += w(k) * x_cells(cell_of[k]);
    return y;
  }

  Eigen::MatrixXd dense_A() const {
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(q, r);
    for (int k = 0; k < q; ++k) A(k, region_of[k]) = 1.0;
    return A;
  }
  Eigen::MatrixXd dense_B() const {
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(q, n);
    for (int k = 0; k < q; ++k) B(k, cell_of[k]) = 1.0;
    return B;
  }
  // C = B^T A (n x r)
  Eigen::MatrixXd dense_C() const { return dense_B().transpose() * dense_A(); }
};

inline RegionDesign build_region_design(const IntersectionMap& imap, int n, int r, int T = 1) {
  RegionDesign d;
  d.q = imap.q();
  d.r = r;
  d.n = n;
  d.T = T;
  d.region_of.resize(d.q);
  d.cell_of.resize(d.q);
  d.w.resize(d.q);
  Eigen::VectorXd per_region = Eigen::VectorXd::Zero(r);
  for (int k = 0; k < d.q; ++k) {
    const auto& e = imap.entries[k];
    if (e.cell < 0 || e.cell >= n || e.region < 0 || e.region >= r)
      throw dimension_error("intersection entry out of range");
    if (!(e.w > 0.0)) throw invalid_geometry_error("nonpositive intersection weight");
    d.region_of[k] = e.region;
    d.cell_of[k] = e.cell;
    d.w(k) = e.w;
    per_region(e.region) += e.w;
  }
  for (int j = 0; j < r; ++j) {
    if (per_region(j) == 0.0)
      throw no_coverage_error("region " + std::to_string(j + 1) + " has no grid intersection");
    if (std::abs(per_region(j) - 1.0) > 1e-9)
      throw invalid_geometry_error("region " + std::to_string(j + 1) + " weights sum to " +
                                   std::to_string(per_region(j)));
  }
  return d;
}

// lambda(R_j,t) = mu_R ⊙ (weighted-C^T (mu_S ⊙ mu_Z)); all vectors time-major.
inline Eigen::VectorXd region_intensity(const RegionDesign& d, const Eigen::VectorXd& mu_R,
                                        const Eigen::VectorXd& mu_S, const Eigen::VectorXd& mu_Z) {
  int T = static_cast<int>(mu_R.size()) / d.r;
  if (mu_R.size() != static_cast<Eigen::Index>(d.r) * T ||
      mu_S.size() != static_cast<Eigen::Index>(d.n) * T || mu_S.size() != mu_Z.size())
    throw dimension_error("region_intensity: shape mismatch");
  Eigen::VectorXd out(d.r * T);
  for (int t = 0; t < T; ++t) {
    Eigen::VectorXd sz = mu_S.segment(t * d.n, d.n).cwiseProduct(mu_Z.segment(t * d.n, d.n));
    out.segment(t * d.r, d.r) =
        mu_R.segment(t * d.r, d.r).cwiseProduct(d.apply_weighted(sz));
  }
  return out;
}

// C* = rows scaled by mu_R, columns by mu_S, weights folded in; the region
// intensity is then C* mu_Z. Recomputed when gamma updates and cached across
// MCMC steps. coef(k,t) = mu_R[region(k),t] * w_k * mu_S[cell(k),t].
struct CStar {
  const RegionDesign* design = nullptr;
  Eigen::MatrixXd coef;  // q x T

  Eigen::VectorXd apply(const Eigen::VectorXd& mu_Z) const {
    const auto& d = *design;
    int T = static_cast<int>(coef.cols());
    Eigen::VectorXd out = Eigen::VectorXd::Zero(d.r * T);
    for (int t = 0; t < T; ++t)
      for (int k = 0; k < d.q; ++k)
        out(t * d.r + d.region_of[k]) += coef(k, t) * mu_Z(t * d.n + d.cell_of[k]);
    return out;
  }

  // pullback g_cells[i,t] = sum_{k: cell(k)=i} coef(k,t) g_regions[region(k),t]
  Eigen::VectorXd apply_transpose(const Eigen::VectorXd& g_regions) const {
    const auto& d = *design;
    int T = static_cast<int>(coef.cols());
    Eigen::VectorXd out = Eigen::VectorXd::Zero(d.n * T);
    for (int t = 0; t < T; ++t)
      for (int k = 0; k < d.q; ++k)
        out(t * d.n + d.cell_of[k]) += coef(k, t) * g_regions(t * d.r + d.region_of[k]);
    return out;
  }

  // dense r x n matrix for one period
  Eigen::MatrixXd dense(int t) const {
    const auto& d = *design;
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(d.r, d.n);
    for (int k = 0; k < d.q; ++k) m(d.region_of[k], d.cell_of[k]) += coef(k, t);
    return m;
  }
};

inline CStar build_cstar(const RegionDesign& d, const Eigen::VectorXd& mu_R,
                         const Eigen::VectorXd& mu_S) {
  int T = static_cast<int>(mu_R.size()) / d.r;
  if (mu_R.size() != static_cast<Eigen::Index>(d.r) * T ||
      mu_S.size() != static_cast<Eigen::Index>(d.n) * T)
    throw dimension_error("build_cstar: shape mismatch");
  CStar cs;
  cs.design = &d;
  cs.coef.resize(d.q, T);
  for (int t = 0; t < T; ++t)
    for (int k = 0; k < d.q; ++k)
      cs.coef(k, t) = mu_R(t * d.r + d.region_of[k]) * d.w(k) * mu_S(t * d.n + d.cell_of[k]);
  return cs;
}

// Assembled data for likelihood evaluation, shared by the samplers and the
// estimation loops. For region models gamma = [gamma_r; gamma_s] with the
// intercept leading gamma_r; for grid models the intercept leads gamma.
struct ModelData {
  Eigen::VectorXd y;           // nT (grid) or rT (region)
  Eigen::MatrixXd X;           // grid-level design, nT x Qs
  Eigen::MatrixXd Xr;          // region-level design, rT x Qr (region only)
  Eigen::VectorXd log_offset;  // matches y
  int n = 0, T = 1;
  std::optional<RegionDesign> design;
  mutable long clamp_events = 0;

  bool is_region() const { return design.has_value(); }
  int n_obs() const { return static_cast<int>(y.size()); }
  int q_r() const { return static_cast<int>(Xr.cols()); }
  int q_s() const { return static_cast<int>(X.cols()); }
  int q_total() const { return q_r() + q_s(); }

  double log_y_factorial() const {
    if (!lgfact_) {
      double s = 0.0;
      for (Eigen::Index i = 0; i < y.size(); ++i) s += std::lgamma(y(i) + 1.0);
      lgfact_ = s;
    }
    return *lgfact_;
  }

  Eigen::VectorXd clamped_exp(const Eigen::VectorXd& eta) const {
    Eigen::VectorXd out(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      double e = eta(i);
      if (std::abs(e) > kEtaClamp) {
        e = e > 0 ? kEtaClamp : -kEtaClamp;
        ++clamp_events;
      }
      out(i) = std::exp(e);
    }
    return out;
  }

  // mu_R = r exp(X_r gamma_r) at region level (region models)
  Eigen::VectorXd mu_R(const Eigen::VectorXd& gamma) const {
    return clamped_exp(log_offset + Xr * gamma.head(q_r()));
  }

  Eigen::VectorXd intensity(const Eigen::VectorXd& gamma, const Eigen::VectorXd& z) const {
    if (gamma.size() != q_total()) throw dimension_error("intensity: gamma length mismatch");
    if (z.size() != static_cast<Eigen::Index>(n) * T)
      throw dimension_error("intensity: latent length mismatch");
    if (!is_region()) return clamped_exp(log_offset + X * gamma + z);
    Eigen::VectorXd mu_S = clamped_exp(X * gamma.tail(q_s()));
    Eigen::VectorXd mu_Z = clamped_exp(z);
    return region_intensity(*design, mu_R(gamma), mu_S, mu_Z);
  }

  double loglik(const Eigen::VectorXd& lambda) const {
    double ll = -log_y_factorial();
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      if (!(lambda(i) > 0.0) || !std::isfinite(lambda(i)))
        throw numeric_error("loglik: nonpositive or nonfinite intensity");
      ll += y(i) * std::log(lambda(i)) - lambda(i);
    }
    return ll;
  }

  // d loglik / dZ at the cell level (nT), for both model kinds
  Eigen::VectorXd dloglik_dZ(const Eigen::VectorXd& gamma, const Eigen::VectorXd& z) const {
    if (!is_region()) {
      Eigen::VectorXd lambda = intensity(gamma, z);
      return y - lambda;
    }
    Eigen::VectorXd mu_S = clamped_exp(X * gamma.tail(q_s()));
    Eigen::VectorXd mu_Z = clamped_exp(z);
    CStar cs = build_cstar(*design, mu_R(gamma), mu_S);
    Eigen::VectorXd lambda = cs.apply(mu_Z);
    Eigen::VectorXd score = (y.array() / lambda.array() - 1.0).matrix();
    return cs.apply_transpose(score).cwiseProduct(mu_Z);
  }

  // d lambda / d gamma, rT-or-nT x Q, dense
  Eigen::MatrixXd intensity_jacobian(const Eigen::VectorXd& gamma, const Eigen::VectorXd& z,
                                     const Eigen::VectorXd& lambda) const {
    Eigen::MatrixXd J(n_obs(), q_total());
    if (!is_region()) {
      for (int c = 0; c < q_total(); ++c) J.col(c) = lambda.cwiseProduct(X.col(c));
      return J;
    }
    const auto& d = *design;
    Eigen::VectorXd mu_S = clamped_exp(X * gamma.tail(q_s()));
    Eigen::VectorXd mu_Z = clamped_exp(z);
    CStar cs = build_cstar(d, mu_R(gamma), mu_S);
    // region-level columns: log-linear, dlambda/dgamma_r = lambda * x_r
    for (int c = 0; c < q_r(); ++c) J.col(c) = lambda.cwiseProduct(Xr.col(c));
    // cell-level columns: sum over intersections of coef * mu_Z * x_s
    for (int c = 0; c < q_s(); ++c) {
      Eigen::VectorXd col = Eigen::VectorXd::Zero(n_obs());
      for (int t = 0; t < T; ++t)
        for (int k = 0; k < d.q; ++k)
          col(t * d.r + d.region_of[k]) += cs.coef(k, t) * mu_Z(t * d.n + d.cell_of[k]) *
                                           X(t * d.n + d.cell_of[k], c);
      J.col(q_r() + c) = col;
    }
    return J;
  }

private:
  mutable std::optional<double> lgfact_;
};

}  // namespace lgcp

#endif
