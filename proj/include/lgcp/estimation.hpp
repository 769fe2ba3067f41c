#ifndef LGCP_ESTIMATION_HPP
#define LGCP_ESTIMATION_HPP

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lgcp/common.hpp"
#include "lgcp/covariance.hpp"
#include "lgcp/model.hpp"
#include "lgcp/nngp.hpp"
#include "lgcp/optim.hpp"
#include "lgcp/sampler.hpp"

namespace lgcp {

enum class Algorithm { mcmcml, saem };

struct FitOptions {
  Algorithm algorithm = Algorithm::saem;
  double alpha = 0.7;       // SAEM decay exponent, in [0.5, 1)
  bool use_polyak = true;   // Polyak-Ruppert averaging of the iterates
  int m_k = 0;              // 0 = default (50 saem, 100 mcmcml)
  bool adaptive_mk = false; // Caffo sample-size adaptation
  double mk_growth = 1.2;   // MCMC-ML non-adaptive growth factor
  int mk_cap = 2000;
  double tolerance = 1e-2;  // parameter-difference stopping threshold
  double delta = 0.05;      // Caffo confidence
  double epsilon = 0.2;     // Caffo type-2 rate
  int max_iter = 40;
  Optimiser optimiser = Optimiser::quasi_newton;
  int warmup = 250;             // MALA warmup, first iteration
  int warmup_subsequent = 50;   // MALA warmup, later iterations (chain carried)
  int prediction_draws = 200;   // final bank size at the converged estimates
  std::uint64_t seed = 1;

  void validate() const {
    if (alpha < 0.5 || alpha >= 1.0) throw config_error("alpha must be in [0.5, 1)");
    if (tolerance <= 0 || delta <= 0 || delta >= 1 || epsilon <= 0 || epsilon >= 1)
      throw config_error("tolerances must be positive (delta, epsilon in (0,1))");
    if (max_iter < 1) throw config_error("max_iter must be >= 1");
  }
};

struct TraceRow {
  int iter = 0;
  Eigen::VectorXd gamma;
  double sigma_sq = 0, phi = 0, rho = 0;
  int m_k = 0;
  double ll_pois = 0, ll_mvn = 0;
  double max_param_diff = 0;
  double delta_ll = 0, caffo_sd = 0, caffo_u = 0;
  double accept = 0;
};

struct FitResult {
  Eigen::VectorXd gamma;  // Polyak-averaged when enabled
  CovParams theta;
  Eigen::VectorXd gamma_last;  // raw final iterates
  CovParams theta_last;
  Eigen::VectorXd se;  // empty for HSGP
  bool converged = false;
  std::string stop_reason;
  bool theta_fixed = false;
  std::vector<TraceRow> trace;
  SampleBank bank;  // draws at the returned estimates
  long clamp_events = 0;
  double wall_seconds = 0;
  double accept_rate = 0;
};

// Fisher-scoring maximisation of the weighted Monte-Carlo average Poisson
// log-likelihood over gamma. Z_draws columns are latent fields (nT), weights
// sum to one. Newton converges when the gradient infinity-norm is < 1e-8.
inline Eigen::VectorXd gamma_step(const ModelData& model, const Eigen::MatrixXd& Z_draws,
                                  const Eigen::VectorXd& weights, Eigen::VectorXd gamma) {
  if (Z_draws.cols() < 1) throw config_error("gamma_step needs at least one draw");
  const int Q = model.q_total();
  if (gamma.size() != Q) throw dimension_error("gamma_step: gamma length mismatch");
  if (model.y.sum() == 0.0)
    throw step_failure_error("gamma_step: all counts are zero, the intercept diverges");
  const int S = static_cast<int>(Z_draws.cols());
  for (int it = 0; it < 100; ++it) {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(Q);
    Eigen::MatrixXd info = Eigen::MatrixXd::Zero(Q, Q);
    for (int s = 0; s < S; ++s) {
      Eigen::VectorXd lambda = model.intensity(gamma, Z_draws.col(s));
      Eigen::MatrixXd J = model.intensity_jacobian(gamma, Z_draws.col(s), lambda);
      Eigen::VectorXd score = (model.y.array() / lambda.array() - 1.0).matrix();
      grad += weights(s) * (J.transpose() * score);
      info += weights(s) * (J.transpose() * lambda.cwiseInverse().asDiagonal() * J);
    }
    if (grad.cwiseAbs().maxCoeff() < 1e-8) return gamma;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    if (ldlt.info() != Eigen::Success)
      throw step_failure_error("gamma_step: singular information matrix");
    gamma += ldlt.solve(grad);
    if (gamma.cwiseAbs().maxCoeff() > 30.0)
      throw step_failure_error("gamma_step diverged (|gamma| > 30); data may be degenerate");
  }
  throw step_failure_error("gamma_step did not converge in 100 Newton iterations");
}

struct ThetaStepResult {
  CovParams params;
  bool bound_hit = false;
  int evals = 0;
  double objective = 0;  // weighted mean negative log-likelihood at the optimum
};

namespace detail {

inline Eigen::VectorXd theta_to_u(const CovParams& p, bool with_rho) {
  Eigen::VectorXd u(with_rho ? 3 : 2);
  u(0) = std::log(p.sigma_sq);
  u(1) = std::log(p.phi);
  if (with_rho) u(2) = std::atanh(p.rho);
  return u;
}

inline CovParams u_to_theta(const Eigen::VectorXd& u, Kernel k, bool with_rho) {
  // |atanh rho| capped so tanh never rounds to exactly +-1 in doubles
  double rho = with_rho ? std::tanh(std::clamp(u(2), -6.0, 6.0)) : 0.0;
  return CovParams{std::exp(u(0)), std::exp(u(1)), rho, k};
}

}  // namespace detail

// Minimises the weighted Monte-Carlo average negative log-likelihood in the
// covariance parameters on the unconstrained scale (log sigma^2, log phi,
// atanh rho). NNGP and dense paths use the multivariate-normal likelihood of
// the stored latent draws; the HSGP path uses the Poisson likelihood with the
// intensity rebuilt through Phi Lambda^{1/2} at each candidate.
inline ThetaStepResult theta_step(const ModelData& model, const LatentModel& lm,
                                  const Eigen::MatrixXd& Z_draws,
                                  const Eigen::MatrixXd& zstar_draws,
                                  const Eigen::VectorXd& weights, const Eigen::VectorXd& gamma,
                                  CovParams start, Optimiser opt) {
  const bool with_rho = lm.T > 1;
  const int S = static_cast<int>(weights.size());
  const int dim = with_rho ? 3 : 2;

  auto chain_scale = [&](const Eigen::VectorXd& u, const Eigen::Vector3d& g_theta) {
    Eigen::VectorXd g(dim);
    g(0) = g_theta(0) * std::exp(u(0));
    g(1) = g_theta(1) * std::exp(u(1));
    if (with_rho) g(2) = g_theta(2) * (1.0 - sq(std::tanh(u(2))));
    return g;
  };

  std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)> eval;
  if (lm.approx == Approx::hsgp) {
    eval = [&, S](const Eigen::VectorXd& u, Eigen::VectorXd* grad) {
      CovParams p = detail::u_to_theta(u, lm.kernel, with_rho);
      SqrtFactor f;
      f.P = TemporalMatrix::build(with_rho ? p.rho : 0.0, lm.T);
      f.F = lm.basis.factor(p.kernel, p.sigma_sq, p.phi);
      double nll = 0.0;
      if (grad) grad->setZero(dim);
      Eigen::VectorXd dhs = grad ? lm.basis.dhalf_dsigma(p.kernel, p.sigma_sq, p.phi)
                                 : Eigen::VectorXd();
      Eigen::VectorXd dhp = grad ? lm.basis.dhalf_dphi(p.kernel, p.sigma_sq, p.phi)
                                 : Eigen::VectorXd();
      Eigen::MatrixXd dR = (grad && with_rho) ? f.P.chol_deriv() : Eigen::MatrixXd();
      for (int s = 0; s < S; ++s) {
        Eigen::VectorXd z = f.apply(zstar_draws.col(s));
        Eigen::VectorXd lambda = model.intensity(gamma, z);
        nll -= weights(s) * model.loglik(lambda);
        if (grad) {
          Eigen::VectorXd gz = model.dloglik_dZ(gamma, z);
          auto B = Eigen::Map<const Eigen::MatrixXd>(zstar_draws.col(s).data(),
                                                     lm.basis.k(), lm.T);
          Eigen::Vector3d gt = Eigen::Vector3d::Zero();
          {
            Eigen::MatrixXd fld = (lm.basis.phi * dhs.asDiagonal()) * B * f.P.R.transpose();
            gt(0) = gz.dot(Eigen::Map<const Eigen::VectorXd>(fld.data(), fld.size()));
            fld = (lm.basis.phi * dhp.asDiagonal()) * B * f.P.R.transpose();
            gt(1) = gz.dot(Eigen::Map<const Eigen::VectorXd>(fld.data(), fld.size()));
            if (with_rho) {
              fld = f.F * B * dR.transpose();
              gt(2) = gz.dot(Eigen::Map<const Eigen::VectorXd>(fld.data(), fld.size()));
            }
          }
          *grad -= weights(s) * chain_scale(u, gt);
        }
      }
      return nll;
    };
  } else if (lm.approx == Approx::nngp) {
    eval = [&, S](const Eigen::VectorXd& u, Eigen::VectorXd* grad) {
      CovParams p = detail::u_to_theta(u, lm.kernel, with_rho);
      NngpFactor f = compute_factor(lm.coords, lm.sets, p);
      TemporalMatrix P = TemporalMatrix::build(with_rho ? p.rho : 0.0, lm.T);
      double nll = 0.0;
      if (grad) {
        NngpDerivs d = factor_derivatives(lm.coords, p, f);
        Eigen::Vector3d g = Eigen::Vector3d::Zero();
        for (int s = 0; s < S; ++s) {
          nll -= weights(s) * nngp_loglik(Z_draws.col(s), f, P);
          g += weights(s) * nngp_loglik_grad(Z_draws.col(s), f, d, P);
        }
        *grad = -chain_scale(u, g);
      } else {
        for (int s = 0; s < S; ++s) nll -= weights(s) * nngp_loglik(Z_draws.col(s), f, P);
      }
      return nll;
    };
  } else {
    eval = [&, S](const Eigen::VectorXd& u, Eigen::VectorXd* grad) {
      CovParams p = detail::u_to_theta(u, lm.kernel, with_rho);
      DenseKron dk(lm.coords, p, lm.T);
      double nll = 0.0;
      Eigen::Vector3d g = Eigen::Vector3d::Zero();
      for (int s = 0; s < S; ++s) {
        nll -= weights(s) * dk.loglik(Z_draws.col(s));
        if (grad) g += weights(s) * dk.grad(Z_draws.col(s));
      }
      if (grad) *grad = -chain_scale(u, g);
      return nll;
    };
  }

  // probes at extreme parameters may fail to factorise; treat them as +inf so
  // the optimisers back off instead of aborting
  auto guarded = [&](const Eigen::VectorXd& u, Eigen::VectorXd* grad) {
    try {
      return eval(u, grad);
    } catch (const lgcp::error&) {
      if (grad) grad->setZero(dim);
      return std::numeric_limits<double>::max();
    }
  };

  Eigen::VectorXd u0 = detail::theta_to_u(start, with_rho);
  try {
    if (!std::isfinite(eval(u0, nullptr)))
      throw initialisation_error("theta_step objective nonfinite at the initial point");
  } catch (const initialisation_error&) {
    throw;
  } catch (const lgcp::error& e) {
    throw initialisation_error(std::string("theta_step failed at the initial point: ") +
                               e.what());
  }
  OptimResult r;
  if (opt == Optimiser::derivative_free) {
    r = nelder_mead([&](const Eigen::VectorXd& u) { return guarded(u, nullptr); }, u0);
  } else {
    r = bfgs(
        [&](const Eigen::VectorXd& u, Eigen::VectorXd& g) {
          Eigen::VectorXd gg;
          double v = guarded(u, &gg);
          g = gg;
          return v;
        },
        u0);
  }
  ThetaStepResult out;
  out.params = detail::u_to_theta(r.x, lm.kernel, with_rho);
  out.bound_hit = r.bound_hit;
  out.evals = r.evals;
  out.objective = r.f;
  return out;
}

// SAEM recursion L^{(k+1)} = L^{(k)} + a_k (batch - L^{(k)}) realised as
// per-draw weights over all stored batches: history decays by (1 - a_k) and
// the new batch receives total weight a_k, so the objective under new theta
// stays exact. a_k = (1/k)^alpha with a_1 = 1.
inline void saem_update_weights(std::vector<double>& weights, int k, double alpha, int m_new) {
  double a_k = std::pow(1.0 / k, alpha);
  for (double& w : weights) w *= (1.0 - a_k);
  for (int s = 0; s < m_new; ++s) weights.push_back(a_k / m_new);
}

enum class StopDecision { continue_, stop_param_diff, stop_caffo };

// Parameter-difference rule (running mean, window 3) and Caffo bound, both
// active; whichever fires first.
inline StopDecision stopping_check(const std::vector<TraceRow>& trace, const FitOptions& opts) {
  if (trace.size() < 2) return StopDecision::continue_;
  int w = std::min<int>(3, static_cast<int>(trace.size()));
  double mean_diff = 0.0;
  for (int i = 0; i < w; ++i) mean_diff += trace[trace.size() - 1 - i].max_param_diff / w;
  if (mean_diff < opts.tolerance) return StopDecision::stop_param_diff;
  if (std::isfinite(trace.back().caffo_u) && trace.back().caffo_u < 0.0)
    return StopDecision::stop_caffo;
  return StopDecision::continue_;
}

// m_{k+1} = max(m_k, |L| (z_delta + z_epsilon)^2 / dL^2), capped.
inline int adapt_mk(int m_k, double delta, double epsilon, double delta_L, double loglik_mag,
                    int cap = 2000) {
  if (delta_L == 0.0) return m_k;
  double z = normal_quantile(1.0 - delta) + normal_quantile(1.0 - epsilon);
  double raw = std::abs(loglik_mag) * z * z / (delta_L * delta_L);
  int next = std::max<long>(m_k, static_cast<long>(std::ceil(raw)));
  return static_cast<int>(std::min<long>(next, std::max(cap, m_k)));
}

namespace detail {

inline Eigen::MatrixXd kron_dense(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd k(a.rows() * b.rows(), a.cols() * b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      k.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return k;
}

// Spatial covariance under the fitted approximation (dense reconstruction).
inline Eigen::MatrixXd sigma0_approx(const LatentModel& lm, const CovParams& p) {
  if (lm.approx == Approx::nngp) {
    Eigen::MatrixXd L = approx_cholesky(compute_factor(lm.coords, lm.sets, p));
    return L * L.transpose();
  }
  return build_sigma0(lm.coords, p);
}

inline Eigen::MatrixXd sigma0_approx_inverse(const LatentModel& lm, const CovParams& p) {
  if (lm.approx == Approx::nngp) {
    NngpFactor f = compute_factor(lm.coords, lm.sets, p);
    int n = f.n();
    Eigen::MatrixXd ImA = Eigen::MatrixXd::Identity(n, n);
    for (int j = 0; j < n; ++j)
      for (std::size_t k = 0; k < f.sets[j].size(); ++k) ImA(j, f.sets[j][k]) = -f.a[j](k);
    return ImA.transpose() * f.D.cwiseInverse().asDiagonal() * ImA;
  }
  Eigen::MatrixXd s0 = build_sigma0(lm.coords, p);
  return Eigen::LLT<Eigen::MatrixXd>(s0).solve(
      Eigen::MatrixXd::Identity(s0.rows(), s0.cols()));
}

}  // namespace detail

// Quasi-likelihood standard errors for gamma on grid models:
// M = X^T (W + P ⊗ Sigma0)^{-1} X with W = diag(1/lambda) at the estimates.
// HSGP is rejected: the implied covariance is rank deficient.
inline Eigen::VectorXd standard_errors_grid(const ModelData& model, const LatentModel& lm,
                                            const Eigen::VectorXd& gamma, const CovParams& p) {
  if (lm.approx == Approx::hsgp)
    throw unsupported_error(
        "standard errors are unavailable for the HSGP approximation (rank-deficient "
        "covariance)");
  if (model.is_region())
    throw config_error("standard_errors_grid called on a region model");
  Eigen::VectorXd lambda = model.intensity(gamma, Eigen::VectorXd::Zero(model.n * model.T));
  TemporalMatrix P = TemporalMatrix::build(model.T > 1 ? p.rho : 0.0, model.T);
  Eigen::MatrixXd omega = detail::kron_dense(P.P, detail::sigma0_approx(lm, p));
  omega += lambda.cwiseInverse().asDiagonal();
  Eigen::MatrixXd M = model.X.transpose() *
                      Eigen::LDLT<Eigen::MatrixXd>(omega).solve(model.X);
  Eigen::MatrixXd Minv = M.inverse();
  return Minv.diagonal().cwiseSqrt();
}

// Intersection-level pieces shared by the region standard errors and their
// dense-oracle test: mu_Q = A(log r + X_r g_r) + B X_s g_s + log w.
struct RegionSEParts {
  Eigen::VectorXd mu_q;     // qT
  Eigen::MatrixXd D;        // qT x Q intersection design [A X_r, B X_s]
  Eigen::VectorXd lambda_g; // nT per-cell intensity totals
  Eigen::MatrixXd G;        // nT x nT inner matrix P^-1 ⊗ Sigma0^-1 + diag(lambda_G)
};

inline RegionSEParts region_se_parts(const ModelData& model, const LatentModel& lm,
                                     const Eigen::VectorXd& gamma, const CovParams& p) {
  if (!model.is_region()) throw config_error("region_se_parts: not a region model");
  if (lm.approx == Approx::hsgp)
    throw unsupported_error("standard errors are unavailable for the HSGP approximation");
  const auto& d = *model.design;
  const int q = d.q, n = d.n, T = model.T, Q = model.q_total();
  RegionSEParts parts;
  parts.mu_q.resize(q * T);
  parts.D = Eigen::MatrixXd::Zero(q * T, Q);
  Eigen::VectorXd eta_r = model.log_offset + model.Xr * gamma.head(model.q_r());
  Eigen::VectorXd eta_s = model.X * gamma.tail(model.q_s());
  for (int t = 0; t < T; ++t)
    for (int k = 0; k < q; ++k) {
      int row = t * q + k;
      parts.mu_q(row) = eta_r(t * d.r + d.region_of[k]) + eta_s(t * n + d.cell_of[k]) +
                        std::log(d.w(k));
      parts.D.row(row).head(model.q_r()) = model.Xr.row(t * d.r + d.region_of[k]);
      parts.D.row(row).tail(model.q_s()) = model.X.row(t * n + d.cell_of[k]);
    }
  Eigen::VectorXd lam_q = parts.mu_q.array().exp();
  parts.lambda_g = Eigen::VectorXd::Zero(n * T);
  for (int t = 0; t < T; ++t)
    for (int k = 0; k < q; ++k) parts.lambda_g(t * n + d.cell_of[k]) += lam_q(t * q + k);
  TemporalMatrix P = TemporalMatrix::build(T > 1 ? p.rho : 0.0, T);
  parts.G = detail::kron_dense(P.Pinv, detail::sigma0_approx_inverse(lm, p));
  parts.G += parts.lambda_g.asDiagonal();
  return parts;
}

// Dense block-form Omega'^{-1} (for oracle comparisons on small instances):
// W'^{-1} - W'^{-1} U G^{-1} U^T W'^{-1} with U = blockdiag(B).
inline Eigen::MatrixXd region_omega_inverse_dense(const ModelData& model, const LatentModel& lm,
                                                  const Eigen::VectorXd& gamma,
                                                  const CovParams& p) {
  RegionSEParts parts = region_se_parts(model, lm, gamma, p);
  const auto& d = *model.design;
  const int q = d.q, n = d.n, T = model.T;
  Eigen::VectorXd lam_q = parts.mu_q.array().exp();
  Eigen::MatrixXd U = Eigen::MatrixXd::Zero(q * T, n * T);
  for (int t = 0; t < T; ++t)
    for (int k = 0; k < q; ++k) U(t * q + k, t * n + d.cell_of[k]) = 1.0;
  Eigen::MatrixXd winv_u = lam_q.asDiagonal() * U;
  Eigen::MatrixXd ginv = Eigen::LDLT<Eigen::MatrixXd>(parts.G).solve(
      Eigen::MatrixXd::Identity(n * T, n * T));
  Eigen::MatrixXd out = -winv_u * ginv * winv_u.transpose();
  out += Eigen::MatrixXd(lam_q.asDiagonal());
  return out;
}

// Region-model standard errors via the Woodbury block identity; only the
// nT-sized inner matrix is inverted.
inline Eigen::VectorXd standard_errors_region(const ModelData& model, const LatentModel& lm,
                                              const Eigen::VectorXd& gamma, const CovParams& p) {
  RegionSEParts parts = region_se_parts(model, lm, gamma, p);
  const auto& d = *model.design;
  const int q = d.q, n = d.n, T = model.T, Q = model.q_total();
  Eigen::VectorXd lam_q = parts.mu_q.array().exp();
  Eigen::MatrixXd E = lam_q.asDiagonal() * parts.D;  // W'^{-1} D
  Eigen::MatrixXd F = Eigen::MatrixXd::Zero(n * T, Q);  // U^T W'^{-1} D
  for (int t = 0; t < T; ++t)
    for (int k = 0; k < q; ++k) F.row(t * n + d.cell_of[k]) += E.row(t * q + k);
  Eigen::LDLT<Eigen::MatrixXd> gldlt(parts.G);
  if (gldlt.info() != Eigen::Success)
    throw factorisation_error("region standard errors: inner matrix not factorisable");
  Eigen::MatrixXd M = parts.D.transpose() * E - F.transpose() * gldlt.solve(F);
  Eigen::MatrixXd Minv = M.inverse();
  return Minv.diagonal().cwiseSqrt();
}

// ---------------------------------------------------------------------------
// MCMC-ML / SAEM outer loop
// ---------------------------------------------------------------------------

inline CovParams initial_theta(const ModelData& model, const LatentModel& lm,
                               const Eigen::VectorXd& gamma) {
  Eigen::VectorXd lambda = model.intensity(gamma, Eigen::VectorXd::Zero(model.n * model.T));
  Eigen::VectorXd pearson = (model.y - lambda).cwiseQuotient(lambda.cwiseSqrt());
  double mean = pearson.mean();
  double var = (pearson.array() - mean).square().sum() / std::max(1, model.n_obs() - 1);
  double sigma_sq = std::max(0.01, 0.5 * var);
  Eigen::VectorXd lo = lm.coords.colwise().minCoeff();
  Eigen::VectorXd hi = lm.coords.colwise().maxCoeff();
  double phi = 0.1 * (hi - lo).norm();
  return CovParams{sigma_sq, phi, lm.T > 1 ? 0.1 : 0.0, lm.kernel};
}

inline FitResult mcmcml_fit(const ModelData& model, const LatentModel& lm,
                            const FitOptions& opts_in,
                            std::optional<std::array<double, 3>> known_theta = std::nullopt) {
  FitOptions opts = opts_in;
  opts.validate();
  auto t_start = std::chrono::steady_clock::now();
  const bool with_rho = lm.T > 1;
  const bool saem = opts.algorithm == Algorithm::saem;
  int m_k = opts.m_k > 0 ? opts.m_k : (saem ? 50 : 100);
  const int nT = model.n * model.T;

  // initial values: Poisson GLM ignoring Z, then moment-style theta guesses
  Eigen::VectorXd gamma = gamma_step(model, Eigen::MatrixXd::Zero(nT, 1),
                                     Eigen::VectorXd::Ones(1),
                                     Eigen::VectorXd::Zero(model.q_total()));
  CovParams theta = initial_theta(model, lm, gamma);
  FitResult res;
  if (known_theta) {
    theta = CovParams{(*known_theta)[0], (*known_theta)[1], with_rho ? (*known_theta)[2] : 0.0,
                      lm.kernel};
    theta.validate();
    res.theta_fixed = true;
  }

  Eigen::MatrixXd Zbank(nT, 0);
  Eigen::MatrixXd zstarbank(0, 0);
  std::vector<double> weights;
  Eigen::VectorXd chain_state;
  double chain_step = 0.0;
  MalaOptions mala;
  double mk_float = m_k;

  for (int k = 1; k <= opts.max_iter; ++k) {
    CovParams p = theta;
    SqrtFactor f = lm.build(p);
    if (k == 1) {
      zstarbank.resize(f.latent_dim(), 0);
      chain_state = Eigen::VectorXd::Zero(f.latent_dim());
    }
    mala.warmup = k == 1 ? opts.warmup : opts.warmup_subsequent;
    SampleBank batch = sample_latent(model, gamma, f, m_k, mala,
                                     Rng::derive(opts.seed, 10 * k), &chain_state, &chain_step);

    // transform the batch to the latent-field scale as sampled
    Eigen::MatrixXd Zbatch(nT, m_k);
    for (int s = 0; s < m_k; ++s) Zbatch.col(s) = f.apply(batch.zstar.col(s));

    if (saem) {
      int old = static_cast<int>(Zbank.cols());
      Zbank.conservativeResize(Eigen::NoChange, old + m_k);
      zstarbank.conservativeResize(Eigen::NoChange, old + m_k);
      Zbank.rightCols(m_k) = Zbatch;
      zstarbank.rightCols(m_k) = batch.zstar;
      saem_update_weights(weights, k, opts.alpha, m_k);
    } else {
      Zbank = Zbatch;
      zstarbank = batch.zstar;
      weights.assign(m_k, 1.0 / m_k);
    }
    Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(weights.data(), weights.size());

    Eigen::VectorXd gamma_new = gamma_step(model, Zbank, w, gamma);
    CovParams theta_new = theta;
    bool bound_hit = false;
    if (!res.theta_fixed) {
      ThetaStepResult ts =
          theta_step(model, lm, Zbank, zstarbank, w, gamma_new, theta, opts.optimiser);
      theta_new = ts.params;
      bound_hit = ts.bound_hit;
    }

    // per-draw total log-likelihood over the current banks at given parameters
    int S = static_cast<int>(weights.size());
    auto bank_logliks = [&](const Eigen::VectorXd& g, const CovParams& th) {
      Eigen::VectorXd out(S);
      if (lm.approx == Approx::hsgp) {
        SqrtFactor fh;
        fh.P = TemporalMatrix::build(with_rho ? th.rho : 0.0, lm.T);
        fh.F = lm.basis.factor(th.kernel, th.sigma_sq, th.phi);
        for (int s = 0; s < S; ++s)
          out(s) = model.loglik(model.intensity(g, fh.apply(zstarbank.col(s)))) -
                   0.5 * zstarbank.col(s).squaredNorm();
      } else if (lm.approx == Approx::nngp) {
        NngpFactor nf = compute_factor(lm.coords, lm.sets, th);
        TemporalMatrix P = TemporalMatrix::build(with_rho ? th.rho : 0.0, lm.T);
        for (int s = 0; s < S; ++s)
          out(s) = model.loglik(model.intensity(g, Zbank.col(s))) +
                   nngp_loglik(Zbank.col(s), nf, P);
      } else {
        DenseKron dk(lm.coords, th, lm.T);
        for (int s = 0; s < S; ++s)
          out(s) = model.loglik(model.intensity(g, Zbank.col(s))) + dk.loglik(Zbank.col(s));
      }
      return out;
    };
    double delta_ll = 0.0, caffo_sd = 0.0, caffo_u = std::numeric_limits<double>::infinity();
    Eigen::VectorXd ll_draws = bank_logliks(gamma_new, theta_new);
    double ll_new = w.dot(ll_draws);
    if (k >= 2) {
      Eigen::VectorXd dll = ll_draws - bank_logliks(gamma, theta);
      delta_ll = w.dot(dll);
      double varw = 0.0;
      for (int s = 0; s < S; ++s) varw += w(s) * sq(dll(s) - delta_ll);
      caffo_sd = std::sqrt(varw * w.squaredNorm());
      caffo_u = delta_ll + normal_quantile(1.0 - opts.delta) * caffo_sd;
    }

    TraceRow row;
    row.iter = k;
    row.gamma = gamma_new;
    row.sigma_sq = theta_new.sigma_sq;
    row.phi = theta_new.phi;
    row.rho = theta_new.rho;
    row.m_k = m_k;
    row.accept = batch.accept_rate;
    double ll_pois = 0.0;
    for (int s = 0; s < S; ++s)
      ll_pois += w(s) * model.loglik(model.intensity(gamma_new, Zbank.col(s)));
    row.ll_pois = ll_pois;
    row.ll_mvn = ll_new - ll_pois;
    row.delta_ll = delta_ll;
    row.caffo_sd = caffo_sd;
    row.caffo_u = caffo_u;
    double md = (gamma_new - gamma).cwiseAbs().maxCoeff();
    md = std::max(md, std::abs(theta_new.sigma_sq - theta.sigma_sq));
    md = std::max(md, std::abs(theta_new.phi - theta.phi));
    if (with_rho) md = std::max(md, std::abs(theta_new.rho - theta.rho));
    row.max_param_diff = md;
    res.trace.push_back(row);

    gamma = gamma_new;
    theta = theta_new;
    (void)bound_hit;

    StopDecision dec = stopping_check(res.trace, opts);
    if (dec != StopDecision::continue_) {
      res.converged = true;
      res.stop_reason = dec == StopDecision::stop_param_diff ? "param_diff" : "caffo";
      break;
    }
    if (k == opts.max_iter) {
      res.converged = false;
      res.stop_reason = "max_iter";
      break;
    }

    if (opts.adaptive_mk && k >= 2) {
      m_k = adapt_mk(m_k, opts.delta, opts.epsilon, delta_ll, ll_new, opts.mk_cap);
    } else if (!saem) {
      mk_float *= opts.mk_growth;
      m_k = std::min<int>(opts.mk_cap, static_cast<int>(mk_float));
    }
  }

  res.gamma_last = gamma;
  res.theta_last = theta;
  res.gamma = gamma;
  res.theta = theta;
  if (opts.use_polyak && res.trace.size() >= 2) {
    // average the iterates over the second half of the trace; theta on the
    // unconstrained scale
    int K = static_cast<int>(res.trace.size());
    int from = K / 2;
    Eigen::VectorXd gacc = Eigen::VectorXd::Zero(gamma.size());
    Eigen::VectorXd uacc = Eigen::VectorXd::Zero(with_rho ? 3 : 2);
    int cnt = 0;
    for (int i = from; i < K; ++i) {
      gacc += res.trace[i].gamma;
      CovParams ti{res.trace[i].sigma_sq, res.trace[i].phi, res.trace[i].rho, lm.kernel};
      uacc += detail::theta_to_u(ti, with_rho);
      ++cnt;
    }
    res.gamma = gacc / cnt;
    res.theta = detail::u_to_theta(uacc / cnt, lm.kernel, with_rho);
    if (res.theta_fixed) res.theta = theta;
  }

  // final bank at the returned estimates
  SqrtFactor ffinal = lm.build(res.theta);
  mala.warmup = opts.warmup_subsequent;
  res.bank = sample_latent(model, res.gamma, ffinal, opts.prediction_draws, mala,
                           Rng::derive(opts.seed, 999983), &chain_state, &chain_step);
  res.accept_rate = res.bank.accept_rate;

  if (lm.approx != Approx::hsgp) {
    res.se = model.is_region() ? standard_errors_region(model, lm, res.gamma, res.theta)
                               : standard_errors_grid(model, lm, res.gamma, res.theta);
  }
  res.clamp_events = model.clamp_events;
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

}  // namespace lgcp

#endif
