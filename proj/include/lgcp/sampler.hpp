#ifndef LGCP_SAMPLER_HPP
#define LGCP_SAMPLER_HPP

#include <cmath>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "lgcp/common.hpp"
#include "lgcp/covariance.hpp"
#include "lgcp/hsgp.hpp"
#include "lgcp/model.hpp"
#include "lgcp/nngp.hpp"
#include "lgcp/parallel.hpp"
#include "lgcp/rng.hpp"

namespace lgcp {

// Square-root factor of the latent covariance: the latent field is
// Z = (R ⊗ F) z* with z* standard normal. F is the NNGP approximate Cholesky,
// the dense Cholesky (no approximation), or Phi Lambda^{1/2} (HSGP).
struct SqrtFactor {
  Eigen::MatrixXd F;  // n x K spatial square root
  TemporalMatrix P;

  int n() const { return static_cast<int>(F.rows()); }
  int k() const { return static_cast<int>(F.cols()); }
  int latent_dim() const { return k() * P.T; }
  int field_dim() const { return n() * P.T; }

  // (R ⊗ F) zstar, time-major
  Eigen::VectorXd apply(const Eigen::VectorXd& zstar) const {
    if (zstar.size() != latent_dim()) throw dimension_error("SqrtFactor::apply: length mismatch");
    auto B = Eigen::Map<const Eigen::MatrixXd>(zstar.data(), k(), P.T);
    Eigen::MatrixXd field = F * B * P.R.transpose();
    return Eigen::Map<const Eigen::VectorXd>(field.data(), field.size());
  }

  // (R ⊗ F)^T v
  Eigen::VectorXd apply_transpose(const Eigen::VectorXd& v) const {
    if (v.size() != field_dim())
      throw dimension_error("SqrtFactor::apply_transpose: length mismatch");
    auto V = Eigen::Map<const Eigen::MatrixXd>(v.data(), n(), P.T);
    Eigen::MatrixXd out = F.transpose() * V * P.R;
    return Eigen::Map<const Eigen::VectorXd>(out.data(), out.size());
  }
};

// Ties a ModelData to a latent-field parameterisation and rebuilds the factor
// for new covariance parameters.
struct LatentModel {
  Approx approx = Approx::none;
  Eigen::MatrixXd coords;  // cell centres, current order
  int T = 1;
  // nngp
  NeighbourSets sets;
  // hsgp
  HsgpBasis basis;
  Kernel kernel = Kernel::exponential;

  static LatentModel make(Approx a, const Eigen::MatrixXd& coords, int T, Kernel kernel,
                          int m = 15, double c = 2.0) {
    LatentModel lm;
    lm.approx = a;
    lm.coords = coords;
    lm.T = T;
    lm.kernel = kernel;
    if (a == Approx::nngp) lm.sets = build_neighbour_sets(coords, m);
    if (a == Approx::hsgp) lm.basis = build_basis(scale_coords(coords).s, {m, c});
    return lm;
  }

  CovParams params(double sigma_sq, double phi, double rho) const {
    return CovParams{sigma_sq, phi, rho, kernel};
  }

  SqrtFactor build(const CovParams& p) const {
    SqrtFactor f;
    f.P = TemporalMatrix::build(T > 1 ? p.rho : 0.0, T);
    switch (approx) {
      case Approx::nngp:
        f.F = approx_cholesky(compute_factor(coords, sets, p));
        break;
      case Approx::none: {
        Eigen::LLT<Eigen::MatrixXd> llt(build_sigma0(coords, p));
        if (llt.info() != Eigen::Success)
          throw factorisation_error("dense Cholesky of Sigma0 failed");
        f.F = llt.matrixL();
        break;
      }
      case Approx::hsgp:
        f.F = basis.factor(p.kernel, p.sigma_sq, p.phi);
        break;
    }
    return f;
  }
};

// log p(z* | Y, gamma) up to a constant, and its gradient
inline double latent_logtarget(const ModelData& model, const Eigen::VectorXd& gamma,
                               const SqrtFactor& f, const Eigen::VectorXd& zstar) {
  Eigen::VectorXd z = f.apply(zstar);
  return model.loglik(model.intensity(gamma, z)) - 0.5 * zstar.squaredNorm();
}

inline Eigen::VectorXd latent_gradient(const ModelData& model, const Eigen::VectorXd& gamma,
                                       const SqrtFactor& f, const Eigen::VectorXd& zstar) {
  Eigen::VectorXd z = f.apply(zstar);
  return f.apply_transpose(model.dloglik_dZ(gamma, z)) - zstar;
}

struct SampleBank {
  Eigen::MatrixXd zstar;  // latent_dim x draws
  double accept_rate = 0.0;
  double step_size = 0.0;
  std::uint64_t seed = 0;
};

struct MalaOptions {
  int warmup = 500;
  double target_accept = 0.574;
  double init_step = 0.1;
  double min_accept = 0.05;  // post-warmup failure threshold
};

namespace detail {

// One pass of MALA with optional dual-averaging step-size adaptation.
class MalaChain {
public:
  MalaChain(const ModelData& model, const Eigen::VectorXd& gamma, const SqrtFactor& f,
            Eigen::VectorXd init, double init_step)
      : model_(model), gamma_(gamma), f_(f), z_(std::move(init)), step_(init_step) {
    lp_ = latent_logtarget(model_, gamma_, f_, z_);
    grad_ = latent_gradient(model_, gamma_, f_, z_);
    if (!std::isfinite(lp_)) throw sampler_failure_error("nonfinite initial latent target");
  }

  // returns the acceptance probability of the proposal
  double step(Rng& rng) {
    const double e = step_, e2 = e * e;
    Eigen::VectorXd noise = rng.normals(z_.size());
    Eigen::VectorXd mean_fwd = z_ + 0.5 * e2 * grad_;
    Eigen::VectorXd zp = mean_fwd + e * noise;
    double lpp;
    Eigen::VectorXd gradp;
    bool finite = true;
    try {
      lpp = latent_logtarget(model_, gamma_, f_, zp);
      gradp = latent_gradient(model_, gamma_, f_, zp);
      finite = std::isfinite(lpp);
    } catch (const numeric_error&) {
      finite = false;
      lpp = -std::numeric_limits<double>::infinity();
    }
    double alpha = 0.0;
    if (finite) {
      double lq_fwd = -(zp - mean_fwd).squaredNorm() / (2 * e2);
      double lq_rev = -(z_ - (zp + 0.5 * e2 * gradp)).squaredNorm() / (2 * e2);
      double la = lpp - lp_ + lq_rev - lq_fwd;
      alpha = la >= 0 ? 1.0 : std::exp(la);
      if (rng.uniform() < alpha) {
        z_ = std::move(zp);
        lp_ = lpp;
        grad_ = std::move(gradp);
      }
    }
    return alpha;
  }

  void adapt(int warmup, double target, Rng& rng) {
    if (warmup < 1) return;
    double mu = std::log(10.0 * step_);
    double log_eps = std::log(step_), log_eps_bar = 0.0, hbar = 0.0;
    const double gam = 0.05, t0 = 10.0, kappa = 0.75;
    for (int t = 1; t <= warmup; ++t) {
      step_ = std::exp(log_eps);
      double alpha = step(rng);
      double eta = 1.0 / (t + t0);
      hbar = (1 - eta) * hbar + eta * (target - alpha);
      log_eps = mu - std::sqrt(static_cast<double>(t)) / gam * hbar;
      double w = std::pow(t, -kappa);
      log_eps_bar = w * log_eps + (1 - w) * log_eps_bar;
    }
    step_ = std::exp(log_eps_bar);
  }

  const Eigen::VectorXd& state() const { return z_; }
  double step_size() const { return step_; }
  void set_step(double s) { step_ = s; }
  double logtarget() const { return lp_; }

private:
  const ModelData& model_;
  const Eigen::VectorXd& gamma_;
  const SqrtFactor& f_;
  Eigen::VectorXd z_;
  double step_;
  double lp_ = 0.0;
  Eigen::VectorXd grad_;
};

}  // namespace detail

// Draws m_k samples of z* from p(z* | Y, gamma) by MALA with dual-averaging
// warmup. `state` carries the chain across calls (outer fitting iterations);
// fixed seeds give bit-identical banks.
inline SampleBank sample_latent(const ModelData& model, const Eigen::VectorXd& gamma,
                                const SqrtFactor& f, int m_k, const MalaOptions& opts,
                                std::uint64_t seed, Eigen::VectorXd* state = nullptr,
                                double* step_state = nullptr) {
  if (m_k < 1) throw config_error("m_k must be >= 1");
  Rng rng(seed);
  Eigen::VectorXd init = (state && state->size() == f.latent_dim())
                             ? *state
                             : Eigen::VectorXd::Zero(f.latent_dim());
  double step0 = (step_state && *step_state > 0) ? *step_state : opts.init_step;
  detail::MalaChain chain(model, gamma, f, std::move(init), step0);
  chain.adapt(opts.warmup, opts.target_accept, rng);

  SampleBank bank;
  bank.zstar.resize(f.latent_dim(), m_k);
  bank.seed = seed;
  double acc = 0.0;
  for (int s = 0; s < m_k; ++s) {
    acc += chain.step(rng);
    bank.zstar.col(s) = chain.state();
  }
  bank.accept_rate = acc / m_k;
  bank.step_size = chain.step_size();
  if (bank.accept_rate < opts.min_accept)
    throw sampler_failure_error("MALA acceptance rate " + std::to_string(bank.accept_rate) +
                                " below " + std::to_string(opts.min_accept) +
                                " after warmup (step size " + std::to_string(bank.step_size) +
                                ")");
  if (state) *state = chain.state();
  if (step_state) *step_state = chain.step_size();
  return bank;
}

// ---------------------------------------------------------------------------
// Bayesian fitting
// ---------------------------------------------------------------------------

struct Priors {
  Eigen::VectorXd gamma_mean;  // empty = all zeros
  Eigen::VectorXd gamma_sd;    // empty = all 5
  double sigma_scale = 0.5;    // half-normal on sigma
  double phi_scale = 0.5;      // half-normal on phi

  void validate() const {
    if (gamma_sd.size() && gamma_sd.minCoeff() <= 0) throw config_error("prior sds must be > 0");
    if (sigma_scale <= 0 || phi_scale <= 0) throw config_error("prior scales must be > 0");
  }
};

struct BayesOptions {
  int chains = 2;
  int iter_warmup = 500;
  int iter_sampling = 500;
  MalaOptions mala;  // init step for the latent block
  double rhat_limit = 0.0;  // 0 disables the check
};

struct BayesResult {
  std::vector<std::string> names;  // gamma_1..gamma_Q, sigma, phi [, rho]
  Eigen::MatrixXd draws;           // params x (chains * iter_sampling)
  Eigen::MatrixXd zstar;           // latent_dim x (chains * iter_sampling)
  Eigen::VectorXd mean, sd, q05, q95, rhat;
  double accept_z = 0.0, accept_gamma = 0.0, accept_theta = 0.0;
  int chains = 0, iter_sampling = 0;
};

namespace detail {

inline double halfnormal_logpdf_on_log(double logv, double scale) {
  double v = std::exp(logv);
  return -0.5 * v * v / (scale * scale) + logv;  // includes the Jacobian
}

// split R-hat over chains for one parameter
inline double split_rhat(const std::vector<Eigen::VectorXd>& chains) {
  std::vector<Eigen::VectorXd> halves;
  for (const auto& c : chains) {
    int h = static_cast<int>(c.size()) / 2;
    if (h < 2) return std::numeric_limits<double>::quiet_NaN();
    halves.push_back(c.head(h));
    halves.push_back(c.tail(h));
  }
  int m = static_cast<int>(halves.size());
  int nn = static_cast<int>(halves[0].size());
  Eigen::VectorXd means(m), vars(m);
  for (int j = 0; j < m; ++j) {
    means(j) = halves[j].mean();
    vars(j) = (halves[j].array() - means(j)).square().sum() / (nn - 1);
  }
  double W = vars.mean();
  double B = nn * (means.array() - means.mean()).square().sum() / (m - 1);
  if (W <= 0) return 1.0;
  double var_plus = (nn - 1.0) / nn * W + B / nn;
  return std::sqrt(var_plus / W);
}

struct BayesChainOut {
  Eigen::MatrixXd draws;
  Eigen::MatrixXd zstar;
  double acc_z = 0, acc_g = 0, acc_t = 0;
};

}  // namespace detail

// Blockwise MCMC over (gamma, theta, z*): MALA on the standardised latent
// field and on gamma, adaptive random-walk Metropolis on the unconstrained
// covariance parameters (log sigma, log phi, atanh rho). The non-centred
// parameterisation keeps z* standard normal under every theta.
inline BayesResult bayes_fit(const ModelData& model, const LatentModel& lm, const Priors& priors_in,
                             const BayesOptions& opts, std::uint64_t seed) {
  Priors priors = priors_in;
  priors.validate();
  const int Q = model.q_total();
  if (priors.gamma_mean.size() == 0) priors.gamma_mean = Eigen::VectorXd::Zero(Q);
  if (priors.gamma_sd.size() == 0) priors.gamma_sd = Eigen::VectorXd::Constant(Q, 5.0);
  if (priors.gamma_mean.size() != Q || priors.gamma_sd.size() != Q)
    throw config_error("gamma prior length mismatch");
  const bool with_rho = lm.T > 1;
  const int ntheta = with_rho ? 3 : 2;

  auto run_chain = [&](int chain_id) {
    Rng rng(Rng::derive(seed, 1000 + chain_id));
    // initial values: prior means, mild theta
    Eigen::VectorXd gamma = priors.gamma_mean;
    Eigen::VectorXd u(ntheta);  // log sigma, log phi, atanh rho
    u(0) = std::log(0.5 * priors.sigma_scale + 0.2);
    u(1) = std::log(0.5 * priors.phi_scale + 0.2);
    if (with_rho) u(2) = 0.0;
    auto theta_of = [&](const Eigen::VectorXd& uu) {
      return lm.params(std::exp(2 * uu(0)), std::exp(uu(1)), with_rho ? std::tanh(uu(2)) : 0.0);
    };
    auto theta_logprior = [&](const Eigen::VectorXd& uu) {
      double lp = detail::halfnormal_logpdf_on_log(uu(0), priors.sigma_scale) +
                  detail::halfnormal_logpdf_on_log(uu(1), priors.phi_scale);
      if (with_rho) lp += std::log1p(-sq(std::tanh(uu(2))));  // uniform via atanh
      return lp;
    };
    auto gamma_logprior = [&](const Eigen::VectorXd& g) {
      return -0.5 * ((g - priors.gamma_mean).array() / priors.gamma_sd.array()).square().sum();
    };
    auto gamma_prior_grad = [&](const Eigen::VectorXd& g) {
      return (-(g - priors.gamma_mean).array() / priors.gamma_sd.array().square()).matrix();
    };

    SqrtFactor f = lm.build(theta_of(u));
    Eigen::VectorXd zstar = Eigen::VectorXd::Zero(f.latent_dim());

    double step_z = opts.mala.init_step, step_g = 0.05;
    Eigen::VectorXd theta_scale = Eigen::VectorXd::Constant(ntheta, 0.15);
    double mu_z = std::log(10 * step_z), log_ez = std::log(step_z), log_ezb = 0, hbar_z = 0;
    double mu_g = std::log(10 * step_g), log_eg = std::log(step_g), log_egb = 0, hbar_g = 0;
    const double gam = 0.05, t0 = 10.0, kappa = 0.75;

    double lp_y = model.loglik(model.intensity(gamma, f.apply(zstar)));
    if (!std::isfinite(lp_y)) throw chain_failure_error("nonfinite initial posterior");

    int total = opts.iter_warmup + opts.iter_sampling;
    detail::BayesChainOut out;
    out.draws.resize(Q + ntheta, opts.iter_sampling);
    out.zstar.resize(f.latent_dim(), opts.iter_sampling);
    double acc_z = 0, acc_g = 0, acc_t = 0;

    for (int it = 1; it <= total; ++it) {
      bool warm = it <= opts.iter_warmup;
      // --- z* block (MALA) ---
      {
        Eigen::VectorXd grad = latent_gradient(model, gamma, f, zstar);
        double lp = lp_y - 0.5 * zstar.squaredNorm();
        double e2 = step_z * step_z;
        Eigen::VectorXd mean_fwd = zstar + 0.5 * e2 * grad;
        Eigen::VectorXd zp = mean_fwd + step_z * rng.normals(zstar.size());
        double alpha = 0.0;
        try {
          double lpy_p = model.loglik(model.intensity(gamma, f.apply(zp)));
          double lpp = lpy_p - 0.5 * zp.squaredNorm();
          Eigen::VectorXd gradp = latent_gradient(model, gamma, f, zp);
          double lq_fwd = -(zp - mean_fwd).squaredNorm() / (2 * e2);
          double lq_rev = -(zstar - (zp + 0.5 * e2 * gradp)).squaredNorm() / (2 * e2);
          double la = lpp - lp + lq_rev - lq_fwd;
          alpha = la >= 0 ? 1.0 : std::exp(la);
          if (std::isfinite(lpp) && rng.uniform() < alpha) {
            zstar = zp;
            lp_y = lpy_p;
          }
        } catch (const numeric_error&) {
        }
        if (warm) {
          double eta = 1.0 / (it + t0);
          hbar_z = (1 - eta) * hbar_z + eta * (opts.mala.target_accept - alpha);
          log_ez = mu_z - std::sqrt(static_cast<double>(it)) / gam * hbar_z;
          double w = std::pow(it, -kappa);
          log_ezb = w * log_ez + (1 - w) * log_ezb;
          step_z = std::exp(warm ? log_ez : log_ezb);
          if (it == opts.iter_warmup) step_z = std::exp(log_ezb);
        } else {
          acc_z += alpha;
        }
      }
      // --- gamma block (MALA) ---
      {
        Eigen::VectorXd z = f.apply(zstar);
        Eigen::VectorXd lambda = model.intensity(gamma, z);
        Eigen::MatrixXd J = model.intensity_jacobian(gamma, z, lambda);
        Eigen::VectorXd score = (model.y.array() / lambda.array() - 1.0).matrix();
        Eigen::VectorXd grad = J.transpose() * score + gamma_prior_grad(gamma);
        double lp = lp_y + gamma_logprior(gamma);
        double e2 = step_g * step_g;
        Eigen::VectorXd mean_fwd = gamma + 0.5 * e2 * grad;
        Eigen::VectorXd gp = mean_fwd + step_g * rng.normals(Q);
        double alpha = 0.0;
        try {
          Eigen::VectorXd lambdap = model.intensity(gp, z);
          double lpy_p = model.loglik(lambdap);
          double lpp = lpy_p + gamma_logprior(gp);
          Eigen::MatrixXd Jp = model.intensity_jacobian(gp, z, lambdap);
          Eigen::VectorXd scorep = (model.y.array() / lambdap.array() - 1.0).matrix();
          Eigen::VectorXd gradp = Jp.transpose() * scorep + gamma_prior_grad(gp);
          double lq_fwd = -(gp - mean_fwd).squaredNorm() / (2 * e2);
          double lq_rev = -(gamma - (gp + 0.5 * e2 * gradp)).squaredNorm() / (2 * e2);
          double la = lpp - lp + lq_rev - lq_fwd;
          alpha = la >= 0 ? 1.0 : std::exp(la);
          if (std::isfinite(lpp) && rng.uniform() < alpha) {
            gamma = gp;
            lp_y = lpy_p;
          }
        } catch (const numeric_error&) {
        }
        if (warm) {
          double eta = 1.0 / (it + t0);
          hbar_g = (1 - eta) * hbar_g + eta * (opts.mala.target_accept - alpha);
          log_eg = mu_g - std::sqrt(static_cast<double>(it)) / gam * hbar_g;
          double w = std::pow(it, -kappa);
          log_egb = w * log_eg + (1 - w) * log_egb;
          step_g = std::exp(log_eg);
          if (it == opts.iter_warmup) step_g = std::exp(log_egb);
        } else {
          acc_g += alpha;
        }
      }
      // --- theta block (random-walk Metropolis on unconstrained scale) ---
      {
        Eigen::VectorXd up = u + theta_scale.cwiseProduct(rng.normals(ntheta));
        double alpha = 0.0;
        try {
          SqrtFactor fp = lm.build(theta_of(up));
          double lpy_p = model.loglik(model.intensity(gamma, fp.apply(zstar)));
          double la = (lpy_p + theta_logprior(up)) - (lp_y + theta_logprior(u));
          alpha = la >= 0 ? 1.0 : std::exp(la);
          if (std::isfinite(lpy_p) && rng.uniform() < alpha) {
            u = up;
            f = std::move(fp);
            lp_y = lpy_p;
          }
        } catch (const lgcp::error&) {
        }
        if (warm) {
          double g = std::pow(static_cast<double>(it), -0.6);
          theta_scale *= std::exp(g * (alpha - 0.35));
        } else {
          acc_t += alpha;
        }
      }
      if (!std::isfinite(lp_y))
        throw chain_failure_error("chain " + std::to_string(chain_id) +
                                  " diverged: nonfinite target at iteration " +
                                  std::to_string(it));
      if (!warm) {
        int s = it - opts.iter_warmup - 1;
        out.draws.col(s).head(Q) = gamma;
        out.draws(Q, s) = std::exp(u(0));  // sigma
        out.draws(Q + 1, s) = std::exp(u(1));
        if (with_rho) out.draws(Q + 2, s) = std::tanh(u(2));
        out.zstar.col(s) = zstar;
      }
    }
    out.acc_z = acc_z / opts.iter_sampling;
    out.acc_g = acc_g / opts.iter_sampling;
    out.acc_t = acc_t / opts.iter_sampling;
    return out;
  };

  std::vector<detail::BayesChainOut> outs(opts.chains);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errs(opts.chains);
  int hw = std::max(1, max_threads());
  for (int c = 0; c < opts.chains; ++c) {
    if (static_cast<int>(pool.size()) >= hw) {
      pool.front().join();
      pool.erase(pool.begin());
    }
    pool.emplace_back([&, c] {
      try {
        outs[c] = run_chain(c);
      } catch (...) {
        errs[c] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);

  BayesResult res;
  res.chains = opts.chains;
  res.iter_sampling = opts.iter_sampling;
  const int Qt = Q + ntheta;
  for (int i = 0; i < Q; ++i) res.names.push_back("gamma_" + std::to_string(i + 1));
  res.names.push_back("sigma");
  res.names.push_back("phi");
  if (with_rho) res.names.push_back("rho");

  res.draws.resize(Qt, opts.chains * opts.iter_sampling);
  res.zstar.resize(outs[0].zstar.rows(), opts.chains * opts.iter_sampling);
  for (int c = 0; c < opts.chains; ++c) {
    res.draws.middleCols(c * opts.iter_sampling, opts.iter_sampling) = outs[c].draws;
    res.zstar.middleCols(c * opts.iter_sampling, opts.iter_sampling) = outs[c].zstar;
    res.accept_z += outs[c].acc_z / opts.chains;
    res.accept_gamma += outs[c].acc_g / opts.chains;
    res.accept_theta += outs[c].acc_t / opts.chains;
  }
  res.mean.resize(Qt);
  res.sd.resize(Qt);
  res.q05.resize(Qt);
  res.q95.resize(Qt);
  res.rhat.resize(Qt);
  for (int p = 0; p < Qt; ++p) {
    Eigen::VectorXd row = res.draws.row(p);
    res.mean(p) = row.mean();
    res.sd(p) = std::sqrt((row.array() - res.mean(p)).square().sum() / (row.size() - 1));
    std::vector<double> sorted(row.data(), row.data() + row.size());
    std::sort(sorted.begin(), sorted.end());
    auto quant = [&](double q) {
      double pos = q * (sorted.size() - 1);
      int lo = static_cast<int>(pos);
      double fr = pos - lo;
      return sorted[lo] * (1 - fr) + sorted[std::min(lo + 1, (int)sorted.size() - 1)] * fr;
    };
    res.q05(p) = quant(0.05);
    res.q95(p) = quant(0.95);
    std::vector<Eigen::VectorXd> per_chain;
    for (int c = 0; c < opts.chains; ++c)
      per_chain.push_back(outs[c].draws.row(p).transpose());
    res.rhat(p) = detail::split_rhat(per_chain);
  }
  if (opts.rhat_limit > 0 && res.rhat.maxCoeff() > opts.rhat_limit)
    throw chain_failure_error("R-hat above limit: max " + std::to_string(res.rhat.maxCoeff()));
  return res;
}

}  // namespace lgcp

#endif
