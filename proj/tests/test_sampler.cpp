#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include <Eigen/Dense>

#include "fixtures.hpp"
#include "lgcp/sampler.hpp"

using namespace lgcp;
using lgcp::test::grid_coords;

namespace {

// batch-means Monte Carlo standard error of the mean of one coordinate
double batch_mcse(const Eigen::VectorXd& xs, int nbatch = 25) {
  int len = static_cast<int>(xs.size()) / nbatch;
  Eigen::VectorXd means(nbatch);
  for (int b = 0; b < nbatch; ++b) means(b) = xs.segment(b * len, len).mean();
  double m = means.mean();
  double v = (means.array() - m).square().sum() / (nbatch - 1);
  return std::sqrt(v / nbatch);
}

ModelData flat_model(int n, double offset = 1e-12) {
  ModelData md;
  md.n = n;
  md.T = 1;
  md.y = Eigen::VectorXd::Zero(n);
  md.X = Eigen::MatrixXd::Ones(n, 1);
  md.log_offset = Eigen::VectorXd::Constant(n, std::log(offset));
  return md;
}

}  // namespace

TEST_CASE("square-root factor applications are adjoint") {
  Rng rng(3);
  Eigen::MatrixXd coords = grid_coords(3);
  CovParams p{0.7, 1.2, 0.5, Kernel::exponential};
  for (Approx a : {Approx::none, Approx::nngp, Approx::hsgp}) {
    LatentModel lm = LatentModel::make(a, coords, 2, p.kernel, 4, 2.0);
    SqrtFactor f = lm.build(p);
    Eigen::VectorXd z = rng.normals(f.latent_dim());
    Eigen::VectorXd v = rng.normals(f.field_dim());
    CHECK(f.apply(z).dot(v) == Catch::Approx(z.dot(f.apply_transpose(v))).epsilon(1e-10));
  }
}

TEST_CASE("latent gradient") {
  Rng rng(5);
  Eigen::MatrixXd coords = grid_coords(3);
  CovParams p{0.6, 1.0, 0.4, Kernel::exponential};

  SECTION("stationary point: z* = 0 and Y = lambda(gamma, 0)") {
    ModelData md;
    md.n = 9;
    md.T = 1;
    md.X = Eigen::MatrixXd::Ones(9, 1);
    md.log_offset = Eigen::VectorXd::Constant(9, std::log(2.0));
    md.y = Eigen::VectorXd::Constant(9, 2.0);  // = offset * exp(0)
    LatentModel lm = LatentModel::make(Approx::none, coords, 1, p.kernel);
    SqrtFactor f = lm.build(p);
    Eigen::VectorXd g = latent_gradient(md, Eigen::VectorXd::Zero(1), f,
                                        Eigen::VectorXd::Zero(f.latent_dim()));
    CHECK(g.cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("matches finite differences for all factor types, grid model") {
    ModelData md;
    md.n = 9;
    md.T = 2;
    md.X = Eigen::MatrixXd::Ones(18, 1);
    md.log_offset = Eigen::VectorXd::Zero(18);
    md.y.resize(18);
    for (int i = 0; i < 18; ++i) md.y(i) = std::floor(3 * rng.uniform());
    Eigen::VectorXd gamma(1);
    gamma << 0.2;
    for (Approx a : {Approx::none, Approx::nngp, Approx::hsgp}) {
      LatentModel lm = LatentModel::make(a, coords, 2, p.kernel, 4, 2.0);
      SqrtFactor f = lm.build(p);
      Eigen::VectorXd z = rng.normals(f.latent_dim()) * 0.5;
      if (a == Approx::hsgp) CHECK(f.latent_dim() == 16 * 2);
      Eigen::VectorXd g = latent_gradient(md, gamma, f, z);
      const double h = 1e-6;
      for (int i = 0; i < std::min<int>(8, f.latent_dim()); ++i) {
        Eigen::VectorXd up = z, dn = z;
        up(i) += h;
        dn(i) -= h;
        double fd = (latent_logtarget(md, gamma, f, up) - latent_logtarget(md, gamma, f, dn)) /
                    (2 * h);
        CHECK(g(i) == Catch::Approx(fd).epsilon(1e-6).margin(1e-8));
      }
    }
  }

  SECTION("matches finite differences for a region model") {
    ModelData md;
    md.n = 9;
    md.T = 1;
    IntersectionMap im;
    im.n_regions = 3;
    for (int i = 0; i < 9; ++i) im.entries.push_back({i, i / 3, 1.0 / 3.0});
    md.design = build_region_design(im, 9, 3, 1);
    md.Xr = Eigen::MatrixXd::Ones(3, 1);
    md.X.resize(9, 0);
    md.log_offset = Eigen::VectorXd::Zero(3);
    md.y.resize(3);
    md.y << 2, 0, 5;
    Eigen::VectorXd gamma(1);
    gamma << 0.1;
    LatentModel lm = LatentModel::make(Approx::nngp, coords, 1, p.kernel, 4);
    SqrtFactor f = lm.build(p);
    Eigen::VectorXd z = rng.normals(f.latent_dim()) * 0.4;
    Eigen::VectorXd g = latent_gradient(md, gamma, f, z);
    const double h = 1e-6;
    for (int i = 0; i < 9; ++i) {
      Eigen::VectorXd up = z, dn = z;
      up(i) += h;
      dn(i) -= h;
      double fd =
          (latent_logtarget(md, gamma, f, up) - latent_logtarget(md, gamma, f, dn)) / (2 * h);
      CHECK(g(i) == Catch::Approx(fd).epsilon(1e-6).margin(1e-8));
    }
  }
}

TEST_CASE("MALA on a flat likelihood samples the standard normal prior") {
  // offset -> 0 makes the Poisson factor constant, so the target is N(0, I)
  ModelData md = flat_model(4);
  LatentModel lm = LatentModel::make(Approx::none, grid_coords(2), 1, Kernel::exponential);
  SqrtFactor f = lm.build({1.0, 1.0, 0.0, Kernel::exponential});
  MalaOptions opts;
  opts.warmup = 600;
  SampleBank bank = sample_latent(md, Eigen::VectorXd::Zero(1), f, 100000, opts, 42);

  for (int i = 0; i < 4; ++i) {
    Eigen::VectorXd xs = bank.zstar.row(i);
    double mean = xs.mean();
    double var = (xs.array() - mean).square().sum() / (xs.size() - 1);
    CHECK(std::abs(mean) < 3 * batch_mcse(xs) + 1e-12);
    CHECK(var == Catch::Approx(1.0).epsilon(0.10));
  }
  // detailed-balance smoke bound from the acceptance-criteria list
  double grand_var = 0;
  for (int i = 0; i < 4; ++i) {
    Eigen::VectorXd xs = bank.zstar.row(i);
    grand_var += (xs.array() - xs.mean()).square().sum() / (xs.size() - 1) / 4.0;
  }
  CHECK(grand_var == Catch::Approx(1.0).epsilon(0.02));
  CHECK(bank.accept_rate > 0.4);
  CHECK(bank.accept_rate < 0.75);
}

TEST_CASE("single-cell posterior mean matches an importance-sampling oracle") {
  // one cell, T = 1: lambda = r exp(gamma + sigma z), z ~ N(0,1) a priori
  ModelData md;
  md.n = 1;
  md.T = 1;
  md.X = Eigen::MatrixXd::Ones(1, 1);
  md.log_offset = Eigen::VectorXd::Constant(1, std::log(2.0));
  md.y = Eigen::VectorXd::Constant(1, 3.0);
  Eigen::VectorXd gamma(1);
  gamma << -0.2;
  const double sigma = 0.8;

  Eigen::MatrixXd c(1, 2);
  c << 0, 0;
  SqrtFactor f;
  f.P = TemporalMatrix::build(0.0, 1);
  f.F = Eigen::MatrixXd::Constant(1, 1, sigma);

  // oracle: prior draws weighted by the Poisson likelihood
  Rng rng(7);
  double num = 0, den = 0;
  for (int i = 0; i < 10000000; ++i) {
    double z = rng.normal();
    double lam = 2.0 * std::exp(gamma(0) + sigma * z);
    double w = std::exp(md.y(0) * std::log(lam) - lam);
    num += w * lam;
    den += w;
  }
  double oracle = num / den;

  MalaOptions opts;
  opts.warmup = 500;
  SampleBank bank = sample_latent(md, gamma, f, 200000, opts, 11);
  double acc = 0;
  for (int s = 0; s < bank.zstar.cols(); ++s)
    acc += 2.0 * std::exp(gamma(0) + sigma * bank.zstar(0, s));
  acc /= bank.zstar.cols();
  CHECK(acc == Catch::Approx(oracle).epsilon(0.02));
}

TEST_CASE("fixed seeds give bit-identical banks; bad step sizes fail loudly") {
  auto sim = lgcp::test::simulate_grid(3, 1, Eigen::VectorXd::Constant(1, 0.3),
                                       {0.5, 1.0, 0.0, Kernel::exponential}, 99);
  LatentModel lm = LatentModel::make(Approx::nngp, sim.coords, 1, Kernel::exponential, 5);
  SqrtFactor f = lm.build({0.5, 1.0, 0.0, Kernel::exponential});
  MalaOptions opts;
  opts.warmup = 100;
  SampleBank a = sample_latent(sim.model, sim.gamma_true, f, 50, opts, 1234);
  SampleBank b = sample_latent(sim.model, sim.gamma_true, f, 50, opts, 1234);
  CHECK(a.zstar == b.zstar);
  CHECK(a.accept_rate == b.accept_rate);

  MalaOptions bad;
  bad.warmup = 0;
  bad.init_step = 200.0;  // hopeless proposals, acceptance collapses
  CHECK_THROWS_AS(sample_latent(sim.model, sim.gamma_true, f, 60, bad, 5),
                  sampler_failure_error);
}

TEST_CASE("bayes_fit: prior-only run reproduces the prior") {
  // near-zero offset and zero counts: the posterior is the prior
  ModelData md = flat_model(4);
  LatentModel lm = LatentModel::make(Approx::none, grid_coords(2), 1, Kernel::exponential);
  Priors priors;
  BayesOptions opts;
  opts.chains = 2;
  opts.iter_warmup = 1500;
  opts.iter_sampling = 12000;
  BayesResult res = bayes_fit(md, lm, priors, opts, 31);

  // gamma ~ N(0,5); sigma, phi half-normal(0.5)
  double halfn_sd = 0.5 * std::sqrt(1.0 - 2.0 / M_PI);
  double halfn_mean = 0.5 * std::sqrt(2.0 / M_PI);
  CHECK(res.sd(0) == Catch::Approx(5.0).epsilon(0.10));
  CHECK(res.mean(1) == Catch::Approx(halfn_mean).epsilon(0.10));
  CHECK(res.sd(1) == Catch::Approx(halfn_sd).epsilon(0.10));
  CHECK(res.sd(2) == Catch::Approx(halfn_sd).epsilon(0.10));
}

TEST_CASE("bayes_fit: posterior intervals cover the truth on simulated data") {
  const double gamma0 = -1.0, sigma = 0.5, phi = 0.3;
  int cover_g = 0, cover_s = 0, cover_p = 0;
  double rhat_worst = 0.0;
  const int reps = 20;
  for (int rep = 0; rep < reps; ++rep) {
    auto sim = lgcp::test::simulate_grid(8, 1, Eigen::VectorXd::Constant(1, gamma0),
                                         {sigma * sigma, phi, 0.0, Kernel::exponential},
                                         500 + rep, 1.0, 1.0 / 8.0);
    LatentModel lm = LatentModel::make(Approx::none, sim.coords, 1, Kernel::exponential);
    BayesOptions opts;
    opts.chains = 2;
    opts.iter_warmup = 600;
    opts.iter_sampling = 900;
    BayesResult res = bayes_fit(sim.model, lm, Priors{}, opts, 700 + rep);
    if (res.q05(0) <= gamma0 && gamma0 <= res.q95(0)) ++cover_g;
    if (res.q05(1) <= sigma && sigma <= res.q95(1)) ++cover_s;
    if (res.q05(2) <= phi && phi <= res.q95(2)) ++cover_p;
    rhat_worst = std::max(rhat_worst, res.rhat.maxCoeff());
  }
  CHECK(cover_g >= 16);
  CHECK(cover_s >= 16);
  CHECK(cover_p >= 16);
  // multi-chain diagnostic on the last fixture
  CHECK(rhat_worst < 1.3);
}

TEST_CASE("bayes_fit R-hat on the standard small fixture") {
  auto sim = lgcp::test::simulate_grid(6, 1, Eigen::VectorXd::Constant(1, 0.5),
                                       {0.25, 0.3, 0.0, Kernel::exponential}, 81, 2.0,
                                       1.0 / 6.0);
  LatentModel lm = LatentModel::make(Approx::none, sim.coords, 1, Kernel::exponential);
  BayesOptions opts;
  opts.chains = 2;
  opts.iter_warmup = 1200;
  opts.iter_sampling = 2500;
  BayesResult res = bayes_fit(sim.model, lm, Priors{}, opts, 17);
  CHECK(res.rhat.maxCoeff() < 1.05);
  CHECK(res.draws.rows() == 3);  // gamma, sigma, phi
}
