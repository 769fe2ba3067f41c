#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include <Eigen/Dense>

#include "lgcp/hsgp.hpp"
#include "lgcp/rng.hpp"

using namespace lgcp;

namespace {

Eigen::MatrixXd grid_coords(int side, double lo, double hi) {
  Eigen::MatrixXd c(side * side, 2);
  double step = (hi - lo) / side;
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) {
      c(i * side + j, 0) = lo + (j + 0.5) * step;
      c(i * side + j, 1) = lo + (i + 0.5) * step;
    }
  return c;
}

Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd k(a.rows() * b.rows(), a.cols() * b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      k.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return k;
}

}  // namespace

TEST_CASE("coordinate scaling") {
  SECTION("already spanning [-1,1] is the identity") {
    Eigen::MatrixXd c(2, 2);
    c << -1, -1, 1, 1;
    ScaledCoords sc = scale_coords(c);
    CHECK((sc.s - c).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(sc.scale(0) == Catch::Approx(1.0));
  }
  SECTION("affine map of [0,10]") {
    Eigen::MatrixXd c(3, 2);
    c << 0, 0, 5, 2, 10, 4;
    ScaledCoords sc = scale_coords(c);
    CHECK(sc.s(0, 0) == Catch::Approx(-1.0));
    CHECK(sc.s(1, 0) == Catch::Approx(0.0));
    CHECK(sc.s(2, 0) == Catch::Approx(1.0));
    CHECK(sc.scale(0) == Catch::Approx(5.0));  // range/2
    CHECK(sc.scale(1) == Catch::Approx(2.0));
  }
  SECTION("degenerate extent rejected") {
    Eigen::MatrixXd c(2, 2);
    c << 0, 1, 0, 2;  // x constant
    CHECK_THROWS_AS(scale_coords(c), degenerate_extent_error);
  }
}

TEST_CASE("one-dimensional eigenpairs") {
  CHECK(hsgp_eigenvalue(1, 1.0) == Catch::Approx(sq(M_PI / 2)).epsilon(1e-12));
  CHECK(hsgp_eigenvalue(2, 2.0) == Catch::Approx(sq(M_PI / 2)).epsilon(1e-12));
  SECTION("Dirichlet boundary: eigenfunctions vanish at -L") {
    for (int j = 1; j <= 6; ++j) CHECK(hsgp_eigenfunction(j, 1.5, -1.5) == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("discretised orthonormality") {
    const double L = 2.0;
    const int npts = 10000;
    for (int a = 1; a <= 4; ++a)
      for (int b = a; b <= 4; ++b) {
        double acc = 0.0;
        for (int k = 0; k < npts; ++k) {
          double x = -L + (k + 0.5) * (2 * L / npts);
          acc += hsgp_eigenfunction(a, L, x) * hsgp_eigenfunction(b, L, x) * (2 * L / npts);
        }
        CHECK(acc == Catch::Approx(a == b ? 1.0 : 0.0).margin(1e-3));
      }
  }
}

TEST_CASE("spectral densities") {
  SECTION("squared exponential at omega = 0 in 2-D") {
    CHECK(spectral_density(Kernel::squared_exponential, 0.0, 1.0, 1.0, 2) ==
          Catch::Approx(M_PI).epsilon(1e-12));
  }
  SECTION("squared exponential density is the transform of the kernel") {
    // k(d) = (2pi)^-2 int S(|w|) exp(i w.d) dw; radial: Hankel-type quadrature
    double sigma_sq = 1.3, phi = 0.8, d = 0.6;
    double target = cov_value(Kernel::squared_exponential, d, sigma_sq, phi);
    // 2-D inverse transform of a radial function: (1/2pi) int_0^inf S(r) J0(r d) r dr
    double acc = 0.0;
    const int nr = 40000;
    const double rmax = 60.0;
    double dr = rmax / nr;
    for (int i = 0; i < nr; ++i) {
      double r = (i + 0.5) * dr;
      acc += spectral_density(Kernel::squared_exponential, r, sigma_sq, phi, 2) *
             std::cyl_bessel_j(0, r * d) * r * dr;
    }
    CHECK(acc / (2 * M_PI) == Catch::Approx(target).epsilon(1e-4));
  }
  SECTION("squared exponential is monotone decreasing in omega") {
    double prev = spectral_density(Kernel::squared_exponential, 0.0, 1.3, 0.7, 2);
    for (double w = 0.2; w < 20; w += 0.2) {
      double s = spectral_density(Kernel::squared_exponential, w, 1.3, 0.7, 2);
      CHECK(s < prev);
      prev = s;
    }
  }
  SECTION("densities integrate back to sigma_sq over R^2") {
    // (2pi)^-2 * int S(|w|) dw = sigma_sq; radial quadrature
    for (Kernel k : {Kernel::exponential, Kernel::squared_exponential}) {
      double sigma_sq = 1.7, phi = 0.6;
      double integral = 0.0;
      const int nr = 200000;
      const double rmax = 400.0;
      double dr = rmax / nr;
      for (int i = 0; i < nr; ++i) {
        double r = (i + 0.5) * dr;
        integral += spectral_density(k, r, sigma_sq, phi, 2) * 2 * M_PI * r * dr;
      }
      double back = integral / sq(2 * M_PI);
      CHECK(back == Catch::Approx(sigma_sq).epsilon(0.01));
    }
  }
  SECTION("dphi derivative matches finite differences") {
    const double h = 1e-6;
    for (Kernel k : {Kernel::exponential, Kernel::squared_exponential})
      for (double w : {0.0, 0.5, 2.0, 7.0}) {
        double g = spectral_density_dphi(k, w, 1.2, 0.8, 2);
        double fd = (spectral_density(k, w, 1.2, 0.8 + h, 2) -
                     spectral_density(k, w, 1.2, 0.8 - h, 2)) /
                    (2 * h);
        CHECK(g == Catch::Approx(fd).margin(1e-5));
      }
  }
}

TEST_CASE("tensor basis") {
  Eigen::MatrixXd coords = grid_coords(10, 0.0, 1.0);
  ScaledCoords sc = scale_coords(coords);

  SECTION("entries bounded by 1/L") {
    HsgpBasis b = build_basis(sc.s, {7, 2.0});
    CHECK(b.phi.cwiseAbs().maxCoeff() <= 1.0 / b.L + 1e-12);
    CHECK(b.k() == 49);
  }
  SECTION("spectral weights decrease with frequency for squared exponential") {
    HsgpBasis b = build_basis(sc.s, {6, 2.0});
    Eigen::VectorXd lam = b.lambda(Kernel::squared_exponential, 1.0, 0.5);
    for (int i = 0; i < b.k(); ++i)
      for (int j = 0; j < b.k(); ++j)
        if (b.omega(i) < b.omega(j)) CHECK(lam(i) >= lam(j) - 1e-15);
  }
  SECTION("Phi Lambda Phi^T approximates Sigma0 on interior cells and improves with m") {
    CovParams p{1.0, 0.5, 0.0, Kernel::squared_exponential};
    Eigen::MatrixXd s0 = build_sigma0(sc.s, p);
    const double c = 2.0;
    std::vector<int> ms{5, 10, 25};
    std::vector<double> errs;
    // interior cells: more than (c-1)/2 away from the scaled data boundary
    std::vector<int> interior;
    double margin = 1.0 - (c - 1.0) / 2.0;
    for (int i = 0; i < sc.s.rows(); ++i)
      if (std::abs(sc.s(i, 0)) < margin && std::abs(sc.s(i, 1)) < margin) interior.push_back(i);
    REQUIRE(!interior.empty());
    for (int m : ms) {
      HsgpBasis b = build_basis(sc.s, {m, c});
      Eigen::VectorXd lam = b.lambda(p.kernel, p.sigma_sq, p.phi);
      Eigen::MatrixXd approx = b.phi * lam.asDiagonal() * b.phi.transpose();
      double worst = 0.0;
      for (int i : interior)
        for (int j : interior)
          worst = std::max(worst, std::abs(approx(i, j) - s0(i, j)) / s0(i, i));
      errs.push_back(worst);
    }
    CHECK(errs[2] < 0.05);
    CHECK(errs[1] <= errs[0] + 1e-12);
    CHECK(errs[2] <= errs[1] + 1e-12);
  }
}

TEST_CASE("linear predictor") {
  Eigen::MatrixXd coords = grid_coords(2, 0.0, 1.0);
  ScaledCoords sc = scale_coords(coords);
  HsgpBasis b = build_basis(sc.s, {4, 2.0});
  CovParams p{0.8, 0.9, 0.5, Kernel::squared_exponential};
  TemporalMatrix P = TemporalMatrix::build(p.rho, 2);
  Eigen::MatrixXd F = b.factor(p.kernel, p.sigma_sq, p.phi);

  SECTION("zero coefficients give the zero field") {
    Eigen::VectorXd z = hsgp_linear_predictor(F, P, Eigen::VectorXd::Zero(16 * 2));
    CHECK(z.cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("T = 1 reduces to F beta") {
    TemporalMatrix P1 = TemporalMatrix::build(0.0, 1);
    Rng rng(3);
    Eigen::VectorXd beta = rng.normals(16);
    Eigen::VectorXd z = hsgp_linear_predictor(F, P1, beta);
    CHECK((z - F * beta).cwiseAbs().maxCoeff() < 1e-14);
  }
  SECTION("dimension mismatch") {
    CHECK_THROWS_AS(hsgp_linear_predictor(F, P, Eigen::VectorXd::Zero(5)), dimension_error);
  }
  SECTION("sample covariance matches P ⊗ Phi Lambda Phi^T") {
    Rng rng(7);
    const int draws = 20000;
    int dim = 4 * 2;
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(dim, dim);
    for (int s = 0; s < draws; ++s) {
      Eigen::VectorXd z = hsgp_linear_predictor(F, P, rng.normals(16 * 2));
      acc += z * z.transpose();
    }
    acc /= draws;
    Eigen::MatrixXd target = kron(P.P, F * F.transpose());
    double rel = (acc - target).cwiseAbs().maxCoeff() / target.cwiseAbs().maxCoeff();
    CHECK(rel < 0.05);
  }
}

TEST_CASE("conditional Poisson gradient through the spectral weights") {
  Eigen::MatrixXd coords = grid_coords(3, 0.0, 1.0);
  ScaledCoords sc = scale_coords(coords);
  HsgpBasis b = build_basis(sc.s, {3, 2.0});
  CovParams p{0.7, 0.6, 0.4, Kernel::squared_exponential};
  TemporalMatrix P = TemporalMatrix::build(p.rho, 2);
  const int n = 9, T = 2, K = 9;
  Rng rng(19);
  Eigen::VectorXd beta = rng.normals(K * T);
  Eigen::VectorXd offset = Eigen::VectorXd::Constant(n * T, 2.0);

  auto lambda_of = [&](double ss, double ph) {
    Eigen::VectorXd z = hsgp_linear_predictor(b.factor(p.kernel, ss, ph), P, beta);
    return (offset.array().log() + z.array()).exp().matrix().eval();
  };
  Eigen::VectorXd lam = lambda_of(p.sigma_sq, p.phi);
  Eigen::VectorXd y(n * T);
  for (int i = 0; i < n * T; ++i) y(i) = std::floor(3 * rng.uniform());

  SECTION("y = lambda gives zero gradient; beta = 0 gives zero gradient") {
    Eigen::Vector2d g0 = hsgp_gradient(lam, lam, b, P, beta,
                                       b.dhalf_dsigma(p.kernel, p.sigma_sq, p.phi),
                                       b.dhalf_dphi(p.kernel, p.sigma_sq, p.phi));
    CHECK(g0.cwiseAbs().maxCoeff() < 1e-12);
    Eigen::VectorXd zero = Eigen::VectorXd::Zero(K * T);
    Eigen::Vector2d gz = hsgp_gradient(y, y, b, P, zero,
                                       b.dhalf_dsigma(p.kernel, p.sigma_sq, p.phi),
                                       b.dhalf_dphi(p.kernel, p.sigma_sq, p.phi));
    CHECK(gz.cwiseAbs().maxCoeff() < 1e-12);
  }
  SECTION("matches finite differences of the Poisson log-likelihood") {
    auto pois = [&](double ss, double ph) {
      Eigen::VectorXd l = lambda_of(ss, ph);
      double ll = 0.0;
      for (int i = 0; i < n * T; ++i) ll += y(i) * std::log(l(i)) - l(i);
      return ll;
    };
    Eigen::Vector2d g = hsgp_gradient(y, lam, b, P, beta,
                                      b.dhalf_dsigma(p.kernel, p.sigma_sq, p.phi),
                                      b.dhalf_dphi(p.kernel, p.sigma_sq, p.phi));
    const double h = 1e-6;
    double fd_s = (pois(p.sigma_sq + h, p.phi) - pois(p.sigma_sq - h, p.phi)) / (2 * h);
    double fd_p = (pois(p.sigma_sq, p.phi + h) - pois(p.sigma_sq, p.phi - h)) / (2 * h);
    CHECK(g(0) == Catch::Approx(fd_s).epsilon(1e-5));
    CHECK(g(1) == Catch::Approx(fd_p).epsilon(1e-5));
  }
}
