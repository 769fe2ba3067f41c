#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include <Eigen/Dense>

#include "lgcp/covariance.hpp"
#include "lgcp/rng.hpp"

using namespace lgcp;

namespace {

Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd k(a.rows() * b.rows(), a.cols() * b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      k.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return k;
}

Eigen::MatrixXd grid_coords(int side, double spacing = 1.0) {
  Eigen::MatrixXd c(side * side, 2);
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) {
      c(i * side + j, 0) = spacing * j;
      c(i * side + j, 1) = spacing * i;
    }
  return c;
}

}  // namespace

TEST_CASE("cov_value closed forms") {
  CHECK(cov_value(Kernel::exponential, 0.0, 2.5, 1.0) == Catch::Approx(2.5));
  CHECK(cov_value(Kernel::squared_exponential, 0.0, 2.5, 1.0) == Catch::Approx(2.5));
  CHECK(cov_value(Kernel::exponential, 2.0, 1.0, 2.0) == Catch::Approx(std::exp(-1.0)));
  CHECK(cov_value(Kernel::squared_exponential, 1.0, 3.0, 1.0) ==
        Catch::Approx(3.0 * std::exp(-1.0)));

  // nonincreasing in d, decaying to zero
  for (Kernel k : {Kernel::exponential, Kernel::squared_exponential}) {
    double prev = cov_value(k, 0.0, 1.7, 0.8);
    for (double d = 0.1; d < 10.0; d += 0.1) {
      double v = cov_value(k, d, 1.7, 0.8);
      CHECK(v <= prev + 1e-15);
      prev = v;
    }
    CHECK(cov_value(k, 1e3, 1.7, 0.8) < 1e-12);
  }
}

TEST_CASE("build_sigma0") {
  SECTION("single site") {
    Eigen::MatrixXd c(1, 2);
    c << 0.3, 0.4;
    Eigen::MatrixXd s = build_sigma0(c, {2.0, 1.0, 0.0, Kernel::exponential});
    CHECK(s(0, 0) == Catch::Approx(2.0).epsilon(1e-7));
  }
  SECTION("two sites: off-diagonal is cov of the distance") {
    Eigen::MatrixXd c(2, 2);
    c << 0, 0, 3, 4;
    Eigen::MatrixXd s = build_sigma0(c, {1.5, 2.0, 0.0, Kernel::exponential});
    CHECK(s(0, 1) == Catch::Approx(cov_value(Kernel::exponential, 5.0, 1.5, 2.0)));
    CHECK(s(1, 0) == s(0, 1));
  }
  SECTION("5x5 grid, squared exponential, positive definite") {
    Eigen::MatrixXd s =
        build_sigma0(grid_coords(5), {1.0, 2.0, 0.0, Kernel::squared_exponential});
    Eigen::LLT<Eigen::MatrixXd> llt(s);
    REQUIRE(llt.info() == Eigen::Success);
    Eigen::VectorXd d = llt.matrixL().toDenseMatrix().diagonal();
    CHECK(d.minCoeff() > 0.0);
  }
  SECTION("duplicate sites rejected") {
    Eigen::MatrixXd c(2, 2);
    c << 1, 1, 1, 1;
    CHECK_THROWS_AS(build_sigma0(c, {1.0, 1.0, 0.0, Kernel::exponential}),
                    duplicate_site_error);
  }
}

TEST_CASE("temporal AR(1) matrix") {
  SECTION("T = 1") {
    TemporalMatrix p = TemporalMatrix::build(0.7, 1);
    CHECK(p.P(0, 0) == 1.0);
    CHECK(p.log_det == 0.0);
    CHECK(p.Pinv(0, 0) == 1.0);
  }
  SECTION("rho = 0.5, T = 2") {
    TemporalMatrix p = TemporalMatrix::build(0.5, 2);
    CHECK(p.P(0, 1) == Catch::Approx(0.5));
    CHECK(p.P(1, 0) == Catch::Approx(0.5));
    CHECK(p.P(0, 0) == 1.0);
  }
  SECTION("log determinant closed form, T = 3") {
    TemporalMatrix p = TemporalMatrix::build(0.5, 3);
    CHECK(p.log_det == Catch::Approx(2.0 * std::log(0.75)).epsilon(1e-12));
    double dense = std::log(p.P.determinant());
    CHECK(p.log_det == Catch::Approx(dense).margin(1e-10));
  }
  SECTION("closed-form tridiagonal inverse matches dense inverse, T <= 8") {
    for (int T = 1; T <= 8; ++T)
      for (double rho : {-0.8, -0.3, 0.0, 0.4, 0.9}) {
        TemporalMatrix p = TemporalMatrix::build(rho, T);
        Eigen::MatrixXd dense = p.P.inverse();
        CHECK((p.Pinv - dense).cwiseAbs().maxCoeff() < 1e-10);
        Eigen::MatrixXd rec = p.R * p.R.transpose();
        CHECK((rec - p.P).cwiseAbs().maxCoeff() < 1e-12);
      }
  }
  SECTION("|P| = (1-rho^2)^(T-1) within 1e-10") {
    for (int T : {1, 2, 3, 4, 6})
      for (double rho : {-0.6, 0.2, 0.8}) {
        TemporalMatrix p = TemporalMatrix::build(rho, T);
        CHECK(std::abs(std::exp(p.log_det) - std::pow(1 - rho * rho, T - 1)) < 1e-10);
      }
  }
}

TEST_CASE("Kronecker quadratic form and log determinant match dense oracles") {
  Rng rng(3);
  SECTION("T = 1 reduces to the plain quadratic form") {
    Eigen::MatrixXd c = grid_coords(3);
    CovParams p{1.2, 1.5, 0.0, Kernel::exponential};
    Eigen::MatrixXd s0 = build_sigma0(c, p);
    Eigen::LLT<Eigen::MatrixXd> llt(s0);
    Eigen::VectorXd z = rng.normals(9);
    TemporalMatrix P = TemporalMatrix::build(0.0, 1);
    double q = kron_quadratic_form(
        z, [&](const Eigen::MatrixXd& m) { return llt.solve(m); }, P, 9);
    CHECK(q == Catch::Approx(z.dot(llt.solve(z))).epsilon(1e-12));
  }
  SECTION("rho = 0 decouples periods") {
    Eigen::MatrixXd c = grid_coords(2);
    CovParams p{0.9, 0.7, 0.0, Kernel::squared_exponential};
    Eigen::MatrixXd s0 = build_sigma0(c, p);
    Eigen::LLT<Eigen::MatrixXd> llt(s0);
    int n = 4, T = 3;
    Eigen::VectorXd z = rng.normals(n * T);
    TemporalMatrix P = TemporalMatrix::build(0.0, T);
    double q = kron_quadratic_form(
        z, [&](const Eigen::MatrixXd& m) { return llt.solve(m); }, P, n);
    double expect = 0.0;
    for (int t = 0; t < T; ++t) {
      Eigen::VectorXd zt = z.segment(t * n, n);
      expect += zt.dot(llt.solve(zt));
    }
    CHECK(q == Catch::Approx(expect).epsilon(1e-12));
  }
  SECTION("n = 6, T = 3 random instance vs dense Kronecker") {
    Eigen::MatrixXd c(6, 2);
    for (int i = 0; i < 6; ++i) {
      c(i, 0) = rng.uniform() * 3;
      c(i, 1) = rng.uniform() * 3;
    }
    CovParams p{1.4, 0.9, 0.45, Kernel::exponential};
    Eigen::MatrixXd s0 = build_sigma0(c, p);
    Eigen::LLT<Eigen::MatrixXd> llt(s0);
    TemporalMatrix P = TemporalMatrix::build(p.rho, 3);
    Eigen::VectorXd z = rng.normals(18);
    Eigen::MatrixXd full = kron(P.P, s0);
    double dense = z.dot(full.llt().solve(z));
    double fast = kron_quadratic_form(
        z, [&](const Eigen::MatrixXd& m) { return llt.solve(m); }, P, 6);
    CHECK(fast == Catch::Approx(dense).epsilon(1e-8));
  }
  SECTION("kron_log_det cases and dense oracle") {
    Eigen::MatrixXd c(4, 2);
    c << 0, 0, 1, 0, 0, 1, 1.3, 0.8;
    CovParams p{0.8, 1.1, 0.3, Kernel::exponential};
    Eigen::MatrixXd s0 = build_sigma0(c, p);
    double ld0 = std::log(s0.determinant());
    TemporalMatrix P1 = TemporalMatrix::build(0.3, 1);
    CHECK(kron_log_det(ld0, P1, 4, 1) == Catch::Approx(ld0));
    TemporalMatrix P0 = TemporalMatrix::build(0.0, 2);
    CHECK(kron_log_det(ld0, P0, 4, 2) == Catch::Approx(2 * ld0));
    TemporalMatrix P = TemporalMatrix::build(0.3, 2);
    Eigen::MatrixXd full = kron(P.P, s0);
    CHECK(kron_log_det(ld0, P, 4, 2) ==
          Catch::Approx(std::log(full.determinant())).epsilon(1e-8));
  }
}

TEST_CASE("analytic covariance derivatives match finite differences") {
  Eigen::MatrixXd c = grid_coords(3, 0.7);
  CovParams p{1.3, 0.8, 0.4, Kernel::exponential};

  SECTION("dSigma0/dsigma_sq has unit diagonal") {
    auto [ds, dp] = cov_derivatives(c, p);
    for (int i = 0; i < c.rows(); ++i) CHECK(ds(i, i) == Catch::Approx(1.0).margin(1e-6));
    (void)dp;
  }
  SECTION("dP/drho for T = 2") {
    TemporalMatrix P = TemporalMatrix::build(0.5, 2);
    Eigen::MatrixXd d = P.deriv();
    CHECK(d(0, 0) == 0.0);
    CHECK(d(0, 1) == Catch::Approx(1.0));
    CHECK(d(1, 0) == Catch::Approx(1.0));
  }
  SECTION("elementwise finite differences, both kernels") {
    const double h = 1e-5;
    for (Kernel k : {Kernel::exponential, Kernel::squared_exponential}) {
      CovParams q = p;
      q.kernel = k;
      auto [ds, dphi] = cov_derivatives(c, q);
      CovParams up = q, dn = q;
      up.sigma_sq += h;
      dn.sigma_sq -= h;
      Eigen::MatrixXd fd_s = (build_sigma0(c, up) - build_sigma0(c, dn)) / (2 * h);
      CHECK((fd_s - ds).cwiseAbs().maxCoeff() < 1e-6);
      up = dn = q;
      up.phi += h;
      dn.phi -= h;
      Eigen::MatrixXd fd_p = (build_sigma0(c, up) - build_sigma0(c, dn)) / (2 * h);
      CHECK((fd_p - dphi).cwiseAbs().maxCoeff() < 1e-6);
    }
    TemporalMatrix P = TemporalMatrix::build(p.rho, 4);
    Eigen::MatrixXd fd_r = (TemporalMatrix::build(p.rho + h, 4).P -
                            TemporalMatrix::build(p.rho - h, 4).P) /
                           (2 * h);
    CHECK((fd_r - P.deriv()).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("dense Kronecker log-likelihood gradient matches finite differences") {
  Rng rng(17);
  Eigen::MatrixXd c = grid_coords(3, 0.6);
  int n = 9, T = 2;
  Eigen::VectorXd z = rng.normals(n * T);
  for (Kernel k : {Kernel::exponential, Kernel::squared_exponential}) {
    CovParams p{0.9, 0.5, 0.35, k};
    DenseKron dk(c, p, T);
    Eigen::Vector3d g = dk.grad(z);
    const double h = 1e-5;
    auto ll = [&](CovParams q) { return DenseKron(c, q, T).loglik(z); };
    CovParams u = p, d = p;
    u.sigma_sq += h;
    d.sigma_sq -= h;
    CHECK(g(0) == Catch::Approx((ll(u) - ll(d)) / (2 * h)).epsilon(1e-4));
    u = d = p;
    u.phi += h;
    d.phi -= h;
    CHECK(g(1) == Catch::Approx((ll(u) - ll(d)) / (2 * h)).epsilon(1e-4));
    u = d = p;
    u.rho += h;
    d.rho -= h;
    CHECK(g(2) == Catch::Approx((ll(u) - ll(d)) / (2 * h)).epsilon(1e-4));
  }
}

TEST_CASE("empirical semivariogram") {
  SECTION("constant field has zero semivariance") {
    Eigen::MatrixXd c = grid_coords(4);
    Eigen::VectorXd v = Eigen::VectorXd::Constant(16, 3.2);
    Semivariogram sv = empirical_semivariogram(c, v, 5);
    for (int b = 0; b < 5; ++b)
      if (sv.n_pairs(b) > 0) CHECK(sv.gamma(b) == 0.0);
  }
  SECTION("two cells, values 0 and 2") {
    Eigen::MatrixXd c(2, 2);
    c << 0, 0, 1, 0;
    Eigen::VectorXd v(2);
    v << 0, 2;
    Semivariogram sv = empirical_semivariogram(c, v, 1);
    REQUIRE(sv.n_pairs(0) == 1);
    CHECK(sv.gamma(0) == Catch::Approx(2.0));
  }
  SECTION("simulated GP fields recover the theoretical curve at mid range") {
    Eigen::MatrixXd c = grid_coords(10, 0.1);
    CovParams p{1.0, 0.35, 0.0, Kernel::exponential};
    Eigen::MatrixXd s0 = build_sigma0(c, p);
    Eigen::MatrixXd L = Eigen::LLT<Eigen::MatrixXd>(s0).matrixL();
    Rng rng(29);
    const int reps = 50, bins = 8;
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(bins);
    Eigen::VectorXd centre;
    for (int r = 0; r < reps; ++r) {
      Eigen::VectorXd field = L * rng.normals(100);
      Semivariogram sv = empirical_semivariogram(c, field, bins);
      acc += sv.gamma;
      centre = sv.bin_centre;
    }
    acc /= reps;
    int checked = 0;
    for (int b = 0; b < bins; ++b) {
      double d = centre(b);
      double theo = p.sigma_sq * (1.0 - std::exp(-d / p.phi));
      if (theo < 0.3 * p.sigma_sq || theo > 0.9 * p.sigma_sq) continue;
      CHECK(std::abs(acc(b) - theo) < 0.25 * theo);
      ++checked;
    }
    CHECK(checked >= 2);
  }
}
