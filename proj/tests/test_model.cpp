#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include <Eigen/Dense>

#include "lgcp/model.hpp"
#include "lgcp/rng.hpp"

using namespace lgcp;

namespace {

// identity pairing: r regions, one per cell
IntersectionMap bijection_map(int n) {
  IntersectionMap im;
  im.n_regions = n;
  for (int i = 0; i < n; ++i) im.entries.push_back({i, i, 1.0});
  return im;
}

}  // namespace

TEST_CASE("poisson log-likelihood") {
  Eigen::VectorXd y(1), eta(1);
  y << 0;
  eta << 0;
  CHECK(poisson_loglik(y, eta) == Catch::Approx(-1.0));
  y << 1;
  CHECK(poisson_loglik(y, eta) == Catch::Approx(-1.0));
  y << 3;
  eta << std::log(3.0);
  CHECK(poisson_loglik(y, eta) ==
        Catch::Approx(3 * std::log(3.0) - 3 - std::log(6.0)).epsilon(1e-9));

  SECTION("concave in eta: negative second differences") {
    Eigen::VectorXd yy(1);
    yy << 4;
    double h = 0.05;
    for (double e = -3; e <= 3; e += 0.25) {
      Eigen::VectorXd lo(1), mid(1), hi(1);
      lo << e - h;
      mid << e;
      hi << e + h;
      double second =
          poisson_loglik(yy, hi) - 2 * poisson_loglik(yy, mid) + poisson_loglik(yy, lo);
      CHECK(second < 0.0);
    }
  }
  SECTION("errors") {
    Eigen::VectorXd bad(1), ok(1);
    bad << std::numeric_limits<double>::infinity();
    ok << 0.0;
    Eigen::VectorXd y1(1);
    y1 << 1;
    CHECK_THROWS_AS(poisson_loglik(y1, bad), numeric_error);
    Eigen::VectorXd yneg(1);
    yneg << -1;
    CHECK_THROWS_AS(poisson_loglik(yneg, ok), numeric_error);
  }
}

TEST_CASE("grid intensity") {
  Rng rng(23);
  int n = 6;
  Eigen::VectorXd offset(n);
  for (int i = 0; i < n; ++i) offset(i) = 0.5 + rng.uniform();
  Eigen::VectorXd log_offset = offset.array().log();
  Eigen::MatrixXd X(n, 2);
  X.col(0).setOnes();
  for (int i = 0; i < n; ++i) X(i, 1) = rng.normal();

  SECTION("gamma = 0, z = 0 gives the offset") {
    Eigen::VectorXd lam =
        grid_intensity(log_offset, X, Eigen::Vector2d{0, 0}, Eigen::VectorXd::Zero(n));
    CHECK((lam - offset).cwiseAbs().maxCoeff() < 1e-14);
  }
  SECTION("intercept log 2 doubles the offset") {
    Eigen::VectorXd lam = grid_intensity(log_offset, X, Eigen::Vector2d{std::log(2.0), 0},
                                         Eigen::VectorXd::Zero(n));
    CHECK((lam - 2 * offset).cwiseAbs().maxCoeff() < 1e-13);
  }
  SECTION("random instance matches the scalar loop") {
    Eigen::Vector2d gamma{0.3, -0.7};
    Eigen::VectorXd z = rng.normals(n);
    Eigen::VectorXd lam = grid_intensity(log_offset, X, gamma, z);
    for (int i = 0; i < n; ++i) {
      double eta = std::log(offset(i)) + gamma(0) + gamma(1) * X(i, 1) + z(i);
      CHECK(lam(i) == Catch::Approx(std::exp(eta)).epsilon(1e-12));
    }
    CHECK(lam.minCoeff() > 0.0);
  }
  SECTION("clamping is counted") {
    long clamps = 0;
    Eigen::VectorXd big = Eigen::VectorXd::Constant(n, 100.0);
    grid_intensity(log_offset, X, Eigen::Vector2d{0, 0}, big, &clamps);
    CHECK(clamps == n);
  }
}

TEST_CASE("region design matrices") {
  SECTION("bijection gives identity matrices") {
    RegionDesign d = build_region_design(bijection_map(4), 4, 4);
    CHECK(d.dense_A().isApprox(Eigen::MatrixXd::Identity(4, 4)));
    CHECK(d.dense_B().isApprox(Eigen::MatrixXd::Identity(4, 4)));
    CHECK(d.dense_C().isApprox(Eigen::MatrixXd::Identity(4, 4)));
  }
  SECTION("one region spanning two cells") {
    IntersectionMap im;
    im.n_regions = 1;
    im.entries.push_back({0, 0, 0.5});
    im.entries.push_back({1, 0, 0.5});
    RegionDesign d = build_region_design(im, 2, 1);
    Eigen::MatrixXd C = d.dense_C();
    CHECK(C.rows() == 2);
    CHECK(C.cols() == 1);
    CHECK(C.col(0).sum() == Catch::Approx(2.0));  // two unit entries
  }
  SECTION("aggregation via weighted C^T equals direct per-region sums") {
    // 3x3 grid, 2 regions with random split weights
    Rng rng(31);
    IntersectionMap im;
    im.n_regions = 2;
    double acc0 = 0;
    std::vector<double> w0(9), w1(9);
    for (int i = 0; i < 9; ++i) w0[i] = rng.uniform();
    for (double v : w0) acc0 += v;
    for (int i = 0; i < 9; ++i) w0[i] /= acc0;
    double acc1 = 0;
    for (int i = 0; i < 9; ++i) w1[i] = rng.uniform();
    for (double v : w1) acc1 += v;
    for (int i = 0; i < 9; ++i) w1[i] /= acc1;
    for (int i = 0; i < 9; ++i) {
      im.entries.push_back({i, 0, w0[i]});
      im.entries.push_back({i, 1, w1[i]});
    }
    RegionDesign d = build_region_design(im, 9, 2);
    Eigen::VectorXd x = rng.normals(9);
    Eigen::VectorXd agg = d.apply_weighted(x);
    double s0 = 0, s1 = 0;
    for (int i = 0; i < 9; ++i) {
      s0 += w0[i] * x(i);
      s1 += w1[i] * x(i);
    }
    CHECK(agg(0) == Catch::Approx(s0).epsilon(1e-12));
    CHECK(agg(1) == Catch::Approx(s1).epsilon(1e-12));
  }
  SECTION("empty region rejected") {
    IntersectionMap im = bijection_map(2);
    im.n_regions = 3;  // region 3 has no intersections
    CHECK_THROWS_AS(build_region_design(im, 2, 3), no_coverage_error);
  }
}

TEST_CASE("region intensity and C*") {
  Rng rng(41);
  // 4 cells, 2 regions, equal split
  IntersectionMap im;
  im.n_regions = 2;
  im.entries.push_back({0, 0, 0.5});
  im.entries.push_back({1, 0, 0.5});
  im.entries.push_back({2, 1, 0.5});
  im.entries.push_back({3, 1, 0.5});
  int n = 4, r = 2, T = 2;
  RegionDesign d = build_region_design(im, n, r, T);

  Eigen::VectorXd mu_R = rng.normals(r * T).array().exp();
  Eigen::VectorXd mu_S = rng.normals(n * T).array().exp();
  Eigen::VectorXd mu_Z = rng.normals(n * T).array().exp();

  SECTION("constant mu_S, mu_Z reproduce mu_R") {
    Eigen::VectorXd ones = Eigen::VectorXd::Ones(n * T);
    Eigen::VectorXd lam = region_intensity(d, mu_R, ones, ones);
    CHECK((lam - mu_R).cwiseAbs().maxCoeff() < 1e-12);
  }
  SECTION("matches the direct double-sum oracle") {
    Eigen::VectorXd lam = region_intensity(d, mu_R, mu_S, mu_Z);
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < r; ++j) {
        double s = 0.0;
        for (const auto& e : im.entries)
          if (e.region == j) s += e.w * mu_S(t * n + e.cell) * mu_Z(t * n + e.cell);
        CHECK(lam(t * r + j) == Catch::Approx(mu_R(t * r + j) * s).epsilon(1e-12));
      }
  }
  SECTION("C* applications agree with region_intensity") {
    CStar cs = build_cstar(d, mu_R, mu_S);
    Eigen::VectorXd via_cstar = cs.apply(mu_Z);
    Eigen::VectorXd direct = region_intensity(d, mu_R, mu_S, mu_Z);
    CHECK((via_cstar - direct).cwiseAbs().maxCoeff() < 1e-12);
    // C* 1 equals the intensity with unit mu_Z
    Eigen::VectorXd ones = Eigen::VectorXd::Ones(n * T);
    CHECK((cs.apply(ones) - region_intensity(d, mu_R, mu_S, ones)).cwiseAbs().maxCoeff() <
          1e-12);
    // all-unit mu gives the weighted C^T
    CStar unit = build_cstar(d, Eigen::VectorXd::Ones(r * T), Eigen::VectorXd::Ones(n * T));
    Eigen::MatrixXd m = unit.dense(0);
    CHECK(m(0, 0) == Catch::Approx(0.5));
    CHECK(m(1, 2) == Catch::Approx(0.5));
    CHECK(m(0, 2) == 0.0);
  }
}

TEST_CASE("degenerate-region equivalence of the log-likelihood") {
  Rng rng(51);
  int n = 9, T = 2;
  Eigen::VectorXd offset = (rng.normals(n * T) * 0.2).array().exp();
  Eigen::VectorXd cov = rng.normals(n * T);
  Eigen::VectorXd z = rng.normals(n * T) * 0.5;
  Eigen::Vector2d gamma{-0.4, 0.6};

  ModelData grid;
  grid.n = n;
  grid.T = T;
  grid.log_offset = offset.array().log();
  grid.X.resize(n * T, 2);
  grid.X.col(0).setOnes();
  grid.X.col(1) = cov;
  grid.y.resize(n * T);
  for (int i = 0; i < n * T; ++i) grid.y(i) = std::floor(4 * rng.uniform());

  ModelData region;
  region.n = n;
  region.T = T;
  region.design = build_region_design(bijection_map(n), n, n, T);
  region.log_offset = grid.log_offset;
  region.Xr = Eigen::MatrixXd::Ones(n * T, 1);
  region.X.resize(n * T, 1);
  region.X.col(0) = cov;
  region.y = grid.y;

  double llg = grid.loglik(grid.intensity(gamma, z));
  double llr = region.loglik(region.intensity(gamma, z));
  CHECK(llg == Catch::Approx(llr).margin(1e-10));

  SECTION("aggregation consistency: region intensities sum to grid mass") {
    Eigen::VectorXd lam_g = grid.intensity(gamma, z);
    Eigen::VectorXd lam_r = region.intensity(gamma, z);
    for (int t = 0; t < T; ++t)
      CHECK(lam_r.segment(t * n, n).sum() ==
            Catch::Approx(lam_g.segment(t * n, n).sum()).epsilon(1e-12));
  }
}

TEST_CASE("intensity jacobian matches finite differences") {
  Rng rng(61);
  int n = 6, T = 1;
  ModelData md;
  md.n = n;
  md.T = T;
  IntersectionMap im;
  im.n_regions = 2;
  im.entries.push_back({0, 0, 0.4});
  im.entries.push_back({1, 0, 0.6});
  im.entries.push_back({2, 1, 0.3});
  im.entries.push_back({3, 1, 0.2});
  im.entries.push_back({4, 1, 0.25});
  im.entries.push_back({5, 1, 0.25});
  md.design = build_region_design(im, n, 2, T);
  md.log_offset = rng.normals(2).array() * 0.1;
  md.Xr.resize(2, 2);
  md.Xr.col(0).setOnes();
  md.Xr.col(1) = rng.normals(2);
  md.X.resize(n, 1);
  md.X.col(0) = rng.normals(n);
  md.y.resize(2);
  md.y << 3, 5;

  Eigen::VectorXd gamma(3);
  gamma << 0.2, -0.3, 0.5;
  Eigen::VectorXd z = rng.normals(n) * 0.3;
  Eigen::VectorXd lam = md.intensity(gamma, z);
  Eigen::MatrixXd J = md.intensity_jacobian(gamma, z, lam);
  const double h = 1e-6;
  for (int c = 0; c < 3; ++c) {
    Eigen::VectorXd up = gamma, dn = gamma;
    up(c) += h;
    dn(c) -= h;
    Eigen::VectorXd fd = (md.intensity(up, z) - md.intensity(dn, z)) / (2 * h);
    CHECK((J.col(c) - fd).cwiseAbs().maxCoeff() < 1e-6);
  }
  SECTION("dloglik_dZ matches finite differences") {
    Eigen::VectorXd g = md.dloglik_dZ(gamma, z);
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd up = z, dn = z;
      up(i) += h;
      dn(i) -= h;
      double fd =
          (md.loglik(md.intensity(gamma, up)) - md.loglik(md.intensity(gamma, dn))) / (2 * h);
      CHECK(g(i) == Catch::Approx(fd).margin(1e-5));
    }
  }
}
