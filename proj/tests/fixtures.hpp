#ifndef LGCP_TEST_FIXTURES_HPP
#define LGCP_TEST_FIXTURES_HPP

#include <Eigen/Dense>

#include "lgcp/covariance.hpp"
#include "lgcp/model.hpp"
#include "lgcp/rng.hpp"
#include "lgcp/sampler.hpp"

namespace lgcp::test {

inline Eigen::MatrixXd grid_coords(int side, double spacing = 1.0) {
  Eigen::MatrixXd c(side * side, 2);
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) {
      c(i * side + j, 0) = spacing * (j + 0.5);
      c(i * side + j, 1) = spacing * (i + 0.5);
    }
  return c;
}

struct Simulated {
  ModelData model;
  Eigen::MatrixXd coords;
  Eigen::VectorXd z_true;
  Eigen::VectorXd gamma_true;
};

// Simulates counts from the grid-level model with an exact latent GP draw.
inline Simulated simulate_grid(int side, int T, const Eigen::VectorXd& gamma,
                               const CovParams& p, std::uint64_t seed, double offset_scale = 1.0,
                               double spacing = 1.0) {
  Simulated out;
  out.coords = grid_coords(side, spacing);
  const int n = side * side;
  Rng rng(seed);

  LatentModel lm = LatentModel::make(Approx::none, out.coords, T, p.kernel);
  SqrtFactor f = lm.build(p);
  out.z_true = f.apply(rng.normals(f.latent_dim()));
  out.gamma_true = gamma;

  ModelData& md = out.model;
  md.n = n;
  md.T = T;
  md.X.resize(n * T, gamma.size());
  md.X.col(0).setOnes();
  for (int c = 1; c < gamma.size(); ++c)
    for (int i = 0; i < n * T; ++i) md.X(i, c) = rng.normal();
  md.log_offset = Eigen::VectorXd::Constant(n * T, std::log(offset_scale));
  Eigen::VectorXd eta = md.log_offset + md.X * gamma + out.z_true;
  md.y.resize(n * T);
  for (int i = 0; i < n * T; ++i) {
    // Poisson draw by inversion (small means) or normal approximation
    double lam = std::exp(eta(i));
    if (lam < 50) {
      double u = rng.uniform();
      double p0 = std::exp(-lam), cdf = p0;
      int k = 0;
      while (u > cdf && k < 1000) {
        ++k;
        p0 *= lam / k;
        cdf += p0;
      }
      md.y(i) = k;
    } else {
      md.y(i) = std::max(0.0, std::round(lam + std::sqrt(lam) * rng.normal()));
    }
  }
  return out;
}

}  // namespace lgcp::test

#endif
