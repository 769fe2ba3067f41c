#ifndef LGCP_OPTIM_HPP
#define LGCP_OPTIM_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "lgcp/common.hpp"

namespace lgcp {

enum class Optimiser { derivative_free, quasi_newton };

struct OptimResult {
  Eigen::VectorXd x;
  double f = 0.0;
  int evals = 0;
  bool bound_hit = false;
};

// Box guard on unconstrained parameters; hitting it flags degenerate fits
// (e.g. sigma^2 collapsing to zero on an all-zero latent bank).
inline constexpr double kOptimBox = 20.0;

namespace detail {
inline bool clamp_box(Eigen::VectorXd& x) {
  bool hit = false;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (x(i) > kOptimBox) {
      x(i) = kOptimBox;
      hit = true;
    } else if (x(i) < -kOptimBox) {
      x(i) = -kOptimBox;
      hit = true;
    }
  }
  return hit;
}
}  // namespace detail

// Classic Nelder-Mead simplex minimisation.
inline OptimResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                               Eigen::VectorXd x0, double init_spread = 0.2,
                               double ftol = 1e-10, int max_evals = 2000) {
  const int n = static_cast<int>(x0.size());
  OptimResult res;
  res.bound_hit = detail::clamp_box(x0);
  std::vector<Eigen::VectorXd> xs(n + 1, x0);
  std::vector<double> fs(n + 1);
  for (int i = 1; i <= n; ++i) xs[i](i - 1) += init_spread;
  for (int i = 0; i <= n; ++i) {
    fs[i] = f(xs[i]);
    ++res.evals;
  }
  if (!std::isfinite(fs[0]))
    throw initialisation_error("optimiser objective nonfinite at the initial point");

  auto order = [&] {
    std::vector<int> idx(n + 1);
    for (int i = 0; i <= n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return fs[a] < fs[b]; });
    std::vector<Eigen::VectorXd> xs2(n + 1);
    std::vector<double> fs2(n + 1);
    for (int i = 0; i <= n; ++i) {
      xs2[i] = xs[idx[i]];
      fs2[i] = fs[idx[i]];
    }
    xs = std::move(xs2);
    fs = std::move(fs2);
  };
  auto eval = [&](Eigen::VectorXd x) {
    res.bound_hit = detail::clamp_box(x) || res.bound_hit;
    ++res.evals;
    double v = f(x);
    return std::pair<double, Eigen::VectorXd>(std::isfinite(v) ? v
                                                               : std::numeric_limits<double>::max(),
                                              std::move(x));
  };

  while (res.evals < max_evals) {
    order();
    if (std::abs(fs[n] - fs[0]) < ftol * (1.0 + std::abs(fs[0]))) break;
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i) centroid += xs[i];
    centroid /= n;
    auto [fr, xr] = eval(centroid + (centroid - xs[n]));
    if (fr < fs[0]) {
      auto [fe, xe] = eval(centroid + 2.0 * (centroid - xs[n]));
      if (fe < fr) {
        xs[n] = xe;
        fs[n] = fe;
      } else {
        xs[n] = xr;
        fs[n] = fr;
      }
    } else if (fr < fs[n - 1]) {
      xs[n] = xr;
      fs[n] = fr;
    } else {
      auto [fc, xc] = eval(centroid + 0.5 * (xs[n] - centroid));
      if (fc < fs[n]) {
        xs[n] = xc;
        fs[n] = fc;
      } else {
        for (int i = 1; i <= n; ++i) {
          xs[i] = xs[0] + 0.5 * (xs[i] - xs[0]);
          fs[i] = f(xs[i]);
          ++res.evals;
        }
      }
    }
  }
  order();
  res.x = xs[0];
  res.f = fs[0];
  return res;
}

// BFGS with Armijo backtracking; fg returns the objective and fills the
// gradient. Dimensions here are tiny (<= 3), so dense updates are fine.
inline OptimResult bfgs(
    const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>& fg,
    Eigen::VectorXd x0, double gtol = 1e-8, int max_iter = 200) {
  const int n = static_cast<int>(x0.size());
  OptimResult res;
  res.bound_hit = detail::clamp_box(x0);
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd x = x0, g(n);
  double fx = fg(x, g);
  ++res.evals;
  if (!std::isfinite(fx))
    throw initialisation_error("optimiser objective nonfinite at the initial point");

  for (int it = 0; it < max_iter; ++it) {
    if (g.cwiseAbs().maxCoeff() < gtol) break;
    Eigen::VectorXd p = -H * g;
    if (p.dot(g) > 0) p = -g;  // reset on loss of descent
    double step = 1.0;
    double gp = g.dot(p);
    Eigen::VectorXd xn(n), gn(n);
    double fn = fx;
    bool ok = false;
    for (int ls = 0; ls < 40; ++ls) {
      xn = x + step * p;
      bool hit = detail::clamp_box(xn);
      fn = fg(xn, gn);
      ++res.evals;
      if (std::isfinite(fn) && fn <= fx + 1e-4 * step * gp) {
        ok = true;
        res.bound_hit = hit || res.bound_hit;
        break;
      }
      step *= 0.5;
    }
    if (!ok) break;
    Eigen::VectorXd s = xn - x, yv = gn - g;
    double sy = s.dot(yv);
    if (sy > 1e-12) {
      Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
      H = (I - s * yv.transpose() / sy) * H * (I - yv * s.transpose() / sy) +
          s * s.transpose() / sy;
    }
    x = xn;
    g = gn;
    if (std::abs(fx - fn) < 1e-13 * (1.0 + std::abs(fx))) {
      fx = fn;
      break;
    }
    fx = fn;
  }
  res.x = x;
  res.f = fx;
  return res;
}

}  // namespace lgcp

#endif
