#ifndef LGCP_OUTPUTS_HPP
#define LGCP_OUTPUTS_HPP

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lgcp/common.hpp"
#include "lgcp/grid.hpp"
#include "lgcp/model.hpp"
#include "lgcp/sampler.hpp"

namespace lgcp {

// Parameter/latent draws feeding the prediction pipeline. Maximum-likelihood
// fits broadcast a single (gamma, theta) over the latent bank; Bayesian fits
// supply one column per posterior draw.
struct ParamDraws {
  Eigen::MatrixXd gamma;  // Q x S or Q x 1 (broadcast)
  Eigen::MatrixXd theta;  // 3 x S or 3 x 1: rows sigma_sq, phi, rho
  Eigen::MatrixXd zstar;  // latent_dim x S

  int draws() const { return static_cast<int>(zstar.cols()); }

  Eigen::VectorXd gamma_at(int s) const {
    return gamma.cols() == 1 ? gamma.col(0) : gamma.col(s);
  }
  Eigen::Vector3d theta_at(int s) const {
    return theta.cols() == 1 ? Eigen::Vector3d(theta.col(0)) : Eigen::Vector3d(theta.col(s));
  }
};

// Draw tensors for the requested statistics; summaries are over columns.
// Relative risk always attaches to grid cells; incidence and IRR attach to
// regions for region models.
struct PredictionSet {
  int n = 0, r = 0, T = 1;
  bool region = false;
  int irr_lag = 0;
  Eigen::MatrixXd pred;    // incidence draws, units*T x S
  Eigen::MatrixXd percap;  // incidence per unit of offset
  Eigen::MatrixXd rr;      // exp(Z), n*T x S
  Eigen::MatrixXd irr;     // units x S (latest period vs lagged)

  int units() const { return region ? r : n; }
};

inline Eigen::VectorXd draw_mean(const Eigen::MatrixXd& m) { return m.rowwise().mean(); }

inline Eigen::VectorXd draw_sd(const Eigen::MatrixXd& m) {
  if (m.cols() < 2) return Eigen::VectorXd::Zero(m.rows());
  Eigen::VectorXd mu = m.rowwise().mean();
  return ((m.colwise() - mu).array().square().rowwise().sum() / (m.cols() - 1))
      .sqrt()
      .matrix();
}

enum class PredType { pred, rr, irr };

inline PredictionSet extract_preds(const ModelData& model, const LatentModel& lm,
                                   const ParamDraws& draws, const std::vector<PredType>& types,
                                   int irr_lag = 1) {
  const int S = draws.draws();
  if (S < 1) throw config_error("extract_preds needs at least one draw");
  bool want_pred = false, want_rr = false, want_irr = false;
  for (PredType t : types) {
    want_pred |= t == PredType::pred;
    want_rr |= t == PredType::rr;
    want_irr |= t == PredType::irr;
  }
  PredictionSet out;
  out.n = model.n;
  out.T = model.T;
  out.region = model.is_region();
  out.r = out.region ? model.design->r : 0;
  out.irr_lag = irr_lag;
  if (want_irr && (irr_lag < 1 || irr_lag >= model.T))
    throw unsupported_error("irr requires 1 <= lag < T");

  const int units = out.region ? out.r : out.n;
  if (want_pred) {
    out.pred.resize(units * model.T, S);
    out.percap.resize(units * model.T, S);
  }
  if (want_rr) out.rr.resize(model.n * model.T, S);
  if (want_irr) out.irr.resize(units, S);

  SqrtFactor f;
  Eigen::Vector3d last_theta = Eigen::Vector3d::Constant(std::numeric_limits<double>::quiet_NaN());
  for (int s = 0; s < S; ++s) {
    Eigen::Vector3d th = draws.theta_at(s);
    if (th != last_theta) {
      f = lm.build(lm.params(th(0), th(1), th(2)));
      last_theta = th;
    }
    Eigen::VectorXd z = f.apply(draws.zstar.col(s));
    if (want_rr) out.rr.col(s) = z.array().exp();
    if (want_pred || want_irr) {
      Eigen::VectorXd lambda = model.intensity(draws.gamma_at(s), z);
      if (want_pred) {
        out.pred.col(s) = lambda;
        out.percap.col(s) = lambda.array() / model.log_offset.array().exp();
      }
      if (want_irr) {
        Eigen::VectorXd cur = lambda.segment((model.T - 1) * units, units);
        Eigen::VectorXd lag = lambda.segment((model.T - 1 - irr_lag) * units, units);
        out.irr.col(s) = cur.cwiseQuotient(lag);
      }
    }
  }
  return out;
}

struct HotspotQuery {
  std::optional<double> incidence_threshold;
  std::optional<double> rr_threshold;
  std::optional<double> irr_threshold;
  int irr_lag = 1;
  std::string label = "hotspot";

  void validate(int T) const {
    if (!incidence_threshold && !rr_threshold && !irr_threshold)
      throw config_error("hotspot query needs at least one threshold");
    if (irr_threshold && irr_lag >= T) throw config_error("irr lag must be < T");
  }
};

// Probability that all requested measures exceed their thresholds jointly
// (logical AND, strict inequality), as an exact fraction of draws. Grid
// models evaluate per cell at the latest period; region models evaluate
// incidence/irr per region, and relative risk may not be combined with them
// because it lives at the grid level.
inline Eigen::VectorXd hotspot_prob(const PredictionSet& preds, const HotspotQuery& query) {
  query.validate(preds.T);
  bool regional_stat = query.incidence_threshold.has_value() || query.irr_threshold.has_value();
  if (preds.region && regional_stat && query.rr_threshold.has_value())
    throw config_error(
        "region models cannot combine relative risk (grid level) with incidence or irr "
        "(region level)");
  if (query.incidence_threshold && preds.pred.size() == 0)
    throw config_error("hotspot query needs incidence draws; extract pred first");
  if (query.rr_threshold && preds.rr.size() == 0)
    throw config_error("hotspot query needs rr draws; extract rr first");
  if (query.irr_threshold && preds.irr.size() == 0)
    throw config_error("hotspot query needs irr draws; extract irr first");

  // an rr-only query on a region model reports at the grid level
  int units = (query.rr_threshold && !regional_stat) ? preds.n : preds.units();
  int S = 0;
  if (query.rr_threshold) S = static_cast<int>(preds.rr.cols());
  if (query.incidence_threshold) S = static_cast<int>(preds.pred.cols());
  if (query.irr_threshold) S = static_cast<int>(preds.irr.cols());

  Eigen::VectorXd prob = Eigen::VectorXd::Zero(units);
  for (int i = 0; i < units; ++i) {
    int hits = 0;
    for (int s = 0; s < S; ++s) {
      bool ok = true;
      if (query.rr_threshold) {
        // latest period at the grid level
        double v = preds.rr((preds.T - 1) * preds.n + i, s);
        ok = ok && v > *query.rr_threshold;
      }
      if (ok && query.incidence_threshold) {
        double v = preds.pred((preds.T - 1) * preds.units() + i, s);
        ok = ok && v > *query.incidence_threshold;
      }
      if (ok && query.irr_threshold) ok = preds.irr(i, s) > *query.irr_threshold;
      if (ok) ++hits;
    }
    prob(i) = static_cast<double>(hits) / S;
  }
  return prob;
}

struct AggregateResult {
  Eigen::MatrixXd draws;  // (targets * T) x S
  Eigen::VectorXd mean, sd;
  std::vector<double> weight_sums;
};

// Aggregates per-cell draw tensors onto target polygons, draw-wise (weighted
// mean per draw, then summarise), so exceedance probabilities computed on the
// aggregate remain exact. Weights are overlap areas, optionally scaled by a
// per-cell population density.
inline AggregateResult aggregate_output(const RegularGrid& g,
                                        const std::vector<MultiPolygon>& targets,
                                        const Eigen::MatrixXd& cell_draws, int T,
                                        WeightType wt,
                                        const Eigen::VectorXd& popdens = Eigen::VectorXd()) {
  const int n = g.n();
  if (cell_draws.rows() != static_cast<Eigen::Index>(n) * T)
    throw dimension_error("aggregate_output: cell draw tensor has wrong height");
  if (wt == WeightType::population && popdens.size() != n)
    throw config_error("population weighting needs a per-cell density vector");
  const int S = static_cast<int>(cell_draws.cols());
  const int R = static_cast<int>(targets.size());

  AggregateResult out;
  out.draws = Eigen::MatrixXd::Zero(R * T, S);
  out.weight_sums.assign(R, 0.0);
  for (int j = 0; j < R; ++j) {
    validate(targets[j]);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i) {
      double a = clipped_area(targets[j], g.cell_box(i));
      if (a <= 0) continue;
      w(i) = wt == WeightType::population ? a * popdens(i) : a;
    }
    double wsum = w.sum();
    if (wsum <= 0.0)
      throw no_coverage_error("aggregation target " + std::to_string(j + 1) +
                              " overlaps no grid cell");
    out.weight_sums[j] = wsum;
    w /= wsum;
    for (int t = 0; t < T; ++t)
      out.draws.row(t * R + j) = w.transpose() * cell_draws.middleRows(t * n, n);
  }
  out.mean = draw_mean(out.draws);
  out.sd = draw_sd(out.draws);
  return out;
}

}  // namespace lgcp

#endif
