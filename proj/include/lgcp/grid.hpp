#ifndef LGCP_GRID_HPP
#define LGCP_GRID_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "lgcp/common.hpp"
#include "lgcp/geometry.hpp"
#include "lgcp/parallel.hpp"
#include "lgcp/rng.hpp"

namespace lgcp {

struct GridCell {
  double x0 = 0.0;  // lower-left corner
  double y0 = 0.0;
};

struct CaseEvent {
  double x = 0.0;
  double y = 0.0;
  int t = 1;          // period index, 1-based
  std::string stamp;  // original timestamp, kept verbatim
};

struct CaseEvents {
  std::vector<CaseEvent> events;
};

// Ordered lattice of square cells clipped to a boundary. Cell membership for
// points is half-open: [x0, x0+h) x [y0, y0+h).
struct RegularGrid {
  std::vector<GridCell> cells;
  double cellsize = 0.0;
  MultiPolygon boundary;
  Box bbox;
  int nx = 0, ny = 0;  // candidate lattice dimensions over the bounding box

  std::vector<int> order;             // order[row] = original row-major index
  std::vector<double> cover_area;     // area(cell ∩ boundary) per row
  double boundary_area = 0.0;

  int T = 1;
  Eigen::MatrixXi counts;                          // n x T
  std::map<std::string, Eigen::MatrixXd> covariates;  // each n x T

  std::vector<long> dropped_space;  // per period: events in no retained cell
  long dropped_time = 0;            // events with out-of-range period
  long outside_boundary = 0;        // counted in a cell but outside the boundary polygon

  int n() const { return static_cast<int>(cells.size()); }

  Point centre(int i) const {
    return {cells[i].x0 + 0.5 * cellsize, cells[i].y0 + 0.5 * cellsize};
  }

  Box cell_box(int i) const {
    return {cells[i].x0, cells[i].y0, cells[i].x0 + cellsize, cells[i].y0 + cellsize};
  }

  // n x 2 matrix of cell centres in current order
  Eigen::MatrixXd coords() const {
    Eigen::MatrixXd c(n(), 2);
    for (int i = 0; i < n(); ++i) {
      Point p = centre(i);
      c(i, 0) = p.x;
      c(i, 1) = p.y;
    }
    return c;
  }

  bool has_covariate(const std::string& name) const { return covariates.count(name) > 0; }

  const Eigen::MatrixXd& covariate(const std::string& name) const {
    auto it = covariates.find(name);
    if (it == covariates.end()) throw unknown_covariate_error("unknown covariate: " + name);
    return it->second;
  }
};

inline RegularGrid build_grid(const MultiPolygon& boundary, double cellsize,
                              int max_cells = 100000) {
  validate(boundary);
  if (!(cellsize > 0.0)) throw config_error("cellsize must be positive");
  RegularGrid g;
  g.boundary = boundary;
  g.cellsize = cellsize;
  g.bbox = bounding_box(boundary);
  g.boundary_area = area(boundary);
  if (!(g.bbox.width() > 0.0) || !(g.bbox.height() > 0.0))
    throw invalid_geometry_error("degenerate boundary: zero extent");
  if (cellsize > g.bbox.width() || cellsize > g.bbox.height())
    throw config_error("cellsize exceeds the boundary extent");

  g.nx = static_cast<int>(std::ceil(g.bbox.width() / cellsize - 1e-12));
  g.ny = static_cast<int>(std::ceil(g.bbox.height() / cellsize - 1e-12));
  long candidates = static_cast<long>(g.nx) * g.ny;
  if (candidates > max_cells)
    throw resource_limit_error("grid would have " + std::to_string(candidates) +
                               " candidate cells (max " + std::to_string(max_cells) + ")");

  // Row-major over the candidate lattice; keep cells with positive overlap.
  std::vector<double> cand_area(static_cast<std::size_t>(candidates), 0.0);
  parallel_for(static_cast<std::size_t>(candidates), [&](std::size_t k) {
    int iy = static_cast<int>(k) / g.nx;
    int ix = static_cast<int>(k) % g.nx;
    Box cb{g.bbox.xmin + ix * cellsize, g.bbox.ymin + iy * cellsize,
           g.bbox.xmin + (ix + 1) * cellsize, g.bbox.ymin + (iy + 1) * cellsize};
    cand_area[k] = clipped_area(boundary, cb);
  });
  for (long k = 0; k < candidates; ++k) {
    if (cand_area[k] > 0.0) {
      int iy = static_cast<int>(k) / g.nx;
      int ix = static_cast<int>(k) % g.nx;
      g.cells.push_back({g.bbox.xmin + ix * cellsize, g.bbox.ymin + iy * cellsize});
      g.cover_area.push_back(cand_area[k]);
      g.order.push_back(static_cast<int>(g.order.size()));
    }
  }
  if (g.cells.empty()) throw invalid_geometry_error("no grid cell intersects the boundary");
  g.T = 1;
  g.counts = Eigen::MatrixXi::Zero(g.n(), 1);
  g.dropped_space.assign(1, 0);
  return g;
}

// Aggregates events to per-cell, per-period counts. T is set to laglength.
inline void points_to_grid(RegularGrid& g, const CaseEvents& events, int laglength) {
  if (laglength < 1) throw config_error("laglength must be >= 1");
  g.T = laglength;
  g.counts = Eigen::MatrixXi::Zero(g.n(), laglength);
  g.dropped_space.assign(laglength, 0);
  g.dropped_time = 0;
  g.outside_boundary = 0;

  // lattice index -> current row
  std::vector<int> row_of(static_cast<std::size_t>(g.nx) * g.ny, -1);
  for (int i = 0; i < g.n(); ++i) {
    int ix = static_cast<int>(std::llround((g.cells[i].x0 - g.bbox.xmin) / g.cellsize));
    int iy = static_cast<int>(std::llround((g.cells[i].y0 - g.bbox.ymin) / g.cellsize));
    row_of[static_cast<std::size_t>(iy) * g.nx + ix] = i;
  }

  for (const auto& e : events.events) {
    if (e.t < 1 || e.t > laglength) {
      ++g.dropped_time;
      continue;
    }
    double fx = (e.x - g.bbox.xmin) / g.cellsize;
    double fy = (e.y - g.bbox.ymin) / g.cellsize;
    int ix = static_cast<int>(std::floor(fx));
    int iy = static_cast<int>(std::floor(fy));
    int row = -1;
    if (ix >= 0 && ix < g.nx && iy >= 0 && iy < g.ny)
      row = row_of[static_cast<std::size_t>(iy) * g.nx + ix];
    if (row < 0) {
      ++g.dropped_space[e.t - 1];
      continue;
    }
    g.counts(row, e.t - 1) += 1;
    if (!contains(g.boundary, Point{e.x, e.y})) ++g.outside_boundary;
  }

  // resize any existing covariates to the new T (older columns broadcast)
  for (auto& [name, m] : g.covariates) {
    if (m.cols() != g.T) {
      Eigen::MatrixXd r(g.n(), g.T);
      for (int t = 0; t < g.T; ++t) r.col(t) = m.col(std::min<int>(t, m.cols() - 1));
      m = std::move(r);
    }
  }
}

struct CovariateSource {
  MultiPolygon geom;
  std::map<std::string, double> values;
};

enum class WeightType { area, population };

// Overlays polygon covariates: per-cell weighted mean, weights = overlap area
// or overlap area x population density. Gaps up to 5% of the cell area are
// tolerated (weights renormalise); larger gaps are an error.
inline void add_covariates(RegularGrid& g, const std::vector<CovariateSource>& sources,
                           const std::vector<std::string>& names, WeightType wt,
                           const std::string& popdens_name = "") {
  if (sources.empty()) throw config_error("no covariate sources supplied");
  for (const auto& s : sources) {
    for (const auto& name : names)
      if (!s.values.count(name)) throw unknown_covariate_error("covariate missing from source: " + name);
    if (wt == WeightType::population && !s.values.count(popdens_name))
      throw unknown_covariate_error("population-density field missing from source: " +
                                    (popdens_name.empty() ? "<unset>" : popdens_name));
  }

  const int n = g.n();
  const int nv = static_cast<int>(names.size());
  Eigen::MatrixXd vals = Eigen::MatrixXd::Zero(n, nv);
  std::vector<double> wsum(n, 0.0), areasum(n, 0.0);
  std::vector<Box> boxes(n);
  for (int i = 0; i < n; ++i) boxes[i] = g.cell_box(i);

  parallel_for(static_cast<std::size_t>(n), [&](std::size_t ui) {
    int i = static_cast<int>(ui);
    for (const auto& s : sources) {
      double a = clipped_area(s.geom, boxes[i]);
      if (a <= 0.0) continue;
      double w = a;
      if (wt == WeightType::population) w *= s.values.at(popdens_name);
      areasum[i] += a;
      wsum[i] += w;
      for (int v = 0; v < nv; ++v) vals(i, v) += w * s.values.at(names[v]);
    }
  });

  double cell_area = g.cellsize * g.cellsize;
  std::string bad;
  for (int i = 0; i < n; ++i) {
    double gap = g.cover_area[i] - areasum[i];
    if (wsum[i] <= 0.0 || gap > 0.05 * cell_area) {
      if (!bad.empty()) bad += ",";
      bad += std::to_string(i + 1);
    }
  }
  if (!bad.empty())
    throw no_coverage_error("covariate sources do not cover cells: " + bad);

  for (int v = 0; v < nv; ++v) {
    Eigen::MatrixXd m(n, g.T);
    for (int i = 0; i < n; ++i) m.row(i).setConstant(vals(i, v) / wsum[i]);
    g.covariates[names[v]] = std::move(m);
  }
}

struct IntersectionEntry {
  int cell = 0;    // current grid row
  int region = 0;  // region index
  double w = 0.0;  // ||Q_ij|| / ||R_j||
};

struct IntersectionMap {
  std::vector<IntersectionEntry> entries;  // grouped by region, cells ascending
  int n_regions = 0;
  int q() const { return static_cast<int>(entries.size()); }

  std::vector<std::vector<int>> by_region() const {
    std::vector<std::vector<int>> o(n_regions);
    for (int k = 0; k < q(); ++k) o[entries[k].region].push_back(k);
    return o;
  }
};

inline IntersectionMap compute_intersections(const RegularGrid& g,
                                             const std::vector<MultiPolygon>& regions) {
  IntersectionMap imap;
  imap.n_regions = static_cast<int>(regions.size());
  std::vector<std::vector<IntersectionEntry>> per_region(regions.size());
  std::vector<double> region_area(regions.size());
  for (std::size_t j = 0; j < regions.size(); ++j) {
    validate(regions[j]);
    region_area[j] = area(regions[j]);
    if (region_area[j] <= 0.0)
      throw invalid_geometry_error("region " + std::to_string(j + 1) + " has zero area");
  }

  parallel_for(regions.size(), [&](std::size_t j) {
    const auto& reg = regions[j];
    double ra = region_area[j];
    Box rb = bounding_box(reg);
    for (int i = 0; i < g.n(); ++i) {
      Box cb = g.cell_box(i);
      if (cb.xmax <= rb.xmin || cb.xmin >= rb.xmax || cb.ymax <= rb.ymin || cb.ymin >= rb.ymax)
        continue;
      double a = clipped_area(reg, cb);
      if (a > 0.0) per_region[j].push_back({i, static_cast<int>(j), a / ra});
    }
  });

  for (std::size_t j = 0; j < regions.size(); ++j) {
    double s = 0.0;
    for (const auto& e : per_region[j]) s += e.w;
    if (std::abs(s - 1.0) > 1e-9)
      throw invalid_geometry_error("region " + std::to_string(j + 1) +
                                   " weights sum to " + std::to_string(s) +
                                   "; grid does not cover it");
    imap.entries.insert(imap.entries.end(), per_region[j].begin(), per_region[j].end());
  }
  return imap;
}

// Permutes all row-indexed grid data; perm[k] = current row that moves to row k.
inline void apply_order(RegularGrid& g, const std::vector<int>& perm) {
  const int n = g.n();
  if (static_cast<int>(perm.size()) != n) throw dimension_error("permutation length mismatch");
  std::vector<GridCell> cells(n);
  std::vector<double> cover(n);
  std::vector<int> order(n);
  Eigen::MatrixXi counts(n, g.T);
  for (int k = 0; k < n; ++k) {
    cells[k] = g.cells[perm[k]];
    cover[k] = g.cover_area[perm[k]];
    order[k] = g.order[perm[k]];
    counts.row(k) = g.counts.row(perm[k]);
  }
  for (auto& [name, m] : g.covariates) {
    Eigen::MatrixXd r(n, m.cols());
    for (int k = 0; k < n; ++k) r.row(k) = m.row(perm[k]);
    m = std::move(r);
  }
  g.cells = std::move(cells);
  g.cover_area = std::move(cover);
  g.order = std::move(order);
  g.counts = std::move(counts);
}

// Greedy max-min ordering: start at the cell nearest the centroid of all cell
// centres, then repeatedly take the cell maximising the minimum distance to
// everything already ordered. Ties break to the lowest current index.
inline std::vector<int> minimax_permutation(const RegularGrid& g) {
  const int n = g.n();
  Eigen::MatrixXd c = g.coords();
  Eigen::RowVector2d centroid = c.colwise().mean();
  int first = 0;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    double d = (c.row(i) - centroid).squaredNorm();
    if (d < best) {  // strict: ties keep the lowest index
      best = d;
      first = i;
    }
  }
  std::vector<int> perm;
  perm.reserve(n);
  perm.push_back(first);
  std::vector<char> used(n, 0);
  used[first] = 1;
  std::vector<double> mind(n);
  for (int i = 0; i < n; ++i) mind[i] = (c.row(i) - c.row(first)).norm();
  for (int k = 1; k < n; ++k) {
    int pick = -1;
    double bestd = -1.0;
    for (int i = 0; i < n; ++i) {
      if (used[i]) continue;
      if (mind[i] > bestd) {  // strict: ties keep the lowest index
        bestd = mind[i];
        pick = i;
      }
    }
    perm.push_back(pick);
    used[pick] = 1;
    for (int i = 0; i < n; ++i)
      if (!used[i]) mind[i] = std::min(mind[i], (c.row(i) - c.row(pick)).norm());
  }
  return perm;
}

enum class Ordering { none, minimax, random, y_coordinate };

inline std::vector<int> reorder(RegularGrid& g, Ordering how, std::uint64_t seed = 1) {
  std::vector<int> perm(g.n());
  for (int i = 0; i < g.n(); ++i) perm[i] = i;
  switch (how) {
    case Ordering::none:
      return perm;
    case Ordering::minimax:
      perm = minimax_permutation(g);
      break;
    case Ordering::random: {
      Rng rng(Rng::derive(seed, 0x0dde5));
      for (int i = g.n() - 1; i > 0; --i)
        std::swap(perm[i], perm[static_cast<int>(rng.below(i + 1))]);
      break;
    }
    case Ordering::y_coordinate:
      std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) {
        if (g.cells[a].y0 != g.cells[b].y0) return g.cells[a].y0 < g.cells[b].y0;
        return g.cells[a].x0 < g.cells[b].x0;
      });
      break;
  }
  apply_order(g, perm);
  return perm;
}

// Adds indicator covariates time2i..timeTi. Returns false (no-op) when T == 1.
inline bool add_time_indicators(RegularGrid& g) {
  if (g.T < 2) return false;
  for (int k = 2; k <= g.T; ++k) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(g.n(), g.T);
    m.col(k - 1).setOnes();
    g.covariates["time" + std::to_string(k) + "i"] = std::move(m);
  }
  return true;
}

}  // namespace lgcp

#endif
