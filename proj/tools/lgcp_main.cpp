// lgcp: batch pipeline for spatio-temporal case-count surveillance.
// Subcommands: grid, fit, predict, hotspot, semivariogram.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lgcp/estimation.hpp"
#include "lgcp/geojson.hpp"
#include "lgcp/io.hpp"
#include "lgcp/outputs.hpp"

namespace fs = std::filesystem;
using namespace lgcp;

namespace {

std::string config_hash_of(const json& config) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(config.dump())));
  return buf;
}

// deterministic manifest; wall-clock goes to run_log.json, the one
// intentionally non-reproducible output
void write_manifest(const std::string& dir, const std::string& command, const json& config,
                    const std::vector<std::string>& outputs, std::uint64_t seed) {
  json m;
  m["schema"] = "lgcp-manifest-v1";
  m["version"] = "0.1.0";
  m["command"] = command;
  m["seed"] = seed;
  m["config"] = config;
  m["config_hash"] = config_hash_of(config);
  m["outputs"] = outputs;
  write_json(dir + "/manifest.json", m);
}

void write_run_log(const std::string& dir, double wall_seconds) {
  json r;
  r["wall_seconds"] = wall_seconds;
  r["finished"] = true;
  write_json(dir + "/run_log.json", r);
}

std::vector<std::string> split_names(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(ch))) {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

Kernel parse_kernel(const std::string& s) {
  if (s == "exponential" || s == "exp") return Kernel::exponential;
  if (s == "squared_exponential" || s == "sqexp") return Kernel::squared_exponential;
  throw config_error("unknown kernel: " + s);
}

Approx parse_approx(const std::string& s) {
  if (s == "nngp") return Approx::nngp;
  if (s == "hsgp") return Approx::hsgp;
  if (s == "none") return Approx::none;
  throw config_error("unknown approximation: " + s);
}

Ordering parse_ordering(const std::string& s) {
  if (s == "minimax") return Ordering::minimax;
  if (s == "none") return Ordering::none;
  if (s == "random") return Ordering::random;
  if (s == "y") return Ordering::y_coordinate;
  throw config_error("unknown ordering: " + s);
}

std::string outdir_or_env(std::string dir) {
  if (dir.empty())
    if (const char* env = std::getenv("LGCP_OUTDIR")) dir = env;
  if (dir.empty()) throw config_error("no output directory given (--out or LGCP_OUTDIR)");
  return dir;
}

// column-stacked (time-major) vector of an n x T matrix
Eigen::VectorXd stack(const Eigen::MatrixXd& m) {
  return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
}

Eigen::VectorXd stack_counts(const Eigen::MatrixXi& m) {
  Eigen::MatrixXd d = m.cast<double>();
  return stack(d);
}

// ---------------------------------------------------------------------------
// grid
// ---------------------------------------------------------------------------

struct GridArgs {
  std::string boundary, regions, events;
  double cellsize = 0.0;
  int laglength = 1;
  std::string t_window = "day";
  std::vector<std::string> covariate_files;
  std::string covariate_names;
  std::string weight_type = "area";
  std::string popdens_name;
  bool time_indicators = false;
  std::string order = "minimax";
  int max_cells = 100000;
  std::string out;
  std::uint64_t seed = 1;
};

int cmd_grid(const GridArgs& a) {
  auto t0 = std::chrono::steady_clock::now();
  std::string dir = outdir_or_env(a.out);
  json config = {{"boundary", a.boundary},
                 {"regions", a.regions},
                 {"events", a.events},
                 {"cellsize", a.cellsize},
                 {"laglength", a.laglength},
                 {"t_window", a.t_window},
                 {"covariate_files", a.covariate_files},
                 {"covariate_names", a.covariate_names},
                 {"weight_type", a.weight_type},
                 {"popdens_name", a.popdens_name},
                 {"time_indicators", a.time_indicators},
                 {"order", a.order},
                 {"max_cells", a.max_cells},
                 {"seed", a.seed}};

  GridArtifact art;
  int laglength = a.laglength;
  if (!a.regions.empty()) {
    art.region_mode = true;
    if (!a.events.empty())
      throw config_error("region mode takes counts from the regions file, not an events CSV");
    auto rfeats = read_geojson(a.regions);
    if (rfeats.empty()) throw config_error("regions file has no features");
    // counts columns: y (single period) or t1..tT
    int T = 0;
    if (rfeats[0].props.count("y")) {
      T = 1;
    } else {
      while (rfeats[0].props.count("t" + std::to_string(T + 1))) ++T;
    }
    if (T == 0)
      throw config_error("region features need counts in a 'y' or 't1..tT' property");
    laglength = T;
    MultiPolygon boundary;
    for (auto& f : rfeats)
      for (auto& part : f.geom.parts) boundary.parts.push_back(part);
    art.grid = build_grid(boundary, a.cellsize, a.max_cells);
    reorder(art.grid, parse_ordering(a.order), a.seed);
    points_to_grid(art.grid, CaseEvents{}, T);

    RegionData& rd = art.regions;
    int r = static_cast<int>(rfeats.size());
    rd.counts.resize(r, T);
    for (int j = 0; j < r; ++j) {
      rd.polys.push_back(rfeats[j].geom);
      rd.ids.push_back(rfeats[j].labels.count("id") ? rfeats[j].labels.at("id") : "");
      for (int t = 0; t < T; ++t) {
        std::string key =
            (T == 1 && rfeats[j].props.count("y")) ? "y" : "t" + std::to_string(t + 1);
        if (!rfeats[j].props.count(key))
          throw config_error("region " + std::to_string(j + 1) + " lacks counts column " + key);
        double v = rfeats[j].props.at(key);
        if (v < 0 || v != std::floor(v))
          throw config_error("region counts must be nonnegative integers");
        rd.counts(j, t) = static_cast<int>(v);
      }
    }
    // region covariates: numeric properties present on every feature that are
    // neither counts nor the region index
    for (const auto& [k, v] : rfeats[0].props) {
      (void)v;
      if (k == "y" || k == "region") continue;
      bool is_count = k.size() >= 2 && k[0] == 't';
      if (is_count)
        for (std::size_t i = 1; i < k.size(); ++i)
          is_count = is_count && std::isdigit(static_cast<unsigned char>(k[i]));
      if (is_count) continue;
      bool everywhere = true;
      for (const auto& f : rfeats) everywhere = everywhere && f.props.count(k) > 0;
      if (everywhere) {
        Eigen::MatrixXd m(r, T);
        for (int j = 0; j < r; ++j) m.row(j).setConstant(rfeats[j].props.at(k));
        rd.covariates[k] = std::move(m);
      }
    }
    art.imap = compute_intersections(art.grid, rd.polys);
  } else {
    if (a.boundary.empty()) throw config_error("either --boundary or --regions is required");
    auto bfeats = read_geojson(a.boundary);
    if (bfeats.empty()) throw config_error("boundary file has no features");
    MultiPolygon boundary;
    for (auto& f : bfeats)
      for (auto& part : f.geom.parts) boundary.parts.push_back(part);
    art.grid = build_grid(boundary, a.cellsize, a.max_cells);
    reorder(art.grid, parse_ordering(a.order), a.seed);
    CaseEvents events;
    if (!a.events.empty())
      events = read_events_csv(a.events, parse_time_window(a.t_window), laglength);
    points_to_grid(art.grid, events, laglength);
  }

  if (!a.covariate_files.empty()) {
    std::vector<std::string> names = split_names(a.covariate_names);
    if (names.empty()) throw config_error("--covariate-names is required with --covariates");
    std::vector<CovariateSource> sources;
    for (const auto& path : a.covariate_files)
      for (auto& f : read_geojson(path)) sources.push_back({std::move(f.geom), f.props});
    WeightType wt = a.weight_type == "population" ? WeightType::population : WeightType::area;
    add_covariates(art.grid, sources, names, wt, a.popdens_name);
  }
  if (a.time_indicators) add_time_indicators(art.grid);

  fs::create_directories(dir);
  save_grid_artifact(art, dir);
  std::vector<std::string> outputs{"grid.geojson", "grid_meta.json"};
  if (art.region_mode) {
    outputs.push_back("regions.geojson");
    outputs.push_back("intersections.json");
  }
  write_manifest(dir, "grid", config, outputs, a.seed);
  write_run_log(dir,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  std::cout << "grid: " << art.grid.n() << " cells, T = " << art.grid.T
            << (art.region_mode ? ", region mode" : "") << ", written to " << dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

struct FitArgs {
  std::string grid_dir, out;
  std::string offset;
  std::string covariates;         // grid-level
  std::string region_covariates;  // region-level
  std::string approx = "nngp";
  std::string kernel = "exponential";
  int m = 15;
  double c = 2.0;
  std::string method = "ml";
  // ml
  std::string algorithm = "saem";
  double alpha = 0.7;
  bool no_polyak = false;
  int m_k = 0;
  bool adaptive_mk = false;
  int max_iter = 40;
  double tolerance = 1e-2;
  double caffo_delta = 0.05;
  double caffo_epsilon = 0.2;
  std::string optimiser = "bfgs";
  std::vector<double> known_theta;
  int warmup = 250;
  int prediction_draws = 200;
  // bayes
  int chains = 2;
  int iter_warmup = 500;
  int iter_sampling = 500;
  double prior_gamma_sd = 5.0;
  double prior_sigma_scale = 0.5;
  double prior_phi_scale = 0.5;
  std::uint64_t seed = 1;
};

struct AssembledModel {
  ModelData data;
  LatentModel lm;
  std::vector<std::string> gamma_names;
};

AssembledModel assemble_model(const GridArtifact& art, const std::string& offset,
                              const std::vector<std::string>& covs,
                              const std::vector<std::string>& rcovs, Approx approx,
                              Kernel kernel, int m, double c) {
  const RegularGrid& g = art.grid;
  AssembledModel out;
  ModelData& md = out.data;
  md.n = g.n();
  md.T = g.T;
  const int nT = g.n() * g.T;

  if (!art.region_mode) {
    if (!rcovs.empty())
      throw config_error("region covariates supplied for a grid-mode artifact");
    md.y = stack_counts(g.counts);
    md.X.resize(nT, 1 + covs.size());
    md.X.col(0).setOnes();
    out.gamma_names.push_back("intercept");
    for (std::size_t i = 0; i < covs.size(); ++i) {
      md.X.col(1 + i) = stack(g.covariate(covs[i]));
      out.gamma_names.push_back(covs[i]);
    }
    if (offset.empty())
      md.log_offset = Eigen::VectorXd::Zero(nT);
    else
      md.log_offset = stack(g.covariate(offset)).array().log();
  } else {
    const RegionData& rd = art.regions;
    int r = static_cast<int>(rd.polys.size());
    md.design = build_region_design(art.imap, g.n(), r, g.T);
    md.y = stack_counts(rd.counts);
    md.Xr.resize(r * g.T, 1 + rcovs.size());
    md.Xr.col(0).setOnes();
    out.gamma_names.push_back("intercept");
    for (std::size_t i = 0; i < rcovs.size(); ++i) {
      if (!rd.covariates.count(rcovs[i]))
        throw unknown_covariate_error("unknown region covariate: " + rcovs[i]);
      md.Xr.col(1 + i) = stack(rd.covariates.at(rcovs[i]));
      out.gamma_names.push_back(rcovs[i]);
    }
    md.X.resize(nT, covs.size());
    for (std::size_t i = 0; i < covs.size(); ++i) {
      md.X.col(i) = stack(g.covariate(covs[i]));
      out.gamma_names.push_back(covs[i]);
    }
    if (offset.empty()) {
      md.log_offset = Eigen::VectorXd::Zero(r * g.T);
    } else if (rd.covariates.count(offset)) {
      md.log_offset = stack(rd.covariates.at(offset)).array().log().matrix();
    } else {
      throw unknown_covariate_error("offset must be a region covariate: " + offset);
    }
  }
  if (!md.log_offset.allFinite()) throw config_error("offset has nonpositive entries");
  out.lm = LatentModel::make(approx, g.coords(), g.T, kernel, m, c);
  return out;
}

json trace_to_json(const std::vector<TraceRow>& trace) {
  json arr = json::array();
  for (const auto& r : trace) {
    json row;
    row["iter"] = r.iter;
    row["gamma"] = std::vector<double>(r.gamma.data(), r.gamma.data() + r.gamma.size());
    row["sigma_sq"] = r.sigma_sq;
    row["phi"] = r.phi;
    row["rho"] = r.rho;
    row["m_k"] = r.m_k;
    row["ll_pois"] = r.ll_pois;
    row["ll_mvn"] = r.ll_mvn;
    row["max_param_diff"] = r.max_param_diff;
    row["delta_ll"] = r.delta_ll;
    row["caffo_sd"] = r.caffo_sd;
    row["caffo_u"] = std::isfinite(r.caffo_u) ? json(r.caffo_u) : json();
    row["accept"] = r.accept;
    arr.push_back(std::move(row));
  }
  return arr;
}

int cmd_fit(const FitArgs& a) {
  auto t0 = std::chrono::steady_clock::now();
  std::string dir = outdir_or_env(a.out.empty() ? a.grid_dir : a.out);
  GridArtifact art = load_grid_artifact(a.grid_dir);

  json config = {{"grid", a.grid_dir},
                 {"offset", a.offset},
                 {"covariates", a.covariates},
                 {"region_covariates", a.region_covariates},
                 {"approx", a.approx},
                 {"kernel", a.kernel},
                 {"m", a.m},
                 {"c", a.c},
                 {"method", a.method},
                 {"algorithm", a.algorithm},
                 {"alpha", a.alpha},
                 {"polyak", !a.no_polyak},
                 {"m_k", a.m_k},
                 {"adaptive_mk", a.adaptive_mk},
                 {"max_iter", a.max_iter},
                 {"tolerance", a.tolerance},
                 {"delta", a.caffo_delta},
                 {"epsilon", a.caffo_epsilon},
                 {"optimiser", a.optimiser},
                 {"known_theta", a.known_theta},
                 {"warmup", a.warmup},
                 {"prediction_draws", a.prediction_draws},
                 {"chains", a.chains},
                 {"iter_warmup", a.iter_warmup},
                 {"iter_sampling", a.iter_sampling},
                 {"prior_gamma_sd", a.prior_gamma_sd},
                 {"prior_sigma_scale", a.prior_sigma_scale},
                 {"prior_phi_scale", a.prior_phi_scale},
                 {"seed", a.seed}};

  AssembledModel am =
      assemble_model(art, a.offset, split_names(a.covariates), split_names(a.region_covariates),
                     parse_approx(a.approx), parse_kernel(a.kernel), a.m, a.c);

  json fitj;
  fitj["schema"] = "lgcp-fit-v1";
  fitj["method"] = a.method;
  fitj["model"] = {{"offset", a.offset},
                   {"covariates", split_names(a.covariates)},
                   {"region_covariates", split_names(a.region_covariates)},
                   {"approx", a.approx},
                   {"kernel", a.kernel},
                   {"m", a.m},
                   {"c", a.c},
                   {"region_mode", art.region_mode}};
  fitj["gamma_names"] = am.gamma_names;
  fitj["seed"] = a.seed;
  fitj["grid_hash"] = art.hash;
  fitj["config_hash"] = config_hash_of(config);

  fs::create_directories(dir);
  std::vector<std::string> outputs{"fit.json", "samples.csv"};

  if (a.method == "ml") {
    FitOptions opts;
    opts.algorithm = a.algorithm == "mcmcml" ? Algorithm::mcmcml : Algorithm::saem;
    opts.alpha = a.alpha;
    opts.use_polyak = !a.no_polyak;
    opts.m_k = a.m_k;
    opts.adaptive_mk = a.adaptive_mk;
    opts.max_iter = a.max_iter;
    opts.tolerance = a.tolerance;
    opts.delta = a.caffo_delta;
    opts.epsilon = a.caffo_epsilon;
    opts.optimiser = a.optimiser == "nm" ? Optimiser::derivative_free : Optimiser::quasi_newton;
    opts.warmup = a.warmup;
    opts.prediction_draws = a.prediction_draws;
    opts.seed = a.seed;
    std::optional<std::array<double, 3>> known;
    if (!a.known_theta.empty()) {
      if (a.known_theta.size() != 3) throw config_error("--known-theta takes sigma_sq,phi,rho");
      known = std::array<double, 3>{a.known_theta[0], a.known_theta[1], a.known_theta[2]};
    }
    FitResult fit = mcmcml_fit(am.data, am.lm, opts, known);

    fitj["estimates"] = {
        {"gamma", std::vector<double>(fit.gamma.data(), fit.gamma.data() + fit.gamma.size())},
        {"sigma_sq", fit.theta.sigma_sq},
        {"phi", fit.theta.phi},
        {"rho", fit.theta.rho}};
    fitj["se"] = std::vector<double>(fit.se.data(), fit.se.data() + fit.se.size());
    fitj["theta_source"] = fit.theta_fixed ? "fixed" : "estimated";
    fitj["converged"] = fit.converged;
    fitj["stop_reason"] = fit.stop_reason;
    fitj["trace"] = trace_to_json(fit.trace);
    fitj["sampler"] = {{"accept_rate", fit.accept_rate},
                       {"clamp_events", fit.clamp_events},
                       {"step_size", fit.bank.step_size}};
    write_json(dir + "/fit.json", fitj);
    write_matrix_csv(dir + "/samples.csv", fit.bank.zstar.transpose(), "z");

    // convergence trace as CSV for external diagnostics
    std::vector<std::string> header{"iter",   "sigma_sq",       "phi",     "rho",
                                    "m_k",    "ll_pois",        "ll_mvn",  "max_param_diff",
                                    "caffo_u", "accept"};
    for (const auto& name : am.gamma_names) header.push_back("gamma_" + name);
    std::vector<std::vector<double>> rows;
    for (const auto& r : fit.trace) {
      std::vector<double> row{static_cast<double>(r.iter), r.sigma_sq, r.phi, r.rho,
                              static_cast<double>(r.m_k),  r.ll_pois,  r.ll_mvn,
                              r.max_param_diff,            r.caffo_u,  r.accept};
      for (int i = 0; i < r.gamma.size(); ++i) row.push_back(r.gamma(i));
      rows.push_back(std::move(row));
    }
    write_csv(dir + "/trace.csv", header, rows);
    outputs.push_back("trace.csv");
  } else if (a.method == "bayes") {
    Priors priors;
    priors.gamma_sd = Eigen::VectorXd::Constant(am.data.q_total(), a.prior_gamma_sd);
    priors.gamma_mean = Eigen::VectorXd::Zero(am.data.q_total());
    priors.sigma_scale = a.prior_sigma_scale;
    priors.phi_scale = a.prior_phi_scale;
    BayesOptions opts;
    opts.chains = a.chains;
    opts.iter_warmup = a.iter_warmup;
    opts.iter_sampling = a.iter_sampling;
    BayesResult res = bayes_fit(am.data, am.lm, priors, opts, a.seed);

    json post;
    post["names"] = res.names;
    post["mean"] = std::vector<double>(res.mean.data(), res.mean.data() + res.mean.size());
    post["sd"] = std::vector<double>(res.sd.data(), res.sd.data() + res.sd.size());
    post["q05"] = std::vector<double>(res.q05.data(), res.q05.data() + res.q05.size());
    post["q95"] = std::vector<double>(res.q95.data(), res.q95.data() + res.q95.size());
    post["rhat"] = std::vector<double>(res.rhat.data(), res.rhat.data() + res.rhat.size());
    post["accept"] = {{"z", res.accept_z},
                      {"gamma", res.accept_gamma},
                      {"theta", res.accept_theta}};
    post["chains"] = res.chains;
    post["iter_sampling"] = res.iter_sampling;
    fitj["posterior"] = post;
    // point summaries mirror the ml layout so predict can reuse them
    int Q = am.data.q_total();
    std::vector<double> gmean(res.mean.data(), res.mean.data() + Q);
    fitj["estimates"] = {{"gamma", gmean},
                         {"sigma_sq", res.mean(Q) * res.mean(Q)},
                         {"phi", res.mean(Q + 1)},
                         {"rho", am.data.T > 1 ? res.mean(Q + 2) : 0.0}};
    fitj["theta_source"] = "posterior";
    write_json(dir + "/fit.json", fitj);
    write_matrix_csv(dir + "/samples.csv", res.zstar.transpose(), "z");
    write_matrix_csv(dir + "/draws.csv", res.draws.transpose(), "p");
    outputs.push_back("draws.csv");
  } else {
    throw config_error("unknown method: " + a.method + " (expected ml or bayes)");
  }

  write_manifest(dir, "fit", config, outputs, a.seed);
  write_run_log(dir,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  std::cout << "fit (" << a.method << ", " << a.approx << ") written to " << dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// predict / hotspot shared plumbing
// ---------------------------------------------------------------------------

struct LoadedFit {
  GridArtifact art;
  AssembledModel am;
  ParamDraws draws;
  json fitj;
};

LoadedFit load_for_prediction(const std::string& grid_dir, const std::string& fit_dir) {
  LoadedFit lf;
  lf.art = load_grid_artifact(grid_dir);
  if (!fs::exists(fit_dir + "/fit.json"))
    throw config_error("no fit artifact in " + fit_dir + "; run `lgcp fit` first");
  lf.fitj = read_json(fit_dir + "/fit.json");
  if (lf.fitj["grid_hash"].get<std::string>() != lf.art.hash)
    throw config_error(
        "fit artifact was produced from a different grid (hash mismatch); re-run fit");
  const json& model = lf.fitj["model"];
  std::vector<std::string> covs = model["covariates"].get<std::vector<std::string>>();
  std::vector<std::string> rcovs = model["region_covariates"].get<std::vector<std::string>>();
  lf.am = assemble_model(lf.art, model["offset"].get<std::string>(), covs, rcovs,
                         parse_approx(model["approx"].get<std::string>()),
                         parse_kernel(model["kernel"].get<std::string>()), model["m"].get<int>(),
                         model["c"].get<double>());

  Eigen::MatrixXd zs = read_matrix_csv(fit_dir + "/samples.csv").transpose();
  const int Q = lf.am.data.q_total();
  if (lf.fitj["method"] == "bayes") {
    Eigen::MatrixXd dr = read_matrix_csv(fit_dir + "/draws.csv").transpose();
    lf.draws.gamma = dr.topRows(Q);
    lf.draws.theta.resize(3, dr.cols());
    lf.draws.theta.row(0) = dr.row(Q).array().square();  // sigma -> sigma_sq
    lf.draws.theta.row(1) = dr.row(Q + 1);
    if (dr.rows() > Q + 2)
      lf.draws.theta.row(2) = dr.row(Q + 2);
    else
      lf.draws.theta.row(2).setZero();
  } else {
    const json& est = lf.fitj["estimates"];
    std::vector<double> g = est["gamma"].get<std::vector<double>>();
    lf.draws.gamma = Eigen::Map<const Eigen::VectorXd>(g.data(), g.size());
    lf.draws.theta.resize(3, 1);
    lf.draws.theta << est["sigma_sq"].get<double>(), est["phi"].get<double>(),
        est["rho"].get<double>();
  }
  lf.draws.zstar = zs;
  return lf;
}

json summarise_to_features(const GridArtifact& art, const PredictionSet& preds, bool want_pred,
                           bool want_rr, bool want_irr) {
  const RegularGrid& g = art.grid;
  std::vector<json> props(g.n());
  for (int i = 0; i < g.n(); ++i) props[i]["cell"] = i + 1;
  auto attach = [&](const std::string& name, const Eigen::MatrixXd& draws, int units) {
    Eigen::VectorXd mean = draw_mean(draws);
    Eigen::VectorXd sd = draw_sd(draws);
    int T = static_cast<int>(draws.rows()) / units;
    for (int i = 0; i < units; ++i)
      for (int t = 0; t < T; ++t) {
        std::string suffix = T == 1 ? "" : std::to_string(t + 1);
        props[i][name + suffix + "_mean"] = mean(t * units + i);
        props[i][name + suffix + "_sd"] = sd(t * units + i);
      }
  };
  if (want_rr) attach("rr", preds.rr, g.n());
  if (!preds.region) {
    if (want_pred) {
      attach("pred", preds.pred, g.n());
      attach("percap", preds.percap, g.n());
    }
    if (want_irr) attach("irr", preds.irr, g.n());
  }
  json fc;
  fc["type"] = "FeatureCollection";
  json arr = json::array();
  for (int i = 0; i < g.n(); ++i) {
    Box b = g.cell_box(i);
    json jf;
    jf["type"] = "Feature";
    jf["geometry"] = detail::geometry_to_json(rectangle(b.xmin, b.ymin, b.xmax, b.ymax));
    jf["properties"] = props[i];
    arr.push_back(std::move(jf));
  }
  fc["features"] = arr;
  return fc;
}

json region_summaries(const GridArtifact& art, const PredictionSet& preds, bool want_pred,
                      bool want_irr) {
  const RegionData& rd = art.regions;
  int r = static_cast<int>(rd.polys.size());
  std::vector<json> props(r);
  auto attach = [&](const std::string& name, const Eigen::MatrixXd& draws) {
    Eigen::VectorXd mean = draw_mean(draws);
    Eigen::VectorXd sd = draw_sd(draws);
    int T = static_cast<int>(draws.rows()) / r;
    for (int j = 0; j < r; ++j)
      for (int t = 0; t < T; ++t) {
        std::string suffix = T == 1 ? "" : std::to_string(t + 1);
        props[j][name + suffix + "_mean"] = mean(t * r + j);
        props[j][name + suffix + "_sd"] = sd(t * r + j);
      }
  };
  if (want_pred) {
    attach("pred", preds.pred);
    attach("percap", preds.percap);
  }
  if (want_irr) attach("irr", preds.irr);
  json fc;
  fc["type"] = "FeatureCollection";
  json arr = json::array();
  for (int j = 0; j < r; ++j) {
    json jf;
    jf["type"] = "Feature";
    jf["geometry"] = detail::geometry_to_json(rd.polys[j]);
    json p = props[j];
    p["region"] = j + 1;
    if (!rd.ids[j].empty()) p["id"] = rd.ids[j];
    jf["properties"] = p;
    arr.push_back(std::move(jf));
  }
  fc["features"] = arr;
  return fc;
}

struct PredictArgs {
  std::string grid_dir, fit_dir, out;
  std::string types = "pred,rr";
  int irr_lag = 1;
  std::string aggregate;  // target polygons GeoJSON
  std::string weight_type = "area";
  std::string popdens;
  std::uint64_t seed = 1;
};

int cmd_predict(const PredictArgs& a) {
  auto t0 = std::chrono::steady_clock::now();
  std::string dir = outdir_or_env(a.out);
  LoadedFit lf = load_for_prediction(a.grid_dir, a.fit_dir);
  json config = {{"grid", a.grid_dir},
                 {"fit", a.fit_dir},
                 {"types", a.types},
                 {"irr_lag", a.irr_lag},
                 {"aggregate", a.aggregate},
                 {"weight_type", a.weight_type},
                 {"popdens", a.popdens},
                 {"seed", a.seed}};

  std::vector<PredType> types;
  bool want_pred = false, want_rr = false, want_irr = false;
  for (const auto& t : split_names(a.types)) {
    if (t == "pred") {
      types.push_back(PredType::pred);
      want_pred = true;
    } else if (t == "rr") {
      types.push_back(PredType::rr);
      want_rr = true;
    } else if (t == "irr") {
      types.push_back(PredType::irr);
      want_irr = true;
    } else {
      throw config_error("unknown prediction type: " + t);
    }
  }
  PredictionSet preds = extract_preds(lf.am.data, lf.am.lm, lf.draws, types, a.irr_lag);

  fs::create_directories(dir);
  std::vector<std::string> outputs{"predictions.geojson", "predictions.csv"};
  write_json(dir + "/predictions.geojson",
             summarise_to_features(lf.art, preds, want_pred, want_rr, want_irr));
  if (lf.art.region_mode && (want_pred || want_irr)) {
    write_json(dir + "/predictions_regions.geojson",
               region_summaries(lf.art, preds, want_pred, want_irr));
    outputs.push_back("predictions_regions.geojson");
  }

  // flat CSV: one row per unit and period
  {
    std::vector<std::string> header{"unit", "t"};
    struct Col {
      const Eigen::MatrixXd* m;
      int units;
      Eigen::VectorXd mean, sd;
    };
    std::vector<Col> cols;
    auto add = [&](const std::string& name, const Eigen::MatrixXd& m, int units) {
      header.push_back(name + "_mean");
      header.push_back(name + "_sd");
      cols.push_back({&m, units, draw_mean(m), draw_sd(m)});
    };
    if (want_pred) {
      add("pred", preds.pred, preds.units());
      add("percap", preds.percap, preds.units());
    }
    if (want_rr) add("rr", preds.rr, preds.n);
    if (want_irr) add("irr", preds.irr, preds.units());
    int units = preds.region ? std::max(preds.n, preds.r) : preds.n;
    std::vector<std::vector<double>> rows;
    for (int t = 0; t < preds.T; ++t)
      for (int i = 0; i < units; ++i) {
        std::vector<double> row{static_cast<double>(i + 1), static_cast<double>(t + 1)};
        for (const auto& col : cols) {
          int T_m = static_cast<int>(col.m->rows()) / col.units;
          if (i < col.units && t < T_m) {
            row.push_back(col.mean(t * col.units + i));
            row.push_back(col.sd(t * col.units + i));
          } else {
            row.push_back(std::numeric_limits<double>::quiet_NaN());
            row.push_back(std::numeric_limits<double>::quiet_NaN());
          }
        }
        rows.push_back(std::move(row));
      }
    write_csv(dir + "/predictions.csv", header, rows);
  }

  if (!a.aggregate.empty()) {
    auto tfeats = read_geojson(a.aggregate);
    std::vector<MultiPolygon> targets;
    for (auto& f : tfeats) targets.push_back(f.geom);
    WeightType wt = a.weight_type == "population" ? WeightType::population : WeightType::area;
    Eigen::VectorXd dens;
    if (wt == WeightType::population) {
      if (a.popdens.empty())
        throw config_error("--popdens names the density covariate for population weighting");
      dens = lf.art.grid.covariate(a.popdens).col(0);
    }
    // aggregate the grid-level statistic (rr when requested, else pred)
    const Eigen::MatrixXd& source = want_rr ? preds.rr : preds.pred;
    std::string source_name = want_rr ? "rr" : "pred";
    if (source.size() == 0) throw config_error("aggregation needs rr or pred draws");
    if (!want_rr && preds.region)
      throw config_error("aggregation of region-level incidence is not supported; use rr");
    AggregateResult agg = aggregate_output(lf.art.grid, targets, source, preds.T, wt, dens);
    json fc;
    fc["type"] = "FeatureCollection";
    json arr = json::array();
    int R = static_cast<int>(targets.size());
    for (int j = 0; j < R; ++j) {
      json jf;
      jf["type"] = "Feature";
      jf["geometry"] = detail::geometry_to_json(targets[j]);
      json props;
      props["target"] = j + 1;
      for (int t = 0; t < preds.T; ++t) {
        std::string suffix = preds.T == 1 ? "" : std::to_string(t + 1);
        props[source_name + suffix + "_mean"] = agg.mean(t * R + j);
        props[source_name + suffix + "_sd"] = agg.sd(t * R + j);
      }
      jf["properties"] = props;
      arr.push_back(std::move(jf));
    }
    fc["features"] = arr;
    write_json(dir + "/aggregated.geojson", fc);
    outputs.push_back("aggregated.geojson");
  }

  write_manifest(dir, "predict", config, outputs, a.seed);
  write_run_log(dir,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  std::cout << "predictions written to " << dir << "\n";
  return 0;
}

struct HotspotArgs {
  std::string grid_dir, fit_dir, out;
  double incidence_threshold = std::numeric_limits<double>::quiet_NaN();
  double rr_threshold = std::numeric_limits<double>::quiet_NaN();
  double irr_threshold = std::numeric_limits<double>::quiet_NaN();
  int irr_lag = 1;
  std::string label = "hotspot";
  std::uint64_t seed = 1;
};

int cmd_hotspot(const HotspotArgs& a) {
  auto t0 = std::chrono::steady_clock::now();
  std::string dir = outdir_or_env(a.out);
  LoadedFit lf = load_for_prediction(a.grid_dir, a.fit_dir);
  json config = {{"grid", a.grid_dir},
                 {"fit", a.fit_dir},
                 {"incidence_threshold", a.incidence_threshold},
                 {"rr_threshold", a.rr_threshold},
                 {"irr_threshold", a.irr_threshold},
                 {"irr_lag", a.irr_lag},
                 {"label", a.label},
                 {"seed", a.seed}};

  HotspotQuery query;
  std::vector<PredType> types;
  if (!std::isnan(a.incidence_threshold)) {
    query.incidence_threshold = a.incidence_threshold;
    types.push_back(PredType::pred);
  }
  if (!std::isnan(a.rr_threshold)) {
    query.rr_threshold = a.rr_threshold;
    types.push_back(PredType::rr);
  }
  if (!std::isnan(a.irr_threshold)) {
    query.irr_threshold = a.irr_threshold;
    query.irr_lag = a.irr_lag;
    types.push_back(PredType::irr);
  }
  query.label = a.label;
  PredictionSet preds = extract_preds(lf.am.data, lf.am.lm, lf.draws, types, a.irr_lag);
  Eigen::VectorXd prob = hotspot_prob(preds, query);

  bool grid_level = static_cast<int>(prob.size()) == lf.art.grid.n() && !lf.art.region_mode;
  if (lf.art.region_mode && static_cast<int>(prob.size()) == lf.art.grid.n())
    grid_level = true;  // rr-only query reports at the grid level
  fs::create_directories(dir);
  json fc;
  fc["type"] = "FeatureCollection";
  json arr = json::array();
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < prob.size(); ++i) {
    json jf;
    jf["type"] = "Feature";
    if (grid_level) {
      Box b = lf.art.grid.cell_box(i);
      jf["geometry"] = detail::geometry_to_json(rectangle(b.xmin, b.ymin, b.xmax, b.ymax));
    } else {
      jf["geometry"] = detail::geometry_to_json(lf.art.regions.polys[i]);
    }
    json props;
    props[grid_level ? "cell" : "region"] = i + 1;
    props[a.label] = prob(i);
    jf["properties"] = props;
    arr.push_back(std::move(jf));
    rows.push_back({static_cast<double>(i + 1), prob(i)});
  }
  fc["features"] = arr;
  json metaj;
  metaj["thresholds"] = config;
  fc["metadata"] = metaj;
  write_json(dir + "/hotspots.geojson", fc);
  write_csv(dir + "/hotspots.csv", {"unit", a.label}, rows);

  write_manifest(dir, "hotspot", config, {"hotspots.geojson", "hotspots.csv"}, a.seed);
  write_run_log(dir,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  std::cout << "hotspot probabilities written to " << dir << "\n";
  return 0;
}

struct SemivarArgs {
  std::string grid_dir, out;
  std::string column;
  int period = 1;
  int bins = 15;
};

int cmd_semivariogram(const SemivarArgs& a) {
  auto t0 = std::chrono::steady_clock::now();
  std::string dir = outdir_or_env(a.out.empty() ? a.grid_dir : a.out);
  GridArtifact art = load_grid_artifact(a.grid_dir);
  const RegularGrid& g = art.grid;
  if (a.period < 1 || a.period > g.T) throw config_error("period out of range");
  Eigen::VectorXd values;
  if (g.has_covariate(a.column)) {
    values = g.covariate(a.column).col(a.period - 1);
  } else if (a.column == "counts" || a.column.empty()) {
    values = g.counts.col(a.period - 1).cast<double>();
  } else {
    throw unknown_covariate_error("unknown column: " + a.column);
  }
  Semivariogram sv = empirical_semivariogram(g.coords(), values, a.bins);
  std::vector<std::vector<double>> rows;
  for (int b = 0; b < sv.bin_centre.size(); ++b)
    rows.push_back({sv.bin_centre(b), sv.gamma(b), static_cast<double>(sv.n_pairs(b))});
  fs::create_directories(dir);
  write_csv(dir + "/semivariogram.csv", {"bin_center", "semivariance", "n_pairs"}, rows);
  json config = {
      {"grid", a.grid_dir}, {"column", a.column}, {"period", a.period}, {"bins", a.bins}};
  write_manifest(dir, "semivariogram", config, {"semivariogram.csv"}, 1);
  write_run_log(dir,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  std::cout << "semivariogram written to " << dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatio-temporal LGCP engine for case-count surveillance"};
  app.require_subcommand(1);

  int threads = 0;
  app.add_option("--threads", threads, "worker threads (default: all cores)");

  GridArgs ga;
  auto* grid = app.add_subcommand("grid", "build the computational grid from boundary/regions");
  grid->add_option("--boundary", ga.boundary, "boundary GeoJSON (grid mode)");
  grid->add_option("--regions", ga.regions, "region polygons GeoJSON with counts (region mode)");
  grid->add_option("--events", ga.events, "case events CSV with columns x,y[,t]");
  grid->add_option("--cellsize", ga.cellsize, "grid cell size in map units")->required();
  grid->add_option("--laglength", ga.laglength, "number of time periods");
  grid->add_option("--t-window", ga.t_window, "date binning: day, week, or month");
  grid->add_option("--covariates", ga.covariate_files, "covariate polygon GeoJSON (repeatable)");
  grid->add_option("--covariate-names", ga.covariate_names, "comma-separated property names");
  grid->add_option("--weight-type", ga.weight_type, "covariate weighting: area or population");
  grid->add_option("--popdens-name", ga.popdens_name, "density property for population weights");
  grid->add_flag("--time-indicators", ga.time_indicators, "add time2i..timeTi indicators");
  grid->add_option("--order", ga.order, "cell ordering: minimax, none, random, y");
  grid->add_option("--max-cells", ga.max_cells, "guard on the candidate cell count");
  grid->add_option("--out", ga.out, "output directory");
  grid->add_option("--seed", ga.seed, "random seed (random ordering)");

  FitArgs fa;
  auto* fit = app.add_subcommand("fit", "fit the LGCP by maximum likelihood or MCMC");
  fit->add_option("--grid", fa.grid_dir, "grid artifact directory")->required();
  fit->add_option("--out", fa.out, "output directory (default: grid directory)");
  fit->add_option("--offset", fa.offset, "offset covariate (population density)");
  fit->add_option("--covariates", fa.covariates, "comma-separated grid covariates");
  fit->add_option("--region-covariates", fa.region_covariates, "region-level covariates");
  fit->add_option("--approx", fa.approx, "latent approximation: nngp, hsgp, none");
  fit->add_option("--kernel", fa.kernel, "covariance kernel: exponential, sqexp");
  fit->add_option("-m,--m", fa.m, "neighbours (nngp) or basis functions per dim (hsgp)");
  fit->add_option("-c,--c", fa.c, "HSGP boundary factor");
  fit->add_option("--method", fa.method, "ml or bayes");
  fit->add_option("--algorithm", fa.algorithm, "ml algorithm: saem or mcmcml");
  fit->add_option("--alpha", fa.alpha, "SAEM decay exponent in [0.5,1)");
  fit->add_flag("--no-polyak", fa.no_polyak, "disable Polyak-Ruppert averaging");
  fit->add_option("--m-k", fa.m_k, "MCMC draws per iteration (0 = default)");
  fit->add_flag("--adaptive-mk", fa.adaptive_mk, "adapt m_k by the Caffo rule");
  fit->add_option("--max-iter", fa.max_iter, "maximum outer iterations");
  fit->add_option("--tolerance", fa.tolerance, "parameter-difference stopping tolerance");
  fit->add_option("--delta", fa.caffo_delta, "Caffo confidence level");
  fit->add_option("--epsilon", fa.caffo_epsilon, "Caffo type-2 error rate");
  fit->add_option("--optimiser", fa.optimiser, "theta optimiser: bfgs or nm");
  fit->add_option("--known-theta", fa.known_theta, "fixed sigma_sq,phi,rho (skips theta step)")
      ->delimiter(',');
  fit->add_option("--warmup", fa.warmup, "MALA warmup iterations");
  fit->add_option("--prediction-draws", fa.prediction_draws, "final sample bank size");
  fit->add_option("--chains", fa.chains, "bayes: number of chains");
  fit->add_option("--iter-warmup", fa.iter_warmup, "bayes: warmup iterations");
  fit->add_option("--iter-sampling", fa.iter_sampling, "bayes: sampling iterations");
  fit->add_option("--prior-gamma-sd", fa.prior_gamma_sd, "normal prior sd for gamma");
  fit->add_option("--prior-sigma-scale", fa.prior_sigma_scale, "half-normal scale for sigma");
  fit->add_option("--prior-phi-scale", fa.prior_phi_scale, "half-normal scale for phi");
  fit->add_option("--seed", fa.seed, "random seed");

  PredictArgs pa;
  auto* predict = app.add_subcommand("predict", "extract predictions from a fit");
  predict->add_option("--grid", pa.grid_dir, "grid artifact directory")->required();
  predict->add_option("--fit", pa.fit_dir, "fit artifact directory")->required();
  predict->add_option("--out", pa.out, "output directory");
  predict->add_option("--types", pa.types, "comma-separated: pred, rr, irr");
  predict->add_option("--irr-lag", pa.irr_lag, "periods back for the IRR");
  predict->add_option("--aggregate", pa.aggregate, "target polygons GeoJSON to aggregate onto");
  predict->add_option("--weight-type", pa.weight_type, "aggregation weights: area or population");
  predict->add_option("--popdens", pa.popdens, "density covariate for population weights");
  predict->add_option("--seed", pa.seed, "recorded in the manifest");

  HotspotArgs ha;
  auto* hotspot = app.add_subcommand("hotspot", "exceedance probabilities from a fit");
  hotspot->add_option("--grid", ha.grid_dir, "grid artifact directory")->required();
  hotspot->add_option("--fit", ha.fit_dir, "fit artifact directory")->required();
  hotspot->add_option("--out", ha.out, "output directory");
  hotspot->add_option("--incidence-threshold", ha.incidence_threshold, "incidence threshold");
  hotspot->add_option("--rr-threshold", ha.rr_threshold, "relative-risk threshold");
  hotspot->add_option("--irr-threshold", ha.irr_threshold, "incidence-rate-ratio threshold");
  hotspot->add_option("--irr-lag", ha.irr_lag, "periods back for the IRR");
  hotspot->add_option("--label", ha.label, "output column label");
  hotspot->add_option("--seed", ha.seed, "recorded in the manifest");

  SemivarArgs sa;
  auto* semivar = app.add_subcommand("semivariogram", "empirical semivariogram of a grid column");
  semivar->add_option("--grid", sa.grid_dir, "grid artifact directory")->required();
  semivar->add_option("--out", sa.out, "output directory (default: grid directory)");
  semivar->add_option("--column", sa.column, "covariate name or 'counts'")->required();
  semivar->add_option("--period", sa.period, "time period (1-based)");
  semivar->add_option("--bins", sa.bins, "number of distance bins");

  CLI11_PARSE(app, argc, argv);

  if (const char* env = std::getenv("LGCP_THREADS"); env && threads == 0)
    threads = std::atoi(env);
  if (threads > 0) set_max_threads(threads);

  try {
    if (grid->parsed()) return cmd_grid(ga);
    if (fit->parsed()) return cmd_fit(fa);
    if (predict->parsed()) return cmd_predict(pa);
    if (hotspot->parsed()) return cmd_hotspot(ha);
    if (semivar->parsed()) return cmd_semivariogram(sa);
  } catch (const lgcp::error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
