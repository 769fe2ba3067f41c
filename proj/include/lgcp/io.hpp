#ifndef LGCP_IO_HPP
#define LGCP_IO_HPP

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "lgcp/geojson.hpp"
#include "lgcp/grid.hpp"

namespace lgcp {

enum class TimeWindow { day, week, month };

inline TimeWindow parse_time_window(const std::string& s) {
  if (s == "day") return TimeWindow::day;
  if (s == "week") return TimeWindow::week;
  if (s == "month") return TimeWindow::month;
  throw config_error("unknown time window: " + s + " (expected day, week, or month)");
}

namespace detail {

// days since 1970-01-01, proleptic Gregorian
inline long days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const int era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2u) / 5u +
                       static_cast<unsigned>(d) - 1u;
  const unsigned doe = yoe * 365u + yoe / 4u - yoe / 100u + doy;
  return era * 146097L + static_cast<long>(doe) - 719468L;
}

inline bool looks_like_iso_date(const std::string& s) {
  if (s.size() < 10) return false;
  for (int i : {0, 1, 2, 3, 5, 6, 8, 9})
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  return s[4] == '-' && s[7] == '-';
}

inline long iso_date_bin(const std::string& s, TimeWindow w) {
  int y = std::stoi(s.substr(0, 4));
  int m = std::stoi(s.substr(5, 2));
  int d = std::stoi(s.substr(8, 2));
  if (m < 1 || m > 12 || d < 1 || d > 31) throw io_error("invalid date: " + s);
  switch (w) {
    case TimeWindow::day: return days_from_civil(y, m, d);
    case TimeWindow::week: return days_from_civil(y, m, d) / 7;
    case TimeWindow::month: return static_cast<long>(y) * 12 + (m - 1);
  }
  return 0;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    std::size_t a = s.find_first_not_of(" \t");
    std::size_t b = s.find_last_not_of(" \t");
    s = a == std::string::npos ? "" : s.substr(a, b - a + 1);
  }
  return out;
}

inline bool parse_double(const std::string& s, double& v) {
  char* end = nullptr;
  v = std::strtod(s.c_str(), &end);
  return end != s.c_str() && *end == '\0';
}

}  // namespace detail

// CSV with columns x,y[,t]; t may be an integer period index (1..laglength)
// or an ISO-8601 date binned by the chosen window, with the most recent bin
// mapped to period laglength. Events whose period falls outside 1..laglength
// are kept (points_to_grid reports them as dropped).
inline CaseEvents read_events_csv(const std::string& path, TimeWindow window, int laglength) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(detail::split_csv_line(line));
  }
  if (rows.empty()) return {};

  int cx = 0, cy = 1, ct = 2;
  std::size_t first = 0;
  {
    double tmp;
    bool numeric0 = detail::parse_double(rows[0][0], tmp);
    if (!numeric0 && !detail::looks_like_iso_date(rows[0][0])) {
      // header row: locate columns by name
      cx = cy = ct = -1;
      for (std::size_t c = 0; c < rows[0].size(); ++c) {
        std::string h = rows[0][c];
        for (auto& ch : h) ch = static_cast<char>(std::tolower(ch));
        if (h == "x" || h == "lon" || h == "longitude") cx = static_cast<int>(c);
        if (h == "y" || h == "lat" || h == "latitude") cy = static_cast<int>(c);
        if (h == "t" || h == "date" || h == "time") ct = static_cast<int>(c);
      }
      if (cx < 0 || cy < 0)
        throw io_error(path + ": header must name x and y columns");
      first = 1;
    }
  }

  struct RawEvent {
    double x, y;
    bool dated;
    long bin;
    int t;
    std::string stamp;
  };
  std::vector<RawEvent> raw;
  long binmax = std::numeric_limits<long>::min();
  bool any_dated = false;
  for (std::size_t i = first; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (static_cast<int>(r.size()) <= std::max(cx, cy))
      throw io_error(path + ": line " + std::to_string(i + 1) + " has too few columns");
    RawEvent e{};
    if (!detail::parse_double(r[cx], e.x) || !detail::parse_double(r[cy], e.y))
      throw io_error(path + ": line " + std::to_string(i + 1) + " has non-numeric coordinates");
    e.t = 1;
    e.dated = false;
    if (ct >= 0 && ct < static_cast<int>(r.size()) && !r[ct].empty()) {
      e.stamp = r[ct];
      if (detail::looks_like_iso_date(r[ct])) {
        e.dated = true;
        e.bin = detail::iso_date_bin(r[ct], window);
        binmax = std::max(binmax, e.bin);
        any_dated = true;
      } else {
        double tv;
        if (!detail::parse_double(r[ct], tv))
          throw io_error(path + ": line " + std::to_string(i + 1) + " has an unparseable time");
        e.t = static_cast<int>(tv);
      }
    }
    raw.push_back(std::move(e));
  }

  CaseEvents out;
  for (auto& e : raw) {
    int t = e.t;
    if (e.dated) t = laglength - static_cast<int>(binmax - e.bin);
    out.events.push_back({e.x, e.y, t, e.stamp});
  }
  (void)any_dated;
  return out;
}

// ---------------------------------------------------------------------------
// CSV writing (17 significant digits, exact round trips)
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_csv(const std::string& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& rows) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write " + path);
  for (std::size_t i = 0; i < header.size(); ++i)
    out << header[i] << (i + 1 < header.size() ? "," : "");
  out << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i)
      out << format_double(row[i]) << (i + 1 < row.size() ? "," : "");
    out << "\n";
  }
}

// matrix written row-per-line under the given column prefix
inline void write_matrix_csv(const std::string& path, const Eigen::MatrixXd& m,
                             const std::string& col_prefix) {
  std::vector<std::string> header;
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    header.push_back(col_prefix + std::to_string(c + 1));
  std::vector<std::vector<double>> rows(m.rows());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    rows[r].resize(m.cols());
    for (Eigen::Index c = 0; c < m.cols(); ++c) rows[r][c] = m(r, c);
  }
  write_csv(path, header, rows);
}

inline Eigen::MatrixXd read_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw io_error(path + ": empty file");
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    std::vector<double> row(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (!detail::parse_double(cells[i], row[i]))
        throw io_error(path + ": non-numeric cell");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) return {};
  Eigen::MatrixXd m(rows.size(), rows[0].size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows[0].size()) throw io_error(path + ": ragged rows");
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
  }
  return m;
}

// ---------------------------------------------------------------------------
// Grid artifact: grid.geojson + grid_meta.json (+ regions.geojson +
// intersections.json in region mode)
// ---------------------------------------------------------------------------

struct RegionData {
  std::vector<MultiPolygon> polys;
  std::vector<std::string> ids;
  Eigen::MatrixXi counts;  // r x T
  std::map<std::string, Eigen::MatrixXd> covariates;
};

struct GridArtifact {
  RegularGrid grid;
  bool region_mode = false;
  RegionData regions;
  IntersectionMap imap;
  std::string hash;  // filled on save/load from the grid.geojson bytes
};

namespace detail {

// one property when constant over periods, else name1..nameT
inline void matrix_props(json& props, const std::string& name, const Eigen::MatrixXd& m,
                         int row) {
  bool constant = true;
  for (int t = 1; t < m.cols() && constant; ++t)
    constant = m(row, t) == m(row, 0);
  if (constant || m.cols() == 1) {
    props[name] = m(row, 0);
  } else {
    for (int t = 0; t < m.cols(); ++t) props[name + std::to_string(t + 1)] = m(row, t);
  }
}

inline Eigen::MatrixXd props_matrix(const std::vector<Feature>& feats, const std::string& name,
                                    int T) {
  Eigen::MatrixXd m(feats.size(), T);
  for (std::size_t i = 0; i < feats.size(); ++i) {
    if (feats[i].props.count(name)) {
      m.row(i).setConstant(feats[i].props.at(name));
    } else {
      for (int t = 0; t < T; ++t) {
        auto it = feats[i].props.find(name + std::to_string(t + 1));
        if (it == feats[i].props.end())
          throw io_error("missing covariate property " + name + " on feature " +
                         std::to_string(i + 1));
        m(i, t) = it->second;
      }
    }
  }
  return m;
}

}  // namespace detail

inline std::string hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(ss.str())));
  return buf;
}

inline void save_grid_artifact(GridArtifact& art, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const RegularGrid& g = art.grid;

  std::vector<Feature> feats(g.n());
  for (int i = 0; i < g.n(); ++i) {
    Box b = g.cell_box(i);
    feats[i].geom = rectangle(b.xmin, b.ymin, b.xmax, b.ymax);
  }
  json fc;
  fc["type"] = "FeatureCollection";
  json arr = json::array();
  for (int i = 0; i < g.n(); ++i) {
    json jf;
    jf["type"] = "Feature";
    jf["geometry"] = detail::geometry_to_json(feats[i].geom);
    json props;
    props["cell"] = i + 1;
    props["orig"] = g.order[i] + 1;
    for (int t = 0; t < g.T; ++t) props["t" + std::to_string(t + 1)] = g.counts(i, t);
    for (const auto& [name, m] : g.covariates) detail::matrix_props(props, name, m, i);
    jf["properties"] = props;
    arr.push_back(std::move(jf));
  }
  fc["features"] = arr;
  write_json(dir + "/grid.geojson", fc);
  art.hash = hash_file(dir + "/grid.geojson");

  json meta;
  meta["schema"] = "lgcp-grid-v1";
  meta["mode"] = art.region_mode ? "region" : "grid";
  meta["n"] = g.n();
  meta["T"] = g.T;
  meta["cellsize"] = g.cellsize;
  meta["bbox"] = json::array({g.bbox.xmin, g.bbox.ymin, g.bbox.xmax, g.bbox.ymax});
  meta["nx"] = g.nx;
  meta["ny"] = g.ny;
  meta["boundary_area"] = g.boundary_area;
  meta["cover_area"] = g.cover_area;
  json order = json::array();
  for (int v : g.order) order.push_back(v + 1);
  meta["order"] = order;
  meta["dropped_space"] = g.dropped_space;
  meta["dropped_time"] = g.dropped_time;
  meta["outside_boundary"] = g.outside_boundary;
  json covs = json::array();
  for (const auto& [name, m] : g.covariates) covs.push_back(name);
  meta["covariates"] = covs;
  if (art.region_mode) {
    json rcovs = json::array();
    for (const auto& [name, m] : art.regions.covariates) rcovs.push_back(name);
    meta["region_covariates"] = rcovs;
  }
  meta["hash"] = art.hash;
  write_json(dir + "/grid_meta.json", meta);

  if (art.region_mode) {
    json rfc;
    rfc["type"] = "FeatureCollection";
    json rarr = json::array();
    const auto& rd = art.regions;
    for (std::size_t j = 0; j < rd.polys.size(); ++j) {
      json jf;
      jf["type"] = "Feature";
      jf["geometry"] = detail::geometry_to_json(rd.polys[j]);
      json props;
      props["region"] = static_cast<int>(j + 1);
      if (j < rd.ids.size() && !rd.ids[j].empty()) props["id"] = rd.ids[j];
      for (int t = 0; t < rd.counts.cols(); ++t)
        props["t" + std::to_string(t + 1)] = rd.counts(static_cast<int>(j), t);
      for (const auto& [name, m] : rd.covariates)
        detail::matrix_props(props, name, m, static_cast<int>(j));
      jf["properties"] = props;
      rarr.push_back(std::move(jf));
    }
    rfc["features"] = rarr;
    write_json(dir + "/regions.geojson", rfc);

    json im;
    im["n_regions"] = art.imap.n_regions;
    json entries = json::array();
    for (const auto& e : art.imap.entries)
      entries.push_back(json::array({e.cell + 1, e.region + 1, e.w}));
    im["entries"] = entries;
    write_json(dir + "/intersections.json", im);
  }
}

inline GridArtifact load_grid_artifact(const std::string& dir) {
  GridArtifact art;
  json meta = read_json(dir + "/grid_meta.json");
  auto feats = read_geojson(dir + "/grid.geojson");
  art.hash = hash_file(dir + "/grid.geojson");
  if (meta.contains("hash") && meta["hash"].get<std::string>() != art.hash)
    throw io_error(dir + ": grid.geojson does not match the hash in grid_meta.json");

  RegularGrid& g = art.grid;
  g.cellsize = meta["cellsize"].get<double>();
  g.T = meta["T"].get<int>();
  g.bbox = Box{meta["bbox"][0].get<double>(), meta["bbox"][1].get<double>(),
               meta["bbox"][2].get<double>(), meta["bbox"][3].get<double>()};
  g.nx = meta["nx"].get<int>();
  g.ny = meta["ny"].get<int>();
  g.boundary_area = meta["boundary_area"].get<double>();
  g.cover_area = meta["cover_area"].get<std::vector<double>>();
  g.dropped_space = meta["dropped_space"].get<std::vector<long>>();
  g.dropped_time = meta["dropped_time"].get<long>();
  g.outside_boundary = meta["outside_boundary"].get<long>();
  for (const auto& v : meta["order"]) g.order.push_back(v.get<int>() - 1);

  const int n = static_cast<int>(feats.size());
  if (n != meta["n"].get<int>()) throw io_error(dir + ": feature count mismatch");
  g.cells.resize(n);
  g.counts.resize(n, g.T);
  for (int i = 0; i < n; ++i) {
    Box b = bounding_box(feats[i].geom);
    g.cells[i] = {b.xmin, b.ymin};
    for (int t = 0; t < g.T; ++t) {
      auto it = feats[i].props.find("t" + std::to_string(t + 1));
      if (it == feats[i].props.end()) throw io_error(dir + ": missing count property");
      g.counts(i, t) = static_cast<int>(it->second);
    }
  }
  for (const auto& name : meta["covariates"])
    g.covariates[name.get<std::string>()] =
        detail::props_matrix(feats, name.get<std::string>(), g.T);

  art.region_mode = meta["mode"].get<std::string>() == "region";
  if (art.region_mode) {
    auto rfeats = read_geojson(dir + "/regions.geojson");
    RegionData& rd = art.regions;
    int r = static_cast<int>(rfeats.size());
    rd.counts.resize(r, g.T);
    for (int j = 0; j < r; ++j) {
      rd.polys.push_back(rfeats[j].geom);
      rd.ids.push_back(rfeats[j].labels.count("id") ? rfeats[j].labels.at("id") : "");
      for (int t = 0; t < g.T; ++t) {
        auto it = rfeats[j].props.find("t" + std::to_string(t + 1));
        if (it == rfeats[j].props.end()) throw io_error(dir + ": missing region count");
        rd.counts(j, t) = static_cast<int>(it->second);
      }
    }
    if (meta.contains("region_covariates"))
      for (const auto& name : meta["region_covariates"])
        rd.covariates[name.get<std::string>()] =
            detail::props_matrix(rfeats, name.get<std::string>(), g.T);

    json im = read_json(dir + "/intersections.json");
    art.imap.n_regions = im["n_regions"].get<int>();
    for (const auto& e : im["entries"])
      art.imap.entries.push_back(
          {e[0].get<int>() - 1, e[1].get<int>() - 1, e[2].get<double>()});
  }
  return art;
}

}  // namespace lgcp

#endif
