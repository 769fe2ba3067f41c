#ifndef LGCP_GEOJSON_HPP
#define LGCP_GEOJSON_HPP

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lgcp/common.hpp"
#include "lgcp/geometry.hpp"

namespace lgcp {

using json = nlohmann::ordered_json;

struct Feature {
  MultiPolygon geom;
  std::map<std::string, double> props;        // numeric properties
  std::map<std::string, std::string> labels;  // string properties (ids etc.)
};

namespace detail {

inline Ring parse_ring(const json& arr) {
  Ring r;
  for (const auto& pt : arr) {
    if (!pt.is_array() || pt.size() < 2) throw io_error("GeoJSON: malformed coordinate");
    r.push_back({pt[0].get<double>(), pt[1].get<double>()});
  }
  return r;
}

inline Polygon parse_polygon_coords(const json& coords) {
  if (!coords.is_array() || coords.empty()) throw io_error("GeoJSON: empty polygon");
  Polygon p;
  p.exterior = parse_ring(coords[0]);
  for (std::size_t i = 1; i < coords.size(); ++i) p.holes.push_back(parse_ring(coords[i]));
  return p;
}

inline MultiPolygon parse_geometry(const json& geom) {
  if (!geom.contains("type")) throw io_error("GeoJSON: geometry without type");
  std::string type = geom["type"].get<std::string>();
  MultiPolygon mp;
  if (type == "Polygon") {
    mp.parts.push_back(parse_polygon_coords(geom["coordinates"]));
  } else if (type == "MultiPolygon") {
    for (const auto& poly : geom["coordinates"]) mp.parts.push_back(parse_polygon_coords(poly));
  } else {
    throw io_error("GeoJSON: unsupported geometry type " + type);
  }
  return mp;
}

inline json ring_to_json(const Ring& r) {
  json arr = json::array();
  for (const auto& p : r) arr.push_back(json::array({p.x, p.y}));
  return arr;
}

inline json geometry_to_json(const MultiPolygon& mp) {
  json g;
  if (mp.parts.size() == 1) {
    g["type"] = "Polygon";
    json coords = json::array();
    coords.push_back(ring_to_json(mp.parts[0].exterior));
    for (const auto& h : mp.parts[0].holes) coords.push_back(ring_to_json(h));
    g["coordinates"] = coords;
  } else {
    g["type"] = "MultiPolygon";
    json coords = json::array();
    for (const auto& part : mp.parts) {
      json pc = json::array();
      pc.push_back(ring_to_json(part.exterior));
      for (const auto& h : part.holes) pc.push_back(ring_to_json(h));
      coords.push_back(pc);
    }
    g["coordinates"] = coords;
  }
  return g;
}

}  // namespace detail

// Accepts a FeatureCollection, a single Feature, or a bare (Multi)Polygon.
// Numeric properties land in props, strings in labels.
inline std::vector<Feature> parse_geojson(const json& root) {
  std::vector<Feature> out;
  auto parse_feature = [&](const json& f) {
    Feature feat;
    if (!f.contains("geometry")) throw io_error("GeoJSON: feature without geometry");
    feat.geom = detail::parse_geometry(f["geometry"]);
    if (f.contains("properties") && f["properties"].is_object()) {
      for (auto it = f["properties"].begin(); it != f["properties"].end(); ++it) {
        if (it.value().is_number())
          feat.props[it.key()] = it.value().get<double>();
        else if (it.value().is_string())
          feat.labels[it.key()] = it.value().get<std::string>();
        else if (it.value().is_boolean())
          feat.props[it.key()] = it.value().get<bool>() ? 1.0 : 0.0;
      }
    }
    out.push_back(std::move(feat));
  };

  if (!root.contains("type")) throw io_error("GeoJSON: missing type");
  std::string type = root["type"].get<std::string>();
  if (type == "FeatureCollection") {
    for (const auto& f : root["features"]) parse_feature(f);
  } else if (type == "Feature") {
    parse_feature(root);
  } else {
    Feature feat;
    feat.geom = detail::parse_geometry(root);
    out.push_back(std::move(feat));
  }
  return out;
}

inline std::vector<Feature> read_geojson(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path);
  json root;
  try {
    in >> root;
  } catch (const std::exception& e) {
    throw io_error("failed to parse " + path + ": " + e.what());
  }
  return parse_geojson(root);
}

inline json feature_collection(const std::vector<Feature>& feats) {
  json fc;
  fc["type"] = "FeatureCollection";
  json arr = json::array();
  for (const auto& f : feats) {
    json jf;
    jf["type"] = "Feature";
    jf["geometry"] = detail::geometry_to_json(f.geom);
    json props = json::object();
    for (const auto& [k, v] : f.labels) props[k] = v;
    for (const auto& [k, v] : f.props) props[k] = v;
    jf["properties"] = props;
    arr.push_back(std::move(jf));
  }
  fc["features"] = arr;
  return fc;
}

inline void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write " + path);
  out << j.dump(1) << "\n";
}

inline json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw io_error("failed to parse " + path + ": " + e.what());
  }
  return j;
}

}  // namespace lgcp

#endif
