#ifndef LGCP_GEOMETRY_HPP
#define LGCP_GEOMETRY_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "lgcp/common.hpp"

namespace lgcp {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// Closed ring: front() == back().
using Ring = std::vector<Point>;

struct Polygon {
  Ring exterior;
  std::vector<Ring> holes;
};

// GeoJSON MultiPolygon; a plain Polygon is a single part.
struct MultiPolygon {
  std::vector<Polygon> parts;
};

struct Box {
  double xmin = 0.0, ymin = 0.0, xmax = 0.0, ymax = 0.0;
  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
};

inline double ring_signed_area(const Ring& r) {
  double a = 0.0;
  for (std::size_t i = 0; i + 1 < r.size(); ++i)
    a += r[i].x * r[i + 1].y - r[i + 1].x * r[i].y;
  return 0.5 * a;
}

inline double polygon_area(const Polygon& p) {
  double a = std::abs(ring_signed_area(p.exterior));
  for (const auto& h : p.holes) a -= std::abs(ring_signed_area(h));
  return a;
}

inline double area(const MultiPolygon& mp) {
  double a = 0.0;
  for (const auto& p : mp.parts) a += polygon_area(p);
  return a;
}

inline void validate_ring(const Ring& r) {
  if (r.size() < 4) throw invalid_geometry_error("ring has fewer than 4 vertices");
  if (r.front().x != r.back().x || r.front().y != r.back().y)
    throw invalid_geometry_error("ring is not closed");
}

inline void validate(const Polygon& p) {
  validate_ring(p.exterior);
  if (ring_signed_area(p.exterior) == 0.0)
    throw invalid_geometry_error("polygon exterior ring has zero area");
  for (const auto& h : p.holes) validate_ring(h);
}

inline void validate(const MultiPolygon& mp) {
  if (mp.parts.empty()) throw invalid_geometry_error("empty geometry");
  for (const auto& p : mp.parts) validate(p);
  if (area(mp) <= 0.0) throw invalid_geometry_error("geometry has zero area");
}

inline Box bounding_box(const MultiPolygon& mp) {
  Box b{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
        -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const auto& p : mp.parts)
    for (const auto& pt : p.exterior) {
      b.xmin = std::min(b.xmin, pt.x);
      b.ymin = std::min(b.ymin, pt.y);
      b.xmax = std::max(b.xmax, pt.x);
      b.ymax = std::max(b.ymax, pt.y);
    }
  return b;
}

namespace detail {

// One Sutherland-Hodgman pass against the half-plane keep(p) == true,
// with cross(p,q) the intersection of segment pq with the boundary line.
template <typename Keep, typename Cross>
Ring clip_halfplane(const Ring& in, Keep keep, Cross cross) {
  Ring out;
  if (in.size() < 2) return out;
  out.reserve(in.size() + 4);
  for (std::size_t i = 0; i + 1 < in.size(); ++i) {
    const Point& cur = in[i];
    const Point& nxt = in[i + 1];
    bool cin = keep(cur), nin = keep(nxt);
    if (cin) {
      out.push_back(cur);
      if (!nin) out.push_back(cross(cur, nxt));
    } else if (nin) {
      out.push_back(cross(cur, nxt));
    }
  }
  if (out.size() >= 3) {
    if (out.front().x != out.back().x || out.front().y != out.back().y)
      out.push_back(out.front());
  } else {
    out.clear();
  }
  return out;
}

}  // namespace detail

// Clips an arbitrary (possibly concave) ring to an axis-aligned box.
// The box is convex, so Sutherland-Hodgman clipping yields the exact
// intersection area (degenerate bridging edges contribute zero area).
inline Ring clip_ring_to_box(const Ring& ring, const Box& b) {
  using detail::clip_halfplane;
  Ring r = ring;
  r = clip_halfplane(
      r, [&](const Point& p) { return p.x >= b.xmin; },
      [&](const Point& p, const Point& q) {
        double t = (b.xmin - p.x) / (q.x - p.x);
        return Point{b.xmin, p.y + t * (q.y - p.y)};
      });
  r = clip_halfplane(
      r, [&](const Point& p) { return p.x <= b.xmax; },
      [&](const Point& p, const Point& q) {
        double t = (b.xmax - p.x) / (q.x - p.x);
        return Point{b.xmax, p.y + t * (q.y - p.y)};
      });
  r = clip_halfplane(
      r, [&](const Point& p) { return p.y >= b.ymin; },
      [&](const Point& p, const Point& q) {
        double t = (b.ymin - p.y) / (q.y - p.y);
        return Point{p.x + t * (q.x - p.x), b.ymin};
      });
  r = clip_halfplane(
      r, [&](const Point& p) { return p.y <= b.ymax; },
      [&](const Point& p, const Point& q) {
        double t = (b.ymax - p.y) / (q.y - p.y);
        return Point{p.x + t * (q.x - p.x), b.ymax};
      });
  return r;
}

// Area of polygon ∩ box, holes subtracted.
inline double clipped_area(const Polygon& p, const Box& b) {
  double a = std::abs(ring_signed_area(clip_ring_to_box(p.exterior, b)));
  for (const auto& h : p.holes) a -= std::abs(ring_signed_area(clip_ring_to_box(h, b)));
  return std::max(0.0, a);
}

inline double clipped_area(const MultiPolygon& mp, const Box& b) {
  double a = 0.0;
  for (const auto& p : mp.parts) a += clipped_area(p, b);
  return a;
}

// Even-odd ray casting; points exactly on an edge may land either side.
inline bool point_in_ring(const Point& pt, const Ring& r) {
  bool inside = false;
  for (std::size_t i = 0; i + 1 < r.size(); ++i) {
    const Point& a = r[i];
    const Point& b = r[i + 1];
    if ((a.y > pt.y) != (b.y > pt.y)) {
      double xint = a.x + (pt.y - a.y) / (b.y - a.y) * (b.x - a.x);
      if (pt.x < xint) inside = !inside;
    }
  }
  return inside;
}

inline bool contains(const Polygon& p, const Point& pt) {
  if (!point_in_ring(pt, p.exterior)) return false;
  for (const auto& h : p.holes)
    if (point_in_ring(pt, h)) return false;
  return true;
}

inline bool contains(const MultiPolygon& mp, const Point& pt) {
  for (const auto& p : mp.parts)
    if (contains(p, pt)) return true;
  return false;
}

// Convenience constructors used by tests and fixtures.
inline Ring rectangle_ring(double x0, double y0, double x1, double y1) {
  return Ring{{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}, {x0, y0}};
}

inline MultiPolygon rectangle(double x0, double y0, double x1, double y1) {
  MultiPolygon mp;
  mp.parts.push_back(Polygon{rectangle_ring(x0, y0, x1, y1), {}});
  return mp;
}

}  // namespace lgcp

#endif
