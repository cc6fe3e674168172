#include "semline/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "semline/error.hpp"

namespace semline {

namespace {

constexpr unsigned kTop = 1u;
constexpr unsigned kRight = 2u;
constexpr unsigned kBottom = 4u;
constexpr unsigned kLeft = 8u;

void check_size(const ImageSize& size) {
  if (size.width < 2 || size.height < 2) {
    std::ostringstream os;
    os << "image size must be at least 2x2, got " << size.width << "x" << size.height;
    throw ValidationError(os.str());
  }
}

double norm(Vec2 v) { return std::sqrt(v.x * v.x + v.y * v.y); }

/// Coefficients of the affine side function s(p) = a*p.x + b*p.y + c whose
/// sign matches point_line_distance (s is the unnormalized signed distance).
void side_function(const Line& line, double& a, double& b, double& c) {
  const double dx = line.x_e - line.x_s;
  const double dy = line.y_e - line.y_s;
  a = -dy;
  b = dx;
  c = dy * line.x_s - dx * line.y_s;
}

}  // namespace

double ConvexPolygon::area() const {
  if (vertices.size() < 3) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    const Vec2& p = vertices[i];
    const Vec2& q = vertices[(i + 1) % vertices.size()];
    sum += p.x * q.y - q.x * p.y;
  }
  return 0.5 * sum;
}

double perimeter(const ImageSize& size) {
  check_size(size);
  return 2.0 * (size.width + size.height);
}

unsigned edges_of(Vec2 p, const ImageSize& size) {
  check_size(size);
  const double w = size.width;
  const double h = size.height;
  const bool x_in = p.x >= -kBoundaryTol && p.x <= w + kBoundaryTol;
  const bool y_in = p.y >= -kBoundaryTol && p.y <= h + kBoundaryTol;
  unsigned mask = 0;
  if (x_in && y_in) {
    if (std::abs(p.y) <= kBoundaryTol) mask |= kTop;
    if (std::abs(p.x - w) <= kBoundaryTol) mask |= kRight;
    if (std::abs(p.y - h) <= kBoundaryTol) mask |= kBottom;
    if (std::abs(p.x) <= kBoundaryTol) mask |= kLeft;
  }
  return mask;
}

double arc_length_of(Vec2 p, const ImageSize& size) {
  check_size(size);
  const double w = size.width;
  const double h = size.height;
  const unsigned mask = edges_of(p, size);
  if (mask == 0) {
    std::ostringstream os;
    os << "point (" << p.x << ", " << p.y << ") is not on the boundary of "
       << size.width << "x" << size.height;
    throw ValidationError(os.str());
  }
  // Edge priority top, right, bottom, left makes corners map to the start of
  // the clockwise edge that begins there: (0,0)->0, (W,0)->W, (W,H)->W+H,
  // (0,H)->2W+H.
  if (mask & kTop) return std::clamp(p.x, 0.0, w);
  if (mask & kRight) return w + std::clamp(p.y, 0.0, h);
  if (mask & kBottom) return w + h + (w - std::clamp(p.x, 0.0, w));
  return 2.0 * w + h + (h - std::clamp(p.y, 0.0, h));
}

Vec2 point_at_arc(double t, const ImageSize& size) {
  const double p = perimeter(size);
  const double w = size.width;
  const double h = size.height;
  t = std::fmod(t, p);
  if (t < 0) t += p;
  if (t <= w) return {t, 0.0};
  if (t <= w + h) return {w, t - w};
  if (t <= 2.0 * w + h) return {w - (t - w - h), h};
  return {0.0, h - (t - 2.0 * w - h)};
}

std::optional<std::string> validate_line(const Line& line, const ImageSize& size) {
  check_size(size);
  const unsigned es = edges_of(line.start(), size);
  const unsigned ee = edges_of(line.end(), size);
  if (es == 0) return "start point is not on the image boundary";
  if (ee == 0) return "end point is not on the image boundary";
  if (norm(line.end() - line.start()) <= kDistinctTol) {
    return "endpoints coincide";
  }
  if ((es & ee) != 0) return "endpoints lie on a common edge";
  return std::nullopt;
}

void require_valid_line(const Line& line, const ImageSize& size) {
  if (auto why = validate_line(line, size)) {
    std::ostringstream os;
    os << "invalid line (" << line.x_s << ", " << line.y_s << ") -> ("
       << line.x_e << ", " << line.y_e << "): " << *why;
    throw DegenerateLineError(os.str());
  }
}

double point_line_distance(const Line& line, Vec2 p) {
  const Vec2 d = line.end() - line.start();
  const double len = norm(d);
  if (len <= 0.0) {
    throw DegenerateLineError("line has zero length");
  }
  return cross(d, p - line.start()) / len;
}

Line canonical_line(const Line& line, const ImageSize& size) {
  const double ts = arc_length_of(line.start(), size);
  const double te = arc_length_of(line.end(), size);
  if (te < ts) return {line.x_e, line.y_e, line.x_s, line.y_s};
  return line;
}

Vec2 nearest_boundary_point(Vec2 p, const ImageSize& size) {
  check_size(size);
  const double w = size.width;
  const double h = size.height;
  const double cx = std::clamp(p.x, 0.0, w);
  const double cy = std::clamp(p.y, 0.0, h);
  if (cx != p.x || cy != p.y) {
    // Outside: the clamped point is on the boundary and is the closest point
    // of the rectangle.
    return {cx, cy};
  }
  const double d_top = cy;
  const double d_right = w - cx;
  const double d_bottom = h - cy;
  const double d_left = cx;
  const double best = std::min({d_top, d_right, d_bottom, d_left});
  if (best == d_top) return {cx, 0.0};
  if (best == d_right) return {w, cy};
  if (best == d_bottom) return {cx, h};
  return {0.0, cy};
}

std::vector<Line> generate_candidates(const ImageSize& size, double step) {
  check_size(size);
  if (!(step > 0.0) || !std::isfinite(step)) {
    throw ConfigError("candidate step must be a positive finite number");
  }
  const double p = perimeter(size);
  std::vector<Vec2> points;
  std::vector<unsigned> masks;
  for (int i = 0;; ++i) {
    const double t = i * step;
    if (t >= p - kBoundaryTol) break;
    Vec2 q = point_at_arc(t, size);
    points.push_back(q);
    masks.push_back(edges_of(q, size));
  }
  if (points.size() < 4) {
    std::ostringstream os;
    os << "candidate sampling produced only " << points.size()
       << " perimeter points (need at least 4); decrease the step";
    throw EmptyCandidateError(os.str());
  }
  std::vector<Line> lines;
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t j = i + 1; j < points.size(); ++j) {
      if ((masks[i] & masks[j]) != 0) continue;  // same-edge pair
      Line l{points[i].x, points[i].y, points[j].x, points[j].y};
      if (validate_line(l, size)) continue;
      lines.push_back(l);
    }
  }
  if (lines.empty()) {
    throw EmptyCandidateError("candidate sampling produced no valid line pairs");
  }
  return lines;
}

ConvexPolygon clip_halfplane(const ConvexPolygon& poly, double a, double b, double c) {
  ConvexPolygon out;
  const std::size_t n = poly.vertices.size();
  if (n == 0) return out;
  out.vertices.reserve(n + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& cur = poly.vertices[i];
    const Vec2& nxt = poly.vertices[(i + 1) % n];
    const double sc = a * cur.x + b * cur.y + c;
    const double sn = a * nxt.x + b * nxt.y + c;
    const bool in_c = sc >= 0.0;
    const bool in_n = sn >= 0.0;
    if (in_c) out.vertices.push_back(cur);
    if (in_c != in_n) {
      const double t = sc / (sc - sn);
      out.vertices.push_back(cur + t * (nxt - cur));
    }
  }
  if (out.vertices.size() < 3) out.vertices.clear();
  return out;
}

ConvexPolygon image_polygon(const ImageSize& size) {
  check_size(size);
  const double w = size.width;
  const double h = size.height;
  return ConvexPolygon{{{0.0, 0.0}, {w, 0.0}, {w, h}, {0.0, h}}};
}

int first_side_sign(const Line& line, const ImageSize& size) {
  check_size(size);
  const double w = size.width;
  const double h = size.height;
  const Vec2 corners[4] = {{0.0, 0.0}, {w, 0.0}, {w, h}, {0.0, h}};
  double sd[4];
  double best_pos = std::numeric_limits<double>::infinity();
  double best_neg = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 4; ++i) {
    sd[i] = point_line_distance(line, corners[i]);
    if (sd[i] > 0.0) best_pos = std::min(best_pos, sd[i]);
    if (sd[i] < 0.0) best_neg = std::min(best_neg, -sd[i]);
  }
  if (best_pos < best_neg) return 1;
  if (best_neg < best_pos) return -1;
  // Tie on unsigned distance: the side of corner (0,0) wins; if that corner
  // sits exactly on the line, continue clockwise.
  for (int i = 0; i < 4; ++i) {
    if (sd[i] > 0.0) return 1;
    if (sd[i] < 0.0) return -1;
  }
  throw DegenerateLineError("line does not separate the image corners");
}

std::pair<ConvexPolygon, ConvexPolygon> split_regions(const Line& line,
                                                      const ImageSize& size) {
  double a, b, c;
  side_function(line, a, b, c);
  const ConvexPolygon rect = image_polygon(size);
  ConvexPolygon pos = clip_halfplane(rect, a, b, c);
  ConvexPolygon neg = clip_halfplane(rect, -a, -b, -c);
  if (pos.area() < kDegenerateArea || neg.area() < kDegenerateArea) {
    std::ostringstream os;
    os << "line (" << line.x_s << ", " << line.y_s << ") -> (" << line.x_e
       << ", " << line.y_e << ") induces a region with near-zero area";
    throw DegenerateLineError(os.str());
  }
  if (first_side_sign(line, size) > 0) return {std::move(pos), std::move(neg)};
  return {std::move(neg), std::move(pos)};
}

namespace {

struct SplitAreas {
  ConvexPolygon pos;  // region where the side function is >= 0
  double area_pos = 0.0;
  double area_neg = 0.0;
};

SplitAreas split_areas(const Line& line, const ImageSize& size, double total) {
  double a, b, c;
  side_function(line, a, b, c);
  SplitAreas s;
  s.pos = clip_halfplane(image_polygon(size), a, b, c);
  s.area_pos = s.pos.area();
  s.area_neg = total - s.area_pos;
  if (s.area_pos < kDegenerateArea || s.area_neg < kDegenerateArea) {
    throw DegenerateLineError("line induces a region with near-zero area");
  }
  return s;
}

double miou_from_splits(const SplitAreas& sa, const SplitAreas& sb,
                        const Line& lb, double total) {
  double a, b, c;
  side_function(lb, a, b, c);
  const double i11 = clip_halfplane(sa.pos, a, b, c).area();
  const double i12 = sa.area_pos - i11;
  const double i21 = sb.area_pos - i11;
  const double i22 = total - sa.area_pos - sb.area_pos + i11;
  const double iou11 = i11 / (sa.area_pos + sb.area_pos - i11);
  const double iou22 = i22 / (sa.area_neg + sb.area_neg - i22);
  const double iou12 = i12 / (sa.area_pos + sb.area_neg - i12);
  const double iou21 = i21 / (sa.area_neg + sb.area_pos - i21);
  const double paired = std::max(0.5 * (iou11 + iou22), 0.5 * (iou12 + iou21));
  return std::clamp(paired, 0.0, 1.0);
}

}  // namespace

double miou(const Line& a, const Line& b, const ImageSize& size) {
  check_size(size);
  const double total = static_cast<double>(size.width) * size.height;
  const SplitAreas sa = split_areas(a, size, total);
  const SplitAreas sb = split_areas(b, size, total);
  return miou_from_splits(sa, sb, b, total);
}

std::optional<Vec2> intersect(const Line& a, const Line& b) {
  const Vec2 d1 = a.end() - a.start();
  const Vec2 d2 = b.end() - b.start();
  const double n1 = norm(d1);
  const double n2 = norm(d2);
  if (n1 <= 0.0 || n2 <= 0.0) {
    throw DegenerateLineError("cannot intersect a zero-length line");
  }
  const double denom = cross(d1, d2);
  if (std::abs(denom) / (n1 * n2) < 1e-9) return std::nullopt;
  const double t = cross(b.start() - a.start(), d2) / denom;
  return a.start() + t * d1;
}

std::vector<std::vector<double>> pairwise_miou(const std::vector<Line>& lines,
                                               const ImageSize& size) {
  check_size(size);
  const double total = static_cast<double>(size.width) * size.height;
  const std::size_t n = lines.size();
  std::vector<SplitAreas> splits;
  splits.reserve(n);
  for (const Line& l : lines) splits.push_back(split_areas(l, size, total));
  std::vector<std::vector<double>> m(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = miou_from_splits(splits[i], splits[j], lines[j], total);
      m[i][j] = v;
      m[j][i] = v;
    }
  }
  return m;
}

}  // namespace semline
