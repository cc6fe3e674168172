#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace semline {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }

/// Image (or feature grid) extent. x runs in [0, width], y in [0, height],
/// with y increasing downward.
struct ImageSize {
  int width = 0;
  int height = 0;

  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

/// A line is a straight segment whose endpoints lie on the image boundary.
/// Stored as plain coordinates; validity (endpoints on the boundary, distinct,
/// not on a common edge) is checked by validate_line / require_valid_line at
/// API boundaries such as file loading and candidate construction.
struct Line {
  double x_s = 0.0;
  double y_s = 0.0;
  double x_e = 0.0;
  double y_e = 0.0;

  Vec2 start() const { return {x_s, y_s}; }
  Vec2 end() const { return {x_e, y_e}; }
};

inline bool operator==(const Line& a, const Line& b) {
  return a.x_s == b.x_s && a.y_s == b.y_s && a.x_e == b.x_e && a.y_e == b.y_e;
}

/// Convex polygon with vertices ordered so the shoelace sum is non-negative.
struct ConvexPolygon {
  std::vector<Vec2> vertices;

  double area() const;
  bool empty() const { return vertices.size() < 3; }
};

inline constexpr double kBoundaryTol = 1e-9;   // "on the boundary" tolerance
inline constexpr double kDistinctTol = 1e-6;   // endpoint distinctness
inline constexpr double kDegenerateArea = 1e-9;  // minimal region area

/// Total boundary length 2*(W+H).
double perimeter(const ImageSize& size);

/// Clockwise arc-length position of a boundary point, measured from corner
/// (0,0): top edge left-to-right, right edge top-to-bottom, bottom edge
/// right-to-left, left edge bottom-to-top. Corners map to the start of the
/// edge that begins there. p must lie on the boundary (within kBoundaryTol).
double arc_length_of(Vec2 p, const ImageSize& size);

/// Inverse of arc_length_of: the boundary point at arc-length t (t is taken
/// modulo the perimeter).
Vec2 point_at_arc(double t, const ImageSize& size);

/// Bitmask of edges containing p (within kBoundaryTol): 1=top, 2=right,
/// 4=bottom, 8=left. 0 if p is not on the boundary.
unsigned edges_of(Vec2 p, const ImageSize& size);

/// Checks the line invariants: endpoints on the boundary, distinct, and not
/// both on one edge. Returns an explanation for the first violated rule.
std::optional<std::string> validate_line(const Line& line, const ImageSize& size);

/// Throws DegenerateLineError if validate_line reports a violation.
void require_valid_line(const Line& line, const ImageSize& size);

/// Signed perpendicular distance from p to the infinite line through the
/// segment. Sign follows the cross product of the segment direction with the
/// offset to p: with y pointing down, points to the left of the direction of
/// travel get negative sign.
double point_line_distance(const Line& line, Vec2 p);

/// Returns the same line with endpoints ordered so the one with smaller
/// clockwise arc-length comes first. Canonical form used for regression
/// targets and comparisons.
Line canonical_line(const Line& line, const ImageSize& size);

/// Closest point on the image boundary to p. Interior points project to the
/// nearest edge; exterior points clamp into the rectangle first.
Vec2 nearest_boundary_point(Vec2 p, const ImageSize& size);

/// All candidate lines for an image: boundary points are sampled every `step`
/// of arc length starting at corner (0,0); every unordered pair of sample
/// points not sharing an edge forms a candidate. Ordered lexicographically by
/// the two arc positions (smaller first). Throws EmptyCandidateError when the
/// sampling yields no usable pair.
std::vector<Line> generate_candidates(const ImageSize& size, double step);

/// Clips a convex polygon against the halfplane a*x + b*y + c >= 0.
ConvexPolygon clip_halfplane(const ConvexPolygon& poly, double a, double b, double c);

/// The full image rectangle as a polygon.
ConvexPolygon image_polygon(const ImageSize& size);

/// Which side of the line comes first when splitting: +1 means the region
/// where point_line_distance > 0, -1 the other. The first region is the one
/// containing the image corner closest to the line (unsigned distance);
/// ties fall back to the side of corner (0,0), then the next corner clockwise.
int first_side_sign(const Line& line, const ImageSize& size);

/// Splits the image rectangle into the two regions induced by the line,
/// ordered by first_side_sign. Throws DegenerateLineError if either region
/// has area below kDegenerateArea.
std::pair<ConvexPolygon, ConvexPolygon> split_regions(const Line& line, const ImageSize& size);

/// Mean of the two region overlaps under the better of the two pairings:
/// mIoU(a,b) = max over pairings of the average IoU between matched regions.
/// Exact polygon arithmetic; result in [0, 1].
double miou(const Line& a, const Line& b, const ImageSize& size);

/// Intersection point of the two carrier lines, or nullopt when they are
/// parallel (|sin of angle| < 1e-9). The point may lie outside the image.
std::optional<Vec2> intersect(const Line& a, const Line& b);

/// Full symmetric matrix of pairwise mIoU values (diagonal = 1).
std::vector<std::vector<double>> pairwise_miou(const std::vector<Line>& lines,
                                               const ImageSize& size);

}  // namespace semline
