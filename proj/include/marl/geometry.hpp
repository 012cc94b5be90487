#pragma once

#include <cmath>
#include <span>
#include <vector>

namespace marl::geometry {

struct Point {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Point&, const Point&) = default;
};

/// Open ring: the closing vertex is not repeated.
using Ring = std::vector<Point>;

/// Shoelace signed area; positive for counter-clockwise rings.
inline double signed_area(std::span<const Point> ring) {
    const auto n = ring.size();
    if (n < 3) {
        return 0.0;
    }
    // Relative to the first vertex so that large offsets do not cost precision.
    const Point o = ring[0];
    double twice = 0.0;
    for (std::size_t i = 1; i + 1 < n; ++i) {
        const double ax = ring[i].x - o.x, ay = ring[i].y - o.y;
        const double bx = ring[i + 1].x - o.x, by = ring[i + 1].y - o.y;
        twice += ax * by - bx * ay;
    }
    return 0.5 * twice;
}

inline double area(std::span<const Point> ring) { return std::abs(signed_area(ring)); }

inline double perimeter(std::span<const Point> ring) {
    double total = 0.0;
    for (std::size_t i = 0; i < ring.size(); ++i) {
        const auto& a = ring[i];
        const auto& b = ring[(i + 1) % ring.size()];
        total += std::hypot(b.x - a.x, b.y - a.y);
    }
    return total;
}

/// Area centroid, computed relative to the first vertex so that the result
/// of a translated ring is the translated centroid up to one rounding.
/// Requires nonzero signed area.
inline Point centroid(std::span<const Point> ring) {
    const Point o = ring[0];
    double twice = 0.0, cx = 0.0, cy = 0.0;
    for (std::size_t i = 1; i + 1 < ring.size(); ++i) {
        const double ax = ring[i].x - o.x, ay = ring[i].y - o.y;
        const double bx = ring[i + 1].x - o.x, by = ring[i + 1].y - o.y;
        const double cross = ax * by - bx * ay;
        twice += cross;
        cx += (ax + bx) * cross;
        cy += (ay + by) * cross;
    }
    return {cx / (3.0 * twice), cy / (3.0 * twice)};
}

inline Point centroid_absolute(std::span<const Point> ring) {
    const auto rel = centroid(ring);
    return {ring[0].x + rel.x, ring[0].y + rel.y};
}

inline bool on_segment(const Point& p, const Point& a, const Point& b) {
    const double cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    if (cross != 0.0) {
        return false;
    }
    return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y &&
           p.y <= std::max(a.y, b.y);
}

/// Even-odd rule; points exactly on an edge count as inside.
inline bool contains(std::span<const Point> ring, const Point& p) {
    const auto n = ring.size();
    bool inside = false;
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const auto& a = ring[i];
        const auto& b = ring[j];
        if (on_segment(p, a, b)) {
            return true;
        }
        if ((a.y > p.y) != (b.y > p.y)) {
            const double x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if (p.x < x_cross) {
                inside = !inside;
            }
        }
    }
    return inside;
}

} // namespace marl::geometry
