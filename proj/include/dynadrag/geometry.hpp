#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace dynadrag {

/// Image-plane position. x is the column, y the row, origin top-left. Fractional values are kept.
struct Point {
    double x = 0.0;
    double y = 0.0;

    friend Point operator+(Point a, Point b) { return {a.x + b.x, a.y + b.y}; }
    friend Point operator-(Point a, Point b) { return {a.x - b.x, a.y - b.y}; }
    friend Point operator*(Point a, double s) { return {a.x * s, a.y * s}; }
    friend bool operator==(const Point&, const Point&) = default;
};

inline double norm(Point p) { return std::hypot(p.x, p.y); }
inline double distance(Point a, Point b) { return norm(a - b); }

struct PixelIndex {
    int64_t x = 0;
    int64_t y = 0;

    friend bool operator==(const PixelIndex&, const PixelIndex&) = default;
    friend auto operator<=>(const PixelIndex& a, const PixelIndex& b) {
        if (auto c = a.y <=> b.y; c != 0) return c;
        return a.x <=> b.x;
    }
};

/// Nearest pixel (round half away from zero).
inline PixelIndex round_to_pixel(Point p) { return {std::lround(p.x), std::lround(p.y)}; }

/// Clamps into [0, width-1] x [0, height-1].
Point clamp_to_bounds(Point p, int64_t width, int64_t height);

bool in_bounds(Point p, int64_t width, int64_t height);

/// All integer pixels within Chebyshev radius r of round(p), clipped to the image, in row-major order.
std::vector<PixelIndex> chebyshev_neighborhood(Point p, int r, int64_t width, int64_t height);

/// Fractional square offsets {-r..r}^2 around a (possibly fractional) center, row-major, unclipped.
std::vector<Point> patch_offsets(int r);

/// Maps an image-space point into latent / feature space.
Point pixel_to_latent(Point p, int downscale);

/// A handle point dragged towards a fixed target.
struct PointPair {
    Point handle;                ///< current position h^k
    Point target;                ///< fixed destination p
    std::vector<Point> history;  ///< h^0 .. h^k
    bool valid = true;

    static PointPair from_user(Point handle, Point target) { return PointPair{handle, target, {handle}, true}; }

    /// Moves the handle and appends the new position to the history.
    void advance_to(Point next) {
        handle = next;
        history.push_back(next);
    }

    double remaining_distance() const { return distance(handle, target); }
};

}  // namespace dynadrag
