#include "dynadrag/geometry.hpp"

#include <algorithm>

namespace dynadrag {

Point clamp_to_bounds(Point p, int64_t width, int64_t height) {
    return {std::clamp(p.x, 0.0, static_cast<double>(width - 1)), std::clamp(p.y, 0.0, static_cast<double>(height - 1))};
}

bool in_bounds(Point p, int64_t width, int64_t height) {
    return p.x >= 0.0 && p.y >= 0.0 && p.x <= static_cast<double>(width - 1) && p.y <= static_cast<double>(height - 1);
}

std::vector<PixelIndex> chebyshev_neighborhood(Point p, int r, int64_t width, int64_t height) {
    const PixelIndex c = round_to_pixel(p);
    const int64_t x0 = std::max<int64_t>(0, c.x - r);
    const int64_t x1 = std::min<int64_t>(width - 1, c.x + r);
    const int64_t y0 = std::max<int64_t>(0, c.y - r);
    const int64_t y1 = std::min<int64_t>(height - 1, c.y + r);
    std::vector<PixelIndex> out;
    if (x0 > x1 || y0 > y1) return out;
    out.reserve(static_cast<size_t>((x1 - x0 + 1) * (y1 - y0 + 1)));
    for (int64_t y = y0; y <= y1; ++y)
        for (int64_t x = x0; x <= x1; ++x) out.push_back({x, y});
    return out;
}

std::vector<Point> patch_offsets(int r) {
    std::vector<Point> out;
    out.reserve(static_cast<size_t>((2 * r + 1) * (2 * r + 1)));
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) out.push_back({static_cast<double>(dx), static_cast<double>(dy)});
    return out;
}

Point pixel_to_latent(Point p, int downscale) {
    const double s = static_cast<double>(downscale);
    return {p.x / s, p.y / s};
}

}  // namespace dynadrag
