#include "dynadrag/raster.hpp"

#include "dynadrag/error.hpp"

#include <algorithm>
#include <cmath>

namespace dynadrag {

RgbImage RgbImage::zeros(int64_t height, int64_t width) { return {torch::zeros({3, height, width})}; }

MaskImage MaskImage::full(int64_t height, int64_t width) { return {torch::ones({height, width})}; }
MaskImage MaskImage::empty(int64_t height, int64_t width) { return {torch::zeros({height, width})}; }

MaskImage MaskImage::downsample_majority(int factor) const {
    require(factor >= 1, "mask downsample factor must be >= 1");
    if (factor == 1) return *this;
    require(height() % factor == 0 && width() % factor == 0, "mask size must be divisible by the downsample factor");
    auto pooled = torch::avg_pool2d(data.unsqueeze(0).unsqueeze(0).to(torch::kFloat32), {factor, factor});
    return {(pooled.squeeze(0).squeeze(0) > 0.5).to(torch::kFloat32)};
}

FlowField FlowField::zeros(int64_t height, int64_t width) { return {torch::zeros({2, height, width})}; }

FlowField FlowField::constant(int64_t height, int64_t width, Point v) {
    auto t = torch::empty({2, height, width});
    t[0].fill_(v.x);
    t[1].fill_(v.y);
    return {t};
}

Point FlowField::at(Point p) const {
    auto v = bilinear_sample(data, p).to(torch::kFloat64);
    auto acc = v.accessor<double, 1>();
    return {acc[0], acc[1]};
}

torch::Tensor bilinear_sample(const torch::Tensor& chw, Point p) {
    const int64_t h = chw.size(1);
    const int64_t w = chw.size(2);
    const double x = std::clamp(p.x, 0.0, static_cast<double>(w - 1));
    const double y = std::clamp(p.y, 0.0, static_cast<double>(h - 1));
    const int64_t x0 = static_cast<int64_t>(std::floor(x));
    const int64_t y0 = static_cast<int64_t>(std::floor(y));
    const int64_t x1 = std::min<int64_t>(x0 + 1, w - 1);
    const int64_t y1 = std::min<int64_t>(y0 + 1, h - 1);
    const double wx = x - static_cast<double>(x0);
    const double wy = y - static_cast<double>(y0);

    auto at = [&](int64_t yy, int64_t xx) { return chw.select(1, yy).select(1, xx); };
    auto out = at(y0, x0) * ((1.0 - wx) * (1.0 - wy));
    if (wx > 0.0) out = out + at(y0, x1) * (wx * (1.0 - wy));
    if (wy > 0.0) out = out + at(y1, x0) * ((1.0 - wx) * wy);
    if (wx > 0.0 && wy > 0.0) out = out + at(y1, x1) * (wx * wy);
    return out;
}

torch::Tensor sample_patch(const torch::Tensor& chw, Point center, int r) {
    std::vector<torch::Tensor> rows;
    for (const Point& o : patch_offsets(r)) rows.push_back(bilinear_sample(chw, center + o));
    return torch::stack(rows);
}

}  // namespace dynadrag
