#pragma once

#include "dynadrag/geometry.hpp"

#include <torch/torch.h>

namespace dynadrag {

/// RGB image, float32 [3, H, W] with values in [0, 1].
struct RgbImage {
    torch::Tensor data;

    int64_t height() const { return data.size(1); }
    int64_t width() const { return data.size(2); }

    static RgbImage zeros(int64_t height, int64_t width);
};

/// Binary editing mask, float32 [H, W]; 1 = editable, 0 = preserve.
struct MaskImage {
    torch::Tensor data;

    int64_t height() const { return data.size(0); }
    int64_t width() const { return data.size(1); }

    static MaskImage full(int64_t height, int64_t width);
    static MaskImage empty(int64_t height, int64_t width);

    /// Area-majority resampling to a coarser grid: a cell is editable when more than half of its pixels are.
    MaskImage downsample_majority(int factor) const;
};

/// Per-pixel displacement, float32 [2, H, W]; channel 0 = dx, channel 1 = dy, in pixels.
struct FlowField {
    torch::Tensor data;

    int64_t height() const { return data.size(1); }
    int64_t width() const { return data.size(2); }

    static FlowField zeros(int64_t height, int64_t width);
    static FlowField constant(int64_t height, int64_t width, Point v);

    /// Bilinear lookup at a fractional position (clamped to the raster).
    Point at(Point p) const;
};

/// Bilinear interpolation of a [C, H, W] tensor at a fractional (x, y). Differentiable in `chw`.
/// Positions outside the raster are clamped.
torch::Tensor bilinear_sample(const torch::Tensor& chw, Point p);

/// Samples a (2r+1)^2 patch around a fractional center; returns [(2r+1)^2, C].
torch::Tensor sample_patch(const torch::Tensor& chw, Point center, int r);

}  // namespace dynadrag
