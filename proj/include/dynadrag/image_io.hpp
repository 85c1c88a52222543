#pragma once

#include "dynadrag/raster.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dynadrag {

/// Decodes an 8-bit or 16-bit PNG (gray, gray+alpha, RGB or RGBA) into RGB.
RgbImage decode_png(const std::vector<uint8_t>& bytes);
RgbImage read_png(const std::filesystem::path& path);

/// Encodes as 8-bit RGB. Output bytes depend only on pixel values.
std::vector<uint8_t> encode_png(const RgbImage& image);
void write_png(const RgbImage& image, const std::filesystem::path& path);

/// Masks are stored as 8-bit grayscale PNGs; any nonzero luminance >= 0.5 is editable.
MaskImage decode_mask_png(const std::vector<uint8_t>& bytes);
MaskImage read_mask_png(const std::filesystem::path& path);
std::vector<uint8_t> encode_mask_png(const MaskImage& mask);
void write_mask_png(const MaskImage& mask, const std::filesystem::path& path);

/// `flow.f32`: three little-endian uint32 (H, W, 2) followed by H*W*2 little-endian float32,
/// row-major with the (dx, dy) pair innermost.
std::vector<uint8_t> encode_flow(const FlowField& flow);
FlowField decode_flow(const std::vector<uint8_t>& bytes);
void write_flow(const FlowField& flow, const std::filesystem::path& path);
FlowField read_flow(const std::filesystem::path& path);

std::vector<uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// Bilinear resize (antialiased when shrinking).
RgbImage resize(const RgbImage& image, int64_t height, int64_t width);
MaskImage resize_mask(const MaskImage& mask, int64_t height, int64_t width);

}  // namespace dynadrag
