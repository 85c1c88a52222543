#include "dynadrag/image_io.hpp"

#include "dynadrag/error.hpp"

#include <png.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dynadrag {
namespace {

static_assert(std::endian::native == std::endian::little, "flow.f32 IO assumes a little-endian host");

std::vector<uint8_t> decode_png_raw(const std::vector<uint8_t>& bytes, uint32_t format, int64_t& h, int64_t& w) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (bytes.empty() || !png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
        fail(ErrorKind::Encoding, "undecodable image");
    img.format = format;
    std::vector<uint8_t> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&img);
        fail(ErrorKind::Encoding, "undecodable image");
    }
    h = img.height;
    w = img.width;
    return buf;
}

std::vector<uint8_t> encode_png_raw(const uint8_t* data, int64_t h, int64_t w, uint32_t format) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(w);
    img.height = static_cast<png_uint_32>(h);
    img.format = format;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, data, 0, nullptr))
        fail(ErrorKind::Encoding, "png size query failed");
    std::vector<uint8_t> out(size);
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, data, 0, nullptr))
        fail(ErrorKind::Encoding, "png encoding failed");
    out.resize(size);
    return out;
}

}  // namespace

RgbImage decode_png(const std::vector<uint8_t>& bytes) {
    int64_t h = 0, w = 0;
    auto buf = decode_png_raw(bytes, PNG_FORMAT_RGB, h, w);
    auto t = torch::from_blob(buf.data(), {h, w, 3}, torch::kUInt8).permute({2, 0, 1}).to(torch::kFloat32) / 255.0;
    return {t.contiguous()};
}

RgbImage read_png(const std::filesystem::path& path) { return decode_png(read_file(path)); }

std::vector<uint8_t> encode_png(const RgbImage& image) {
    auto hwc = (image.data.detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
    return encode_png_raw(hwc.data_ptr<uint8_t>(), image.height(), image.width(), PNG_FORMAT_RGB);
}

void write_png(const RgbImage& image, const std::filesystem::path& path) { write_file(path, encode_png(image)); }

MaskImage decode_mask_png(const std::vector<uint8_t>& bytes) {
    int64_t h = 0, w = 0;
    auto buf = decode_png_raw(bytes, PNG_FORMAT_GRAY, h, w);
    auto t = torch::from_blob(buf.data(), {h, w}, torch::kUInt8).to(torch::kFloat32);
    return {(t >= 128.0).to(torch::kFloat32)};
}

MaskImage read_mask_png(const std::filesystem::path& path) { return decode_mask_png(read_file(path)); }

std::vector<uint8_t> encode_mask_png(const MaskImage& mask) {
    auto g = ((mask.data.detach() > 0.5).to(torch::kUInt8) * 255).contiguous();
    return encode_png_raw(g.data_ptr<uint8_t>(), mask.height(), mask.width(), PNG_FORMAT_GRAY);
}

void write_mask_png(const MaskImage& mask, const std::filesystem::path& path) { write_file(path, encode_mask_png(mask)); }

std::vector<uint8_t> encode_flow(const FlowField& flow) {
    const uint32_t h = static_cast<uint32_t>(flow.height());
    const uint32_t w = static_cast<uint32_t>(flow.width());
    auto hwc = flow.data.detach().to(torch::kFloat32).permute({1, 2, 0}).contiguous();
    std::vector<uint8_t> out(12 + static_cast<size_t>(h) * w * 2 * 4);
    const uint32_t header[3] = {h, w, 2};
    std::memcpy(out.data(), header, 12);
    std::memcpy(out.data() + 12, hwc.data_ptr<float>(), out.size() - 12);
    return out;
}

FlowField decode_flow(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 12) fail(ErrorKind::Encoding, "flow file too short");
    uint32_t header[3];
    std::memcpy(header, bytes.data(), 12);
    if (header[2] != 2) fail(ErrorKind::Encoding, "flow file must have 2 channels");
    const size_t expected = 12 + static_cast<size_t>(header[0]) * header[1] * 2 * 4;
    if (bytes.size() != expected) fail(ErrorKind::Encoding, "flow file size does not match header");
    auto hwc = torch::empty({header[0], header[1], 2}, torch::kFloat32);
    std::memcpy(hwc.data_ptr<float>(), bytes.data() + 12, expected - 12);
    return {hwc.permute({2, 0, 1}).contiguous()};
}

void write_flow(const FlowField& flow, const std::filesystem::path& path) { write_file(path, encode_flow(flow)); }
FlowField read_flow(const std::filesystem::path& path) { return decode_flow(read_file(path)); }

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::vector<uint8_t>(text.begin(), text.end()));
}

std::string read_text(const std::filesystem::path& path) {
    auto b = read_file(path);
    return {b.begin(), b.end()};
}

RgbImage resize(const RgbImage& image, int64_t height, int64_t width) {
    if (image.height() == height && image.width() == width) return image;
    namespace F = torch::nn::functional;
    auto out = F::interpolate(image.data.unsqueeze(0),
                              F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{height, width})
                                  .mode(torch::kBilinear)
                                  .align_corners(false)
                                  .antialias(height < image.height() || width < image.width()));
    return {out.squeeze(0).clamp(0.0, 1.0)};
}

MaskImage resize_mask(const MaskImage& mask, int64_t height, int64_t width) {
    if (mask.height() == height && mask.width() == width) return mask;
    namespace F = torch::nn::functional;
    auto out = F::interpolate(mask.data.unsqueeze(0).unsqueeze(0),
                              F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{height, width})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
    return {(out.squeeze(0).squeeze(0) > 0.5).to(torch::kFloat32)};
}

}  // namespace dynadrag
