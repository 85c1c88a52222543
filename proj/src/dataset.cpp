#include "dynadrag/dataset.hpp"

#include "dynadrag/error.hpp"
#include "dynadrag/image_io.hpp"
#include "dynadrag/log.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>

namespace dynadrag {
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------------------------
// Synthetic motion

nlohmann::json SyntheticMotion::to_json() const {
    return {
        {"kind", kind == Kind::TranslatingSquare ? "translating-square" : "rotation"},
        {"height", height},
        {"width", width},
        {"frames", frames},
        {"origin", {origin.x, origin.y}},
        {"side", side},
        {"velocity", {velocity.x, velocity.y}},
        {"center", {center.x, center.y}},
        {"angle_per_frame", angle_per_frame},
        {"texture_seed", texture_seed},
    };
}

SyntheticMotion SyntheticMotion::from_json(const nlohmann::json& j) {
    SyntheticMotion m;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "translating-square") m.kind = Kind::TranslatingSquare;
    else if (kind == "rotation") m.kind = Kind::Rotation;
    else fail(ErrorKind::InvalidArgument, "unknown synthetic motion kind '" + kind + "'");
    m.height = j.at("height").get<int64_t>();
    m.width = j.at("width").get<int64_t>();
    m.frames = j.at("frames").get<int64_t>();
    m.origin = {j.at("origin")[0].get<double>(), j.at("origin")[1].get<double>()};
    m.side = j.at("side").get<int64_t>();
    m.velocity = {j.at("velocity")[0].get<double>(), j.at("velocity")[1].get<double>()};
    m.center = {j.at("center")[0].get<double>(), j.at("center")[1].get<double>()};
    m.angle_per_frame = j.at("angle_per_frame").get<double>();
    m.texture_seed = j.at("texture_seed").get<uint64_t>();
    return m;
}

namespace {

Point rotate_about(Point p, Point c, double angle) {
    const double cs = std::cos(angle);
    const double sn = std::sin(angle);
    const Point d = p - c;
    return {c.x + cs * d.x - sn * d.y, c.y + sn * d.x + cs * d.y};
}

double disc_radius(const SyntheticMotion& m) {
    return std::max(2.0, static_cast<double>(std::min(m.height, m.width)) / 2.0 - 4.0);
}

}  // namespace

Point SyntheticMotion::track(Point p, int64_t from_frame, int64_t to_frame) const {
    const double df = static_cast<double>(to_frame - from_frame);
    if (kind == Kind::TranslatingSquare) return p + velocity * df;
    return rotate_about(p, center, angle_per_frame * df);
}

FlowField SyntheticMotion::flow(int64_t frame) const {
    auto out = FlowField::zeros(height, width);
    auto f = out.data.accessor<float, 3>();
    if (kind == Kind::TranslatingSquare) {
        // Support extends one pixel beyond the square so bilinear lookups at content positions never mix
        // in background zeros.
        const Point o = origin + velocity * static_cast<double>(frame);
        for (int64_t y = 0; y < height; ++y) {
            for (int64_t x = 0; x < width; ++x) {
                const bool inside = x > o.x - 1.0 && x < o.x + side && y > o.y - 1.0 && y < o.y + side;
                if (!inside) continue;
                f[0][y][x] = static_cast<float>(velocity.x);
                f[1][y][x] = static_cast<float>(velocity.y);
            }
        }
    } else {
        for (int64_t y = 0; y < height; ++y) {
            for (int64_t x = 0; x < width; ++x) {
                const Point p{static_cast<double>(x), static_cast<double>(y)};
                const Point d = rotate_about(p, center, angle_per_frame) - p;
                f[0][y][x] = static_cast<float>(d.x);
                f[1][y][x] = static_cast<float>(d.y);
            }
        }
    }
    return out;
}

MaskImage SyntheticMotion::region(int64_t frame) const {
    auto out = MaskImage::empty(height, width);
    auto a = out.data.accessor<float, 2>();
    if (kind == Kind::TranslatingSquare) {
        const Point o = origin + velocity * static_cast<double>(frame);
        for (int64_t y = 0; y < height; ++y)
            for (int64_t x = 0; x < width; ++x)
                if (x >= o.x && x <= o.x + side - 1 && y >= o.y && y <= o.y + side - 1) a[y][x] = 1.0F;
    } else {
        const double r = disc_radius(*this);
        for (int64_t y = 0; y < height; ++y)
            for (int64_t x = 0; x < width; ++x)
                if (std::hypot(x - center.x, y - center.y) <= r) a[y][x] = 1.0F;
    }
    return out;
}

RgbImage SyntheticMotion::render(int64_t frame) const {
    auto img = RgbImage::zeros(height, width);
    auto a = img.data.accessor<float, 3>();

    std::mt19937_64 rng(texture_seed);
    std::uniform_real_distribution<double> unit(0.2, 1.0);
    constexpr int kCells = 4;
    double palette[kCells][kCells][3];
    for (auto& row : palette)
        for (auto& cell : row)
            for (double& c : cell) c = unit(rng);

    for (int64_t y = 0; y < height; ++y) {
        for (int64_t x = 0; x < width; ++x) {
            double rgb[3] = {0.25 + 0.15 * std::sin(x / 7.0), 0.25 + 0.15 * std::cos(y / 9.0), 0.35};
            if (kind == Kind::TranslatingSquare) {
                const Point o = origin + velocity * static_cast<double>(frame);
                const double u = x - o.x;
                const double v = y - o.y;
                if (u >= 0 && v >= 0 && u < side && v < side) {
                    const int cx = std::min<int>(kCells - 1, static_cast<int>(u * kCells / side));
                    const int cy = std::min<int>(kCells - 1, static_cast<int>(v * kCells / side));
                    for (int c = 0; c < 3; ++c) rgb[c] = palette[cy][cx][c];
                }
            } else {
                const Point p{static_cast<double>(x), static_cast<double>(y)};
                if (std::hypot(p.x - center.x, p.y - center.y) <= disc_radius(*this)) {
                    const Point q = rotate_about(p, center, -angle_per_frame * static_cast<double>(frame)) - center;
                    rgb[0] = 0.5 + 0.4 * std::sin(q.x / 3.0);
                    rgb[1] = 0.5 + 0.4 * std::sin(q.y / 4.0);
                    rgb[2] = 0.5 + 0.4 * std::cos((q.x + q.y) / 5.0);
                }
            }
            for (int c = 0; c < 3; ++c) a[c][y][x] = static_cast<float>(rgb[c]);
        }
    }
    return img;
}

VideoClip render_clip(const SyntheticMotion& motion, const std::string& source_id) {
    VideoClip clip;
    clip.source_id = source_id;
    clip.frames.reserve(static_cast<size_t>(motion.frames));
    for (int64_t f = 0; f < motion.frames; ++f) clip.frames.push_back(motion.render(f));
    return clip;
}

std::vector<FlowField> SyntheticFlowEstimator::estimate(const VideoClip& clip) const {
    require(clip.size() >= 2, "flow estimation needs at least two frames");
    require(clip.frames[0].height() == motion_.height && clip.frames[0].width() == motion_.width,
            "synthetic estimator: clip size does not match its motion description");
    std::vector<FlowField> out;
    out.reserve(static_cast<size_t>(clip.size() - 1));
    for (int64_t i = 0; i + 1 < clip.size(); ++i) out.push_back(motion_.flow(i));
    return out;
}

MaskImage SyntheticRegionExtractor::extract(const VideoClip&, int64_t frame_index) const { return motion_.region(frame_index); }

// ---------------------------------------------------------------------------------------------
// Subprocess plugins

namespace {

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') out += "'\\''";
        else out += c;
    }
    return out + "'";
}

fs::path make_temp_dir(const std::string& prefix) {
    std::string templ = (fs::temp_directory_path() / (prefix + "XXXXXX")).string();
    if (mkdtemp(templ.data()) == nullptr) fail(ErrorKind::Io, "cannot create temporary directory");
    return templ;
}

void run_command(const std::string& cmd) {
    log::debug("running plugin: ", cmd);
    const int rc = std::system(cmd.c_str());
    if (rc != 0) fail(ErrorKind::Unavailable, c10::str("plugin command failed (exit ", rc, "): ", cmd));
}

std::string frame_name(const char* stem, int64_t i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%05lld.%s", stem, static_cast<long long>(i), ext);
    return buf;
}

}  // namespace

std::vector<FlowField> SubprocessFlowEstimator::estimate(const VideoClip& clip) const {
    const fs::path tmp = make_temp_dir("dynadrag-flow-");
    const fs::path frames = tmp / "frames";
    const fs::path out = tmp / "flow";
    fs::create_directories(frames);
    fs::create_directories(out);
    for (int64_t i = 0; i < clip.size(); ++i) write_png(clip.frames[static_cast<size_t>(i)], frames / frame_name("frame", i, "png"));
    run_command(command_ + " " + shell_quote(frames.string()) + " " + shell_quote(out.string()));
    std::vector<FlowField> flows;
    for (int64_t i = 0; i + 1 < clip.size(); ++i) {
        FlowField f = read_flow(out / frame_name("flow", i, "f32"));
        require(f.height() == clip.frames[0].height() && f.width() == clip.frames[0].width(),
                "flow plugin returned a field of the wrong size", ErrorKind::Encoding);
        flows.push_back(std::move(f));
    }
    fs::remove_all(tmp);
    return flows;
}

MaskImage SubprocessRegionExtractor::extract(const VideoClip& clip, int64_t frame_index) const {
    const fs::path tmp = make_temp_dir("dynadrag-region-");
    const fs::path frame = tmp / "frame.png";
    const fs::path mask = tmp / "mask.png";
    write_png(clip.frames.at(static_cast<size_t>(frame_index)), frame);
    run_command(command_ + " " + shell_quote(frame.string()) + " " + shell_quote(mask.string()));
    MaskImage m = read_mask_png(mask);
    fs::remove_all(tmp);
    require(m.height() == clip.frames[0].height() && m.width() == clip.frames[0].width(),
            "region plugin returned a mask of the wrong size", ErrorKind::Encoding);
    return m;
}

// ---------------------------------------------------------------------------------------------
// Sampling

std::vector<Point> sample_handles(const MaskImage& region, const FlowField& flow, std::mt19937_64& rng,
                                  std::optional<int> count) {
    require(region.height() == flow.height() && region.width() == flow.width(), "sample_handles: region and flow sizes differ");
    auto mask = region.data.contiguous();
    auto magnitude = flow.data.to(torch::kFloat64).pow(2).sum(0).sqrt().contiguous();
    auto m = mask.accessor<float, 2>();
    auto mag = magnitude.accessor<double, 2>();

    std::vector<Point> candidates;
    std::vector<double> weights;
    int64_t region_pixels = 0;
    for (int64_t y = 0; y < region.height(); ++y) {
        for (int64_t x = 0; x < region.width(); ++x) {
            if (m[y][x] < 0.5F) continue;
            ++region_pixels;
            if (mag[y][x] <= 0.0) continue;
            candidates.push_back({static_cast<double>(x), static_cast<double>(y)});
            weights.push_back(mag[y][x]);
        }
    }
    if (region_pixels == 0) throw SampleRejected("empty editing region");
    if (candidates.empty()) throw SampleRejected("static scene: no motion inside the editing region");

    int n = count ? *count : std::uniform_int_distribution<int>(kMinHandles, kMaxHandles)(rng);
    require(n >= 1, "sample_handles: count must be positive");
    n = std::min<int>(n, static_cast<int>(candidates.size()));

    std::vector<Point> out;
    out.reserve(static_cast<size_t>(n));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> cumulative(weights.size());
    for (int k = 0; k < n; ++k) {
        std::partial_sum(weights.begin(), weights.end(), cumulative.begin());
        const double total = cumulative.back();
        const double u = unit(rng) * total;
        auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
        size_t idx = static_cast<size_t>(std::distance(cumulative.begin(), it));
        idx = std::min(idx, weights.size() - 1);
        while (weights[idx] == 0.0) --idx;  // u landed exactly on a boundary after a removed entry
        out.push_back(candidates[idx]);
        weights[idx] = 0.0;
    }
    return out;
}

std::vector<Point> sample_handles(const MaskImage& region, const FlowField& flow, uint64_t rng_seed) {
    std::mt19937_64 rng(rng_seed);
    return sample_handles(region, flow, rng);
}

Point chain_flow(const std::vector<FlowField>& flows, Point start, int64_t s, int64_t e) {
    require(s >= 0 && s < e && e <= static_cast<int64_t>(flows.size()),
            c10::str("chain_flow: need 0 <= s < e <= ", flows.size(), ", got s=", s, " e=", e));
    Point p = start;
    for (int64_t i = s; i < e; ++i) {
        const FlowField& f = flows[static_cast<size_t>(i)];
        p = clamp_to_bounds(p + f.at(p), f.width(), f.height());
    }
    return p;
}

std::pair<int64_t, int64_t> admissible_start_range(int64_t clip_length) {
    require(clip_length >= kMinWindow + 1, c10::str("clip too short: ", clip_length, " frames, need at least ", kMinWindow + 1));
    return {0, clip_length - 1 - kMinWindow};
}

TrainingSample build_sample(const VideoClip& clip, const RegionExtractor& extractor, const std::vector<FlowField>& flows,
                            uint64_t rng_seed) {
    const auto [lo, hi] = admissible_start_range(clip.size());
    require(static_cast<int64_t>(flows.size()) == clip.size() - 1, "build_sample: need S-1 flow fields");
    std::mt19937_64 rng(rng_seed);
    const int64_t s = std::uniform_int_distribution<int64_t>(lo, hi)(rng);
    const int64_t e = std::uniform_int_distribution<int64_t>(s + kMinWindow, std::min(s + kMaxWindow, clip.size() - 1))(rng);

    const MaskImage region = extractor.extract(clip, s);
    const FlowField& fs_flow = flows[static_cast<size_t>(s)];
    const std::vector<Point> handles = sample_handles(region, fs_flow, rng);

    TrainingSample sample;
    sample.start_frame = clip.frames[static_cast<size_t>(s)];
    sample.gt_flow = fs_flow;
    sample.meta = {clip.source_id, s, e, rng_seed};
    for (const Point& h : handles) sample.pairs.push_back(PointPair::from_user(h, chain_flow(flows, h, s, e)));
    return sample;
}

TrainingSample build_sample(const VideoClip& clip, const RegionExtractor& extractor, const FlowEstimator& estimator,
                            uint64_t rng_seed) {
    admissible_start_range(clip.size());
    return build_sample(clip, extractor, estimator.estimate(clip), rng_seed);
}

uint64_t fnv1a(const std::string& text) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t derive_seed(uint64_t global_seed, const std::string& source_id) {
    // splitmix64 finalizer over the combined value
    uint64_t z = fnv1a(source_id) ^ (global_seed + 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

bool is_train_source(const std::string& source_id) { return fnv1a(source_id) % 100 < 95; }

// ---------------------------------------------------------------------------------------------
// Records

void write_sample(const TrainingSample& sample, const fs::path& dir) {
    fs::create_directories(dir);
    write_png(sample.start_frame, dir / "frame.png");
    write_flow(sample.gt_flow, dir / "flow.f32");
    nlohmann::json pairs = nlohmann::json::array();
    for (const PointPair& p : sample.pairs)
        pairs.push_back({{"handle", {p.handle.x, p.handle.y}}, {"target", {p.target.x, p.target.y}}});
    write_text(dir / "pairs.json", pairs.dump(2) + "\n");
    nlohmann::json meta = {{"source_id", sample.meta.source_id},
                           {"s", sample.meta.start},
                           {"e", sample.meta.end},
                           {"seed", sample.meta.seed}};
    write_text(dir / "meta.json", meta.dump(2) + "\n");
}

TrainingSample read_sample(const fs::path& dir) {
    TrainingSample sample;
    sample.start_frame = read_png(dir / "frame.png");
    sample.gt_flow = read_flow(dir / "flow.f32");
    const auto pairs = nlohmann::json::parse(read_text(dir / "pairs.json"));
    for (const auto& p : pairs) {
        sample.pairs.push_back(PointPair::from_user({p.at("handle")[0].get<double>(), p.at("handle")[1].get<double>()},
                                                    {p.at("target")[0].get<double>(), p.at("target")[1].get<double>()}));
    }
    const auto meta = nlohmann::json::parse(read_text(dir / "meta.json"));
    sample.meta = {meta.at("source_id").get<std::string>(), meta.at("s").get<int64_t>(), meta.at("e").get<int64_t>(),
                   meta.at("seed").get<uint64_t>()};
    return sample;
}

std::vector<fs::path> list_samples(const fs::path& root) {
    std::vector<fs::path> out;
    if (!fs::exists(root)) return out;
    for (const auto& entry : fs::recursive_directory_iterator(root))
        if (entry.is_regular_file() && entry.path().filename() == "meta.json") out.push_back(entry.path().parent_path());
    std::sort(out.begin(), out.end());
    return out;
}

VideoClip read_clip(const fs::path& dir) {
    VideoClip clip;
    clip.source_id = dir.filename().string();
    std::vector<fs::path> frames;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".png") frames.push_back(entry.path());
    std::sort(frames.begin(), frames.end());
    for (const auto& f : frames) clip.frames.push_back(read_png(f));
    if (fs::exists(dir / "clip.json")) clip.fps = nlohmann::json::parse(read_text(dir / "clip.json")).value("fps", 25.0);
    require(!clip.frames.empty(), "clip directory has no frames: " + dir.string());
    for (const auto& f : clip.frames)
        require(f.height() == clip.frames[0].height() && f.width() == clip.frames[0].width(),
                "clip frames differ in size: " + dir.string());
    return clip;
}

void write_clip(const VideoClip& clip, const fs::path& dir) {
    fs::create_directories(dir);
    for (size_t i = 0; i < clip.frames.size(); ++i) write_png(clip.frames[i], dir / frame_name("frame", static_cast<int64_t>(i), "png"));
    write_text(dir / "clip.json", nlohmann::json{{"fps", clip.fps}}.dump() + "\n");
}

BuildReport build_dataset(const fs::path& videos, const fs::path& out, const BuildOptions& options) {
    require(fs::is_directory(videos), "videos directory not found: " + videos.string());
    std::vector<fs::path> clips;
    for (const auto& entry : fs::directory_iterator(videos))
        if (entry.is_directory()) clips.push_back(entry.path());
    std::sort(clips.begin(), clips.end());

    BuildReport report;
    for (const fs::path& dir : clips) {
        const VideoClip clip = read_clip(dir);
        std::optional<SyntheticMotion> motion;
        if (fs::exists(dir / "motion.json")) motion = SyntheticMotion::from_json(nlohmann::json::parse(read_text(dir / "motion.json")));

        std::unique_ptr<RegionExtractor> extractor;
        if (options.extractor == "synthetic") {
            require(motion.has_value(), "synthetic extractor needs motion.json in " + dir.string());
            extractor = std::make_unique<SyntheticRegionExtractor>(*motion);
        } else if (options.extractor == "face" || options.extractor == "person") {
            require(!options.extractor_command.empty(), "--extractor " + options.extractor + " needs a plugin command");
            extractor = std::make_unique<SubprocessRegionExtractor>(options.extractor == "face" ? "face-parsing" : "person-detection",
                                                                    options.extractor_command);
        } else {
            fail(ErrorKind::InvalidArgument, "unknown extractor '" + options.extractor + "'");
        }

        std::unique_ptr<FlowEstimator> estimator;
        if (options.estimator == "synthetic") {
            require(motion.has_value(), "synthetic estimator needs motion.json in " + dir.string());
            estimator = std::make_unique<SyntheticFlowEstimator>(*motion);
        } else if (options.estimator == "external") {
            require(!options.estimator_command.empty(), "--estimator external needs a plugin command");
            estimator = std::make_unique<SubprocessFlowEstimator>(options.estimator_command);
        } else {
            fail(ErrorKind::InvalidArgument, "unknown estimator '" + options.estimator + "'");
        }

        if (clip.size() < kMinWindow + 1) {
            log::warn("skipping ", clip.source_id, ": clip too short (", clip.size(), " frames)");
            ++report.rejected;
            report.rejected_sources.push_back(clip.source_id);
            continue;
        }
        const std::vector<FlowField> flows = estimator->estimate(clip);
        const fs::path split = out / (is_train_source(clip.source_id) ? "train" : "test");
        for (int j = 0; j < options.samples_per_clip; ++j) {
            const uint64_t seed = derive_seed(options.seed, clip.source_id) + static_cast<uint64_t>(j);
            try {
                const TrainingSample sample = build_sample(clip, *extractor, flows, seed);
                write_sample(sample, split / c10::str(clip.source_id, "_", j));
                ++report.written;
            } catch (const SampleRejected& e) {
                log::warn("skipping sample ", j, " of ", clip.source_id, ": ", e.what());
                ++report.rejected;
                report.rejected_sources.push_back(clip.source_id);
            }
        }
    }
    return report;
}

std::vector<TrainingSample> synthetic_translation_samples(int count, int64_t size, double speed, uint64_t seed) {
    require(count > 0 && size >= 32 && speed > 0, "synthetic_translation_samples: bad arguments");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> angle_dist(0.0, 2.0 * M_PI);
    std::vector<TrainingSample> out;
    out.reserve(static_cast<size_t>(count));
    constexpr int64_t kFrames = 70;
    while (static_cast<int>(out.size()) < count) {
        SyntheticMotion m;
        m.kind = SyntheticMotion::Kind::TranslatingSquare;
        m.height = size;
        m.width = size;
        m.frames = kFrames;
        m.side = std::max<int64_t>(8, size / 5);
        const double a = angle_dist(rng);
        m.velocity = {speed * std::cos(a), speed * std::sin(a)};
        // keep the whole trajectory inside the frame
        const double travel_x = m.velocity.x * (kFrames - 1);
        const double travel_y = m.velocity.y * (kFrames - 1);
        const double x_lo = std::max(0.0, -travel_x);
        const double x_hi = static_cast<double>(size - m.side) - std::max(0.0, travel_x);
        const double y_lo = std::max(0.0, -travel_y);
        const double y_hi = static_cast<double>(size - m.side) - std::max(0.0, travel_y);
        require(x_hi >= x_lo && y_hi >= y_lo, "synthetic_translation_samples: speed too high for the frame size");
        m.origin = {std::uniform_real_distribution<double>(x_lo, x_hi)(rng), std::uniform_real_distribution<double>(y_lo, y_hi)(rng)};
        m.texture_seed = rng();
        const std::string id = c10::str("synthetic-", out.size());
        const VideoClip clip = render_clip(m, id);
        SyntheticRegionExtractor extractor(m);
        SyntheticFlowEstimator estimator(m);
        try {
            out.push_back(build_sample(clip, extractor, estimator, rng()));
        } catch (const SampleRejected&) {
        }
    }
    return out;
}

}  // namespace dynadrag
