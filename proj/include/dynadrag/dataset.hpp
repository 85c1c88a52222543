#pragma once

#include "dynadrag/geometry.hpp"
#include "dynadrag/raster.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace dynadrag {

inline constexpr int kMinHandles = 1;
inline constexpr int kMaxHandles = 7;
inline constexpr int kMinWindow = 15;
inline constexpr int kMaxWindow = 55;

struct VideoClip {
    std::vector<RgbImage> frames;
    double fps = 25.0;
    std::string source_id;

    int64_t size() const { return static_cast<int64_t>(frames.size()); }
};

struct SampleMeta {
    std::string source_id;
    int64_t start = 0;  // s
    int64_t end = 0;    // e
    uint64_t seed = 0;

    friend bool operator==(const SampleMeta&, const SampleMeta&) = default;
};

struct TrainingSample {
    RgbImage start_frame;
    std::vector<PointPair> pairs;  // handles in v_s, targets in v_e
    FlowField gt_flow;             // f_s
    SampleMeta meta;
};

/// Sample rejected for a recoverable reason (empty region, static scene).
class SampleRejected : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class RegionExtractor {
public:
    virtual ~RegionExtractor() = default;
    virtual std::string kind() const = 0;
    virtual MaskImage extract(const VideoClip& clip, int64_t frame_index) const = 0;
};

class FlowEstimator {
public:
    virtual ~FlowEstimator() = default;
    virtual std::string kind() const = 0;
    /// S-1 fields for an S-frame clip; entry i maps frame i to frame i+1.
    virtual std::vector<FlowField> estimate(const VideoClip& clip) const = 0;
};

// ---------------------------------------------------------------------------------------------
// Synthetic clips with analytic motion. The motion description travels with the clip on disk
// (`motion.json`) so the synthetic estimator and extractor can reproduce exact flow and masks.

struct SyntheticMotion {
    enum class Kind { TranslatingSquare, Rotation };
    Kind kind = Kind::TranslatingSquare;
    int64_t height = 64;
    int64_t width = 64;
    int64_t frames = 70;
    // translating square
    Point origin{16, 16};  // top-left corner at frame 0
    int64_t side = 16;
    Point velocity{1, 0};  // px / frame
    // rotation about `center` by `angle_per_frame` radians
    Point center{32, 32};
    double angle_per_frame = 0.01;
    uint64_t texture_seed = 0;

    nlohmann::json to_json() const;
    static SyntheticMotion from_json(const nlohmann::json& j);

    /// Position at frame f of content that was at p in frame 0.
    Point track(Point p, int64_t from_frame, int64_t to_frame) const;
    /// Flow mapping frame f to f+1.
    FlowField flow(int64_t frame) const;
    /// Region in frame f (the moving square, or the rotating disc).
    MaskImage region(int64_t frame) const;
    RgbImage render(int64_t frame) const;
};

VideoClip render_clip(const SyntheticMotion& motion, const std::string& source_id);

class SyntheticFlowEstimator final : public FlowEstimator {
public:
    explicit SyntheticFlowEstimator(SyntheticMotion motion) : motion_(motion) {}
    std::string kind() const override { return "synthetic-oracle"; }
    std::vector<FlowField> estimate(const VideoClip& clip) const override;

private:
    SyntheticMotion motion_;
};

class SyntheticRegionExtractor final : public RegionExtractor {
public:
    explicit SyntheticRegionExtractor(SyntheticMotion motion) : motion_(motion) {}
    std::string kind() const override { return "custom"; }
    MaskImage extract(const VideoClip& clip, int64_t frame_index) const override;

private:
    SyntheticMotion motion_;
};

/// Plugin run as a subprocess: `<command> <frames_dir> <out_dir>`; frames are written as
/// frame_%05d.png, the plugin writes flow_%05d.f32 for each consecutive pair.
class SubprocessFlowEstimator final : public FlowEstimator {
public:
    explicit SubprocessFlowEstimator(std::string command) : command_(std::move(command)) {}
    std::string kind() const override { return "external-model"; }
    std::vector<FlowField> estimate(const VideoClip& clip) const override;

private:
    std::string command_;
};

/// Plugin run as a subprocess: `<command> <frame.png> <mask.png>`.
class SubprocessRegionExtractor final : public RegionExtractor {
public:
    SubprocessRegionExtractor(std::string kind, std::string command)
        : kind_(std::move(kind)), command_(std::move(command)) {}
    std::string kind() const override { return kind_; }
    MaskImage extract(const VideoClip& clip, int64_t frame_index) const override;

private:
    std::string kind_;
    std::string command_;
};

// ---------------------------------------------------------------------------------------------

/// Draws n ~ U{1..7} (or `count` when given) distinct region pixels with probability proportional to
/// the flow magnitude. Throws SampleRejected on an empty region or an all-static region.
std::vector<Point> sample_handles(const MaskImage& region, const FlowField& flow, std::mt19937_64& rng,
                                  std::optional<int> count = std::nullopt);
std::vector<Point> sample_handles(const MaskImage& region, const FlowField& flow, uint64_t rng_seed);

/// Follows `start` through flows[s] .. flows[e-1] with bilinear sampling, clamping each step.
Point chain_flow(const std::vector<FlowField>& flows, Point start, int64_t s, int64_t e);

/// Admissible start frames: s with s + 15 <= S - 1.
std::pair<int64_t, int64_t> admissible_start_range(int64_t clip_length);

TrainingSample build_sample(const VideoClip& clip, const RegionExtractor& extractor, const FlowEstimator& estimator,
                            uint64_t rng_seed);
/// Same, reusing a precomputed flow sequence for the clip.
TrainingSample build_sample(const VideoClip& clip, const RegionExtractor& extractor,
                            const std::vector<FlowField>& flows, uint64_t rng_seed);

/// Per-clip seed derived from the global seed and the source id (FNV-1a; stable across platforms).
uint64_t derive_seed(uint64_t global_seed, const std::string& source_id);
uint64_t fnv1a(const std::string& text);
/// 95 / 5 split by source-id hash.
bool is_train_source(const std::string& source_id);

// Record IO: <dir>/frame.png, flow.f32, pairs.json, meta.json
void write_sample(const TrainingSample& sample, const std::filesystem::path& dir);
TrainingSample read_sample(const std::filesystem::path& dir);
std::vector<std::filesystem::path> list_samples(const std::filesystem::path& root);

/// Clip directory: frame_%05d.png (sorted by name), optional motion.json, optional clip.json {fps}.
VideoClip read_clip(const std::filesystem::path& dir);
void write_clip(const VideoClip& clip, const std::filesystem::path& dir);

struct BuildReport {
    int64_t written = 0;
    int64_t rejected = 0;
    std::vector<std::string> rejected_sources;
};

struct BuildOptions {
    std::string extractor = "synthetic";  // face | person | synthetic
    std::string estimator = "synthetic";  // external | synthetic
    std::string extractor_command;        // plugin command for face / person
    std::string estimator_command;        // plugin command for external
    uint64_t seed = 0;
    int samples_per_clip = 1;
};

/// Builds records for every clip directory under `videos`, writing train/<id> and test/<id> under `out`.
BuildReport build_dataset(const std::filesystem::path& videos, const std::filesystem::path& out,
                          const BuildOptions& options);

/// Translating-square samples built directly in memory (no disk round-trip); used for MP training tests.
std::vector<TrainingSample> synthetic_translation_samples(int count, int64_t size, double speed, uint64_t seed);

}  // namespace dynadrag
