#pragma once

#include "dynadrag/geometry.hpp"
#include "dynadrag/raster.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace dynadrag {

enum class LatentOrigin { Encoded, Inverted, Optimized, Denoised };

std::string to_string(LatentOrigin origin);

/// Diffusion latent at DDIM index t. `z` is [1, C_lat, H/8, W/8].
struct LatentState {
    torch::Tensor z;
    int t = 0;
    LatentOrigin origin = LatentOrigin::Encoded;
};

/// Last decoder-block features resampled to latent resolution, [C_feat, h, w].
struct FeatureMap {
    torch::Tensor data;

    int64_t channels() const { return data.size(0); }
    int64_t height() const { return data.size(1); }
    int64_t width() const { return data.size(2); }
};

/// Bilinear feature lookup at a latent-space position. Differentiable in the feature map; warns and
/// clamps outside the raster.
torch::Tensor sample_feature(const FeatureMap& fm, Point p_latent);

struct LoraOptions {
    int rank = 16;
    int steps = 200;
    double learning_rate = 2e-4;
    double weight_decay = 1e-2;
    uint64_t seed = 0;
};

/// Low-rank adapter tensors keyed by parameter name, plus provenance.
struct LoraAdapter {
    static constexpr int kFormatVersion = 1;

    std::string id;
    std::string base_model_id;
    int rank = 0;
    std::map<std::string, torch::Tensor> tensors;
    std::vector<double> loss_curve;  // fixed-probe denoising loss, one entry per evaluation point

    bool is_identity() const { return tensors.empty(); }

    void save(const std::filesystem::path& path) const;
    /// Rejects files whose (base model, rank) do not match the expectation when given.
    static LoraAdapter load(const std::filesystem::path& path,
                            std::optional<std::pair<std::string, int>> expect = std::nullopt);
};

/// Result of one denoiser evaluation: the next-lower latent and the feature map from the same pass.
struct DenoiseWithFeatures {
    torch::Tensor z_prev;
    FeatureMap features;
};

/// Latent-diffusion machinery behind the edit loop. Both kinds implement the same contracts.
class DiffusionBackend {
public:
    virtual ~DiffusionBackend() = default;

    virtual std::string kind() const = 0;
    virtual std::string model_id() const = 0;
    /// Native image resolution (square).
    virtual int64_t resolution() const = 0;
    virtual int downscale() const = 0;
    virtual int64_t latent_channels() const = 0;
    virtual int64_t feature_channels() const = 0;

    virtual torch::Tensor encode(const RgbImage& image) = 0;
    virtual RgbImage decode(const torch::Tensor& z0) = 0;

    virtual LoraAdapter finetune_identity_lora(const RgbImage& image, const LoraOptions& options) = 0;
    virtual void set_adapter(std::shared_ptr<const LoraAdapter> adapter) = 0;

    /// z_1 .. z_steps for a clean latent, empty-prompt conditioning.
    virtual std::vector<LatentState> ddim_invert(const torch::Tensor& z0, int steps) = 0;

    /// One DDIM step t -> t-1. With a KV source, every self-attention layer takes keys and values from
    /// a parallel pass of the source at the same index.
    virtual LatentState denoise_step(const LatentState& state, const LatentState* kv_source) = 0;

    /// Differentiable with respect to state.z.
    virtual FeatureMap extract_features(const LatentState& state) = 0;

    /// Plain step and features from a single differentiable denoiser pass.
    virtual DenoiseWithFeatures step_with_features(const LatentState& state) = 0;

    /// Runs denoise_step from state.t down to 0; the KV source is denoised alongside when given.
    LatentState denoise_to_clean(const LatentState& state, const LatentState* kv_source);
};

/// Deterministic stand-in: latent = area-pooled (R, G, B, luma), identity dynamics, features = latent
/// tiled to `feature_channels`, decode = nearest upsampling of the RGB channels.
class ToyBackend final : public DiffusionBackend {
public:
    explicit ToyBackend(int64_t resolution = 512, int64_t feature_channels = 8, int downscale = 8);

    std::string kind() const override { return "toy"; }
    std::string model_id() const override { return "toy"; }
    int64_t resolution() const override { return resolution_; }
    int downscale() const override { return downscale_; }
    int64_t latent_channels() const override { return 4; }
    int64_t feature_channels() const override { return feature_channels_; }

    torch::Tensor encode(const RgbImage& image) override;
    RgbImage decode(const torch::Tensor& z0) override;
    LoraAdapter finetune_identity_lora(const RgbImage& image, const LoraOptions& options) override;
    void set_adapter(std::shared_ptr<const LoraAdapter>) override {}
    std::vector<LatentState> ddim_invert(const torch::Tensor& z0, int steps) override;
    LatentState denoise_step(const LatentState& state, const LatentState* kv_source) override;
    FeatureMap extract_features(const LatentState& state) override;
    DenoiseWithFeatures step_with_features(const LatentState& state) override;

private:
    int64_t resolution_;
    int64_t feature_channels_;
    int downscale_;
};

struct BackendSpec {
    std::string kind = "toy";  // toy | ldm
    std::string model_id;      // ldm: "mini" or a checkpoint path
    int64_t resolution = 512;
    uint64_t seed = 0;
};

std::shared_ptr<DiffusionBackend> make_backend(const BackendSpec& spec);

}  // namespace dynadrag
