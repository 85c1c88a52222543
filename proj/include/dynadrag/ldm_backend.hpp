#pragma once

#include "dynadrag/ddim.hpp"
#include "dynadrag/diffusion_backend.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace dynadrag {

/// Architecture of the latent diffusion model: a KL-style autoencoder (8x) and a conditional UNet with
/// self- and cross-attention transformer blocks. `sd15()` carries the Stable Diffusion 1.5 shape;
/// `mini()` is a narrow variant that runs on a CPU in seconds.
struct LdmConfig {
    int64_t latent_channels = 4;
    double scaling_factor = 0.18215;
    std::vector<int64_t> vae_channels = {32, 32, 64, 64};  // one entry per level; len - 1 downsamples

    int64_t unet_channels = 32;
    std::vector<int64_t> channel_mult = {1, 2};
    std::vector<bool> attention = {true, true};
    int64_t res_blocks = 1;
    int64_t heads = 4;
    int64_t context_dim = 32;
    int64_t context_tokens = 4;
    int64_t groups = 8;

    int train_timesteps = 1000;
    double beta_start = 0.00085;
    double beta_end = 0.012;

    int downscale() const { return 1 << (vae_channels.size() - 1); }
    int64_t feature_channels() const { return unet_channels * channel_mult.front(); }
    void validate() const;

    static LdmConfig mini();
    static LdmConfig sd15();

    friend bool operator==(const LdmConfig&, const LdmConfig&) = default;
};

std::string format_ldm_config(const LdmConfig& cfg);
LdmConfig parse_ldm_config(const std::string& text);

class LdmModel;  // defined in src/ldm_modules.hpp

class LdmBackend final : public DiffusionBackend {
public:
    /// Seeded initialization, identified as `model_id`.
    LdmBackend(const LdmConfig& cfg, int64_t resolution, uint64_t seed, std::string model_id = "mini");
    ~LdmBackend() override;

    /// Loads a checkpoint written by `save_checkpoint` (config + autoencoder + UNet + empty-prompt context).
    static std::unique_ptr<LdmBackend> from_checkpoint(const std::filesystem::path& path, int64_t resolution);
    void save_checkpoint(const std::filesystem::path& path) const;

    std::string kind() const override { return "ldm"; }
    std::string model_id() const override { return model_id_; }
    int64_t resolution() const override { return resolution_; }
    int downscale() const override { return cfg_.downscale(); }
    int64_t latent_channels() const override { return cfg_.latent_channels; }
    int64_t feature_channels() const override { return cfg_.feature_channels(); }

    torch::Tensor encode(const RgbImage& image) override;
    RgbImage decode(const torch::Tensor& z0) override;
    LoraAdapter finetune_identity_lora(const RgbImage& image, const LoraOptions& options) override;
    void set_adapter(std::shared_ptr<const LoraAdapter> adapter) override;
    std::vector<LatentState> ddim_invert(const torch::Tensor& z0, int steps) override;
    LatentState denoise_step(const LatentState& state, const LatentState* kv_source) override;
    FeatureMap extract_features(const LatentState& state) override;
    DenoiseWithFeatures step_with_features(const LatentState& state) override;

    const LdmConfig& config() const { return cfg_; }
    const DdimSchedule& schedule() const { return schedule_; }
    /// Re-grids the DDIM schedule; latent indices refer to the current grid.
    void set_ddim_steps(int steps);

    /// Raw noise prediction at DDIM index t (no gradient unless z requires it).
    torch::Tensor predict_noise(const torch::Tensor& z, int t);

private:
    LdmConfig cfg_;
    int64_t resolution_;
    std::string model_id_;
    DdimSchedule schedule_;
    std::unique_ptr<LdmModel> model_;
    std::shared_ptr<const LoraAdapter> adapter_;
};

}  // namespace dynadrag
