#pragma once

// Network modules of the latent diffusion backend. Internal to the library.

#include "dynadrag/ldm_backend.hpp"

#include <torch/torch.h>

#include <string>
#include <vector>

namespace dynadrag {

/// Linear layer with an optional low-rank residual (up @ down). The low-rank tensors are kept out of the
/// module's parameter list so base checkpoints never contain them.
class LoraLinearImpl : public torch::nn::Module {
public:
    LoraLinearImpl(int64_t in, int64_t out, bool bias);
    torch::Tensor forward(const torch::Tensor& x);

    /// Fresh trainable tensors: down ~ N(0, 1/rank), up = 0.
    void reset_lora(int rank);
    void set_lora(torch::Tensor down, torch::Tensor up);
    void clear_lora();
    bool has_lora() const { return down_.defined(); }
    torch::Tensor& down() { return down_; }
    torch::Tensor& up() { return up_; }

private:
    torch::nn::Linear base_{nullptr};
    torch::Tensor down_;  // [rank, in]
    torch::Tensor up_;    // [out, rank]
};
TORCH_MODULE(LoraLinear);

class AttentionImpl : public torch::nn::Module {
public:
    AttentionImpl(int64_t query_dim, int64_t context_dim, int64_t heads, bool self_attention);
    /// x [B, N, C]. For self-attention with `share_kv` and B == 2, keys and values of both batch entries come
    /// from entry 1 (the KV source).
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context, bool share_kv);

private:
    int64_t heads_;
    bool self_;
    LoraLinear to_q_{nullptr}, to_k_{nullptr}, to_v_{nullptr}, to_out_{nullptr};
};
TORCH_MODULE(Attention);

class TransformerBlockImpl : public torch::nn::Module {
public:
    TransformerBlockImpl(int64_t dim, int64_t context_dim, int64_t heads);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context, bool share_kv);

private:
    torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr}, norm3_{nullptr};
    Attention attn1_{nullptr}, attn2_{nullptr};
    torch::nn::Linear ff_in_{nullptr}, ff_out_{nullptr};  // GEGLU
};
TORCH_MODULE(TransformerBlock);

class SpatialTransformerImpl : public torch::nn::Module {
public:
    SpatialTransformerImpl(int64_t channels, int64_t context_dim, int64_t heads, int64_t groups);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context, bool share_kv);

private:
    torch::nn::GroupNorm norm_{nullptr};
    torch::nn::Conv2d proj_in_{nullptr}, proj_out_{nullptr};
    TransformerBlock block_{nullptr};
};
TORCH_MODULE(SpatialTransformer);

/// GroupNorm-SiLU-conv residual block; `temb_dim` 0 disables the time embedding input.
class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(int64_t c_in, int64_t c_out, int64_t temb_dim, int64_t groups);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb = {});

private:
    torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
    torch::nn::Linear temb_proj_{nullptr};
};
TORCH_MODULE(ResBlock);

class AutoencoderImpl : public torch::nn::Module {
public:
    explicit AutoencoderImpl(const LdmConfig& cfg);
    /// [B, 3, H, W] in [-1, 1] -> posterior mean [B, C_lat, H/8, W/8] (unscaled).
    torch::Tensor encode(const torch::Tensor& x);
    /// Unscaled latent -> image in [-1, 1].
    torch::Tensor decode(const torch::Tensor& z);

private:
    int64_t groups_;
    torch::nn::Conv2d enc_in_{nullptr}, enc_out_{nullptr}, dec_in_{nullptr}, dec_out_{nullptr};
    torch::nn::ModuleList enc_blocks_, dec_blocks_;
    std::vector<bool> enc_is_down_, dec_is_up_;
    ResBlock enc_mid_{nullptr}, dec_mid_{nullptr};
    torch::nn::GroupNorm enc_norm_{nullptr}, dec_norm_{nullptr};
};
TORCH_MODULE(Autoencoder);

struct UnetOutput {
    torch::Tensor eps;       // [B, C_lat, h, w]
    torch::Tensor features;  // last up-block output, [B, C_feat, h, w]
};

class UnetImpl : public torch::nn::Module {
public:
    explicit UnetImpl(const LdmConfig& cfg);
    UnetOutput forward(const torch::Tensor& z, const torch::Tensor& timesteps, const torch::Tensor& context, bool share_kv);

private:
    struct Stage {
        ResBlock res{nullptr};
        SpatialTransformer attn{nullptr};
        torch::nn::Conv2d resample{nullptr};  // down (stride 2) or up (after nearest x2)
    };

    LdmConfig cfg_;
    torch::nn::Linear time1_{nullptr}, time2_{nullptr};
    torch::nn::Conv2d conv_in_{nullptr}, conv_out_{nullptr};
    std::vector<Stage> down_, up_;
    std::vector<bool> up_ends_level_;
    ResBlock mid1_{nullptr}, mid2_{nullptr};
    SpatialTransformer mid_attn_{nullptr};
    torch::nn::GroupNorm norm_out_{nullptr};
};
TORCH_MODULE(Unet);

class LdmModel : public torch::nn::Module {
public:
    explicit LdmModel(const LdmConfig& cfg, int64_t seed);

    Autoencoder vae{nullptr};
    Unet unet{nullptr};
    torch::Tensor null_context;  // empty-prompt embedding [1, tokens, context_dim]

    /// Every low-rank-capable projection, keyed by module path.
    std::vector<std::pair<std::string, LoraLinear>> lora_layers();
};

}  // namespace dynadrag
