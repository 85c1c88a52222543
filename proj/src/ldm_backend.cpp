#include "dynadrag/ldm_backend.hpp"

#include "dynadrag/config.hpp"
#include "dynadrag/error.hpp"
#include "dynadrag/log.hpp"
#include "ldm_modules.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <sstream>

namespace dynadrag {
namespace F = torch::nn::functional;

// ---------------------------------------------------------------------------------------------
// Config

void LdmConfig::validate() const {
    require(latent_channels >= 1, "ldm: latent_channels must be positive");
    require(scaling_factor > 0, "ldm: scaling_factor must be positive");
    require(vae_channels.size() >= 2, "ldm: vae_channels needs at least two levels");
    require(!channel_mult.empty() && channel_mult.size() == attention.size(),
            "ldm: channel_mult and attention must have the same length");
    require(res_blocks >= 1 && heads >= 1 && groups >= 1, "ldm: res_blocks, heads and groups must be positive");
    for (int64_t c : vae_channels) require(c % groups == 0, c10::str("ldm: vae channel count ", c, " not divisible by groups ", groups));
    for (int64_t m : channel_mult) {
        require(m >= 1, "ldm: channel_mult entries must be positive");
        require((unet_channels * m) % groups == 0, "ldm: unet channels not divisible by groups");
        require((unet_channels * m) % heads == 0, "ldm: unet channels not divisible by heads");
    }
    require(unet_channels % 2 == 0, "ldm: unet_channels must be even");
    require(context_dim >= 1 && context_tokens >= 1, "ldm: context_dim and context_tokens must be positive");
    require(train_timesteps >= 1 && beta_start > 0 && beta_end > beta_start, "ldm: invalid noise schedule");
}

LdmConfig LdmConfig::mini() { return LdmConfig{}; }

LdmConfig LdmConfig::sd15() {
    LdmConfig c;
    c.vae_channels = {128, 256, 512, 512};
    c.unet_channels = 320;
    c.channel_mult = {1, 2, 4, 4};
    c.attention = {true, true, true, false};
    c.res_blocks = 2;
    c.heads = 8;
    c.context_dim = 768;
    c.context_tokens = 77;
    c.groups = 32;
    return c;
}

namespace {

template <typename T>
std::string join(const std::vector<T>& v) {
    std::ostringstream os;
    for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

std::vector<int64_t> split_ints(const std::string& s) {
    std::vector<int64_t> out;
    std::istringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(std::stoll(item));
    return out;
}

}  // namespace

std::string format_ldm_config(const LdmConfig& c) {
    std::vector<int> attn(c.attention.begin(), c.attention.end());
    std::ostringstream os;
    os.precision(17);
    os << "latent_channels = " << c.latent_channels << "\n"
       << "scaling_factor = " << c.scaling_factor << "\n"
       << "vae_channels = \"" << join(c.vae_channels) << "\"\n"
       << "unet_channels = " << c.unet_channels << "\n"
       << "channel_mult = \"" << join(c.channel_mult) << "\"\n"
       << "attention = \"" << join(attn) << "\"\n"
       << "res_blocks = " << c.res_blocks << "\n"
       << "heads = " << c.heads << "\n"
       << "context_dim = " << c.context_dim << "\n"
       << "context_tokens = " << c.context_tokens << "\n"
       << "groups = " << c.groups << "\n"
       << "train_timesteps = " << c.train_timesteps << "\n"
       << "beta_start = " << c.beta_start << "\n"
       << "beta_end = " << c.beta_end << "\n";
    return os.str();
}

LdmConfig parse_ldm_config(const std::string& text) {
    LdmConfig c;
    for (const auto& [key, value] : parse_key_values(text)) {
        try {
            if (key == "latent_channels") c.latent_channels = std::stoll(value);
            else if (key == "scaling_factor") c.scaling_factor = std::stod(value);
            else if (key == "vae_channels") c.vae_channels = split_ints(value);
            else if (key == "unet_channels") c.unet_channels = std::stoll(value);
            else if (key == "channel_mult") c.channel_mult = split_ints(value);
            else if (key == "attention") {
                c.attention.clear();
                for (int64_t v : split_ints(value)) c.attention.push_back(v != 0);
            } else if (key == "res_blocks") c.res_blocks = std::stoll(value);
            else if (key == "heads") c.heads = std::stoll(value);
            else if (key == "context_dim") c.context_dim = std::stoll(value);
            else if (key == "context_tokens") c.context_tokens = std::stoll(value);
            else if (key == "groups") c.groups = std::stoll(value);
            else if (key == "train_timesteps") c.train_timesteps = std::stoi(value);
            else if (key == "beta_start") c.beta_start = std::stod(value);
            else if (key == "beta_end") c.beta_end = std::stod(value);
            else fail(ErrorKind::InvalidArgument, "ldm config: unknown key '" + key + "'");
        } catch (const std::logic_error&) {
            fail(ErrorKind::InvalidArgument, "ldm config: bad value for '" + key + "': " + value);
        }
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------------------------
// Modules

LoraLinearImpl::LoraLinearImpl(int64_t in, int64_t out, bool bias)
    : base_(register_module("base", torch::nn::Linear(torch::nn::LinearOptions(in, out).bias(bias)))) {}

torch::Tensor LoraLinearImpl::forward(const torch::Tensor& x) {
    auto y = base_->forward(x);
    if (down_.defined()) y = y + torch::matmul(torch::matmul(x, down_.t()), up_.t());
    return y;
}

void LoraLinearImpl::reset_lora(int rank) {
    const int64_t in = base_->weight.size(1);
    const int64_t out = base_->weight.size(0);
    down_ = (torch::randn({rank, in}) / static_cast<double>(rank)).requires_grad_(true);
    up_ = torch::zeros({out, rank}).requires_grad_(true);
}

void LoraLinearImpl::set_lora(torch::Tensor down, torch::Tensor up) {
    require(down.dim() == 2 && up.dim() == 2 && down.size(1) == base_->weight.size(1) && up.size(0) == base_->weight.size(0) &&
                down.size(0) == up.size(1),
            "adapter tensor shapes do not match the layer");
    down_ = std::move(down);
    up_ = std::move(up);
}

void LoraLinearImpl::clear_lora() {
    down_ = torch::Tensor();
    up_ = torch::Tensor();
}

AttentionImpl::AttentionImpl(int64_t query_dim, int64_t context_dim, int64_t heads, bool self_attention)
    : heads_(heads), self_(self_attention) {
    const int64_t kv_dim = self_attention ? query_dim : context_dim;
    to_q_ = register_module("to_q", LoraLinear(query_dim, query_dim, false));
    to_k_ = register_module("to_k", LoraLinear(kv_dim, query_dim, false));
    to_v_ = register_module("to_v", LoraLinear(kv_dim, query_dim, false));
    to_out_ = register_module("to_out", LoraLinear(query_dim, query_dim, true));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context, bool share_kv) {
    torch::Tensor src = self_ ? x : context;
    if (self_ && share_kv && x.size(0) == 2) src = x.slice(0, 1, 2).expand_as(x);
    const int64_t b = x.size(0);
    const int64_t n = x.size(1);
    const int64_t c = x.size(2);
    const int64_t d = c / heads_;
    auto q = to_q_->forward(x).view({b, n, heads_, d}).transpose(1, 2);
    auto k = to_k_->forward(src).view({b, src.size(1), heads_, d}).transpose(1, 2);
    auto v = to_v_->forward(src).view({b, src.size(1), heads_, d}).transpose(1, 2);
    auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(d)), -1);
    auto out = torch::matmul(attn, v).transpose(1, 2).reshape({b, n, c});
    return to_out_->forward(out);
}

TransformerBlockImpl::TransformerBlockImpl(int64_t dim, int64_t context_dim, int64_t heads) {
    norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    norm3_ = register_module("norm3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn1_ = register_module("attn1", Attention(dim, dim, heads, true));
    attn2_ = register_module("attn2", Attention(dim, context_dim, heads, false));
    ff_in_ = register_module("ff_in", torch::nn::Linear(dim, dim * 8));
    ff_out_ = register_module("ff_out", torch::nn::Linear(dim * 4, dim));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& context, bool share_kv) {
    auto h = x + attn1_->forward(norm1_->forward(x), {}, share_kv);
    h = h + attn2_->forward(norm2_->forward(h), context, false);
    auto proj = ff_in_->forward(norm3_->forward(h)).chunk(2, -1);
    return h + ff_out_->forward(proj[0] * F::gelu(proj[1]));
}

SpatialTransformerImpl::SpatialTransformerImpl(int64_t channels, int64_t context_dim, int64_t heads, int64_t groups) {
    norm_ = register_module("norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, channels).eps(1e-6)));
    proj_in_ = register_module("proj_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));
    block_ = register_module("block", TransformerBlock(channels, context_dim, heads));
    proj_out_ = register_module("proj_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));
}

torch::Tensor SpatialTransformerImpl::forward(const torch::Tensor& x, const torch::Tensor& context, bool share_kv) {
    const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    auto t = proj_in_->forward(norm_->forward(x)).flatten(2).transpose(1, 2);
    t = block_->forward(t, context, share_kv);
    t = t.transpose(1, 2).reshape({b, c, h, w});
    return x + proj_out_->forward(t);
}

ResBlockImpl::ResBlockImpl(int64_t c_in, int64_t c_out, int64_t temb_dim, int64_t groups) {
    norm1_ = register_module("norm1", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, c_in).eps(1e-6)));
    conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(c_in, c_out, 3).padding(1)));
    norm2_ = register_module("norm2", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, c_out).eps(1e-6)));
    conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(c_out, c_out, 3).padding(1)));
    if (temb_dim > 0) temb_proj_ = register_module("temb_proj", torch::nn::Linear(temb_dim, c_out));
    if (c_in != c_out) skip_ = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(c_in, c_out, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
    auto h = conv1_->forward(F::silu(norm1_->forward(x)));
    if (!temb_proj_.is_empty() && temb.defined()) h = h + temb_proj_->forward(F::silu(temb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2_->forward(F::silu(norm2_->forward(h)));
    return (skip_.is_empty() ? x : skip_->forward(x)) + h;
}

AutoencoderImpl::AutoencoderImpl(const LdmConfig& cfg) : groups_(cfg.groups) {
    const auto& ch = cfg.vae_channels;
    const size_t levels = ch.size();
    enc_in_ = register_module("enc_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, ch[0], 3).padding(1)));
    enc_blocks_ = register_module("enc_blocks", torch::nn::ModuleList());
    int64_t c = ch[0];
    for (size_t i = 0; i < levels; ++i) {
        enc_blocks_->push_back(ResBlock(c, ch[i], 0, cfg.groups));
        enc_is_down_.push_back(false);
        c = ch[i];
        if (i + 1 < levels) {
            enc_blocks_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 3).stride(2).padding(1)));
            enc_is_down_.push_back(true);
        }
    }
    enc_mid_ = register_module("enc_mid", ResBlock(c, c, 0, cfg.groups));
    enc_norm_ = register_module("enc_norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(cfg.groups, c).eps(1e-6)));
    enc_out_ = register_module("enc_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, 2 * cfg.latent_channels, 3).padding(1)));

    dec_in_ = register_module("dec_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.latent_channels, c, 3).padding(1)));
    dec_mid_ = register_module("dec_mid", ResBlock(c, c, 0, cfg.groups));
    dec_blocks_ = register_module("dec_blocks", torch::nn::ModuleList());
    for (size_t j = levels; j-- > 0;) {
        dec_blocks_->push_back(ResBlock(c, ch[j], 0, cfg.groups));
        dec_is_up_.push_back(false);
        c = ch[j];
        if (j > 0) {
            dec_blocks_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 3).padding(1)));
            dec_is_up_.push_back(true);
        }
    }
    dec_norm_ = register_module("dec_norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(cfg.groups, c).eps(1e-6)));
    dec_out_ = register_module("dec_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, 3, 3).padding(1)));
}

torch::Tensor AutoencoderImpl::encode(const torch::Tensor& x) {
    auto h = enc_in_->forward(x);
    for (size_t i = 0; i < enc_blocks_->size(); ++i) {
        if (enc_is_down_[i]) h = enc_blocks_[i]->as<torch::nn::Conv2d>()->forward(h);
        else h = enc_blocks_[i]->as<ResBlock>()->forward(h);
    }
    h = enc_mid_->forward(h);
    h = enc_out_->forward(F::silu(enc_norm_->forward(h)));
    return h.chunk(2, 1)[0];
}

torch::Tensor AutoencoderImpl::decode(const torch::Tensor& z) {
    auto h = dec_mid_->forward(dec_in_->forward(z));
    for (size_t i = 0; i < dec_blocks_->size(); ++i) {
        if (dec_is_up_[i]) {
            h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
            h = dec_blocks_[i]->as<torch::nn::Conv2d>()->forward(h);
        } else {
            h = dec_blocks_[i]->as<ResBlock>()->forward(h);
        }
    }
    return dec_out_->forward(F::silu(dec_norm_->forward(h)));
}

UnetImpl::UnetImpl(const LdmConfig& cfg) : cfg_(cfg) {
    const int64_t base = cfg.unet_channels;
    const int64_t temb = base * 4;
    time1_ = register_module("time1", torch::nn::Linear(base, temb));
    time2_ = register_module("time2", torch::nn::Linear(temb, temb));
    conv_in_ = register_module("conv_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.latent_channels, base, 3).padding(1)));

    std::vector<int64_t> skip_channels = {base};
    int64_t c = base;
    const size_t levels = cfg.channel_mult.size();
    for (size_t i = 0; i < levels; ++i) {
        const int64_t out = base * cfg.channel_mult[i];
        for (int64_t b = 0; b < cfg.res_blocks; ++b) {
            Stage s;
            const std::string name = c10::str("down", i, "_", b);
            s.res = register_module(name + "_res", ResBlock(c, out, temb, cfg.groups));
            if (cfg.attention[i]) s.attn = register_module(name + "_attn", SpatialTransformer(out, cfg.context_dim, cfg.heads, cfg.groups));
            c = out;
            down_.push_back(s);
            skip_channels.push_back(c);
        }
        if (i + 1 < levels) {
            Stage s;
            s.resample = register_module(c10::str("down", i, "_sample"),
                                         torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 3).stride(2).padding(1)));
            down_.push_back(s);
            skip_channels.push_back(c);
        }
    }

    mid1_ = register_module("mid1", ResBlock(c, c, temb, cfg.groups));
    mid_attn_ = register_module("mid_attn", SpatialTransformer(c, cfg.context_dim, cfg.heads, cfg.groups));
    mid2_ = register_module("mid2", ResBlock(c, c, temb, cfg.groups));

    for (size_t i = levels; i-- > 0;) {
        const int64_t out = base * cfg.channel_mult[i];
        for (int64_t b = 0; b <= cfg.res_blocks; ++b) {
            Stage s;
            const std::string name = c10::str("up", i, "_", b);
            const int64_t skip = skip_channels.back();
            skip_channels.pop_back();
            s.res = register_module(name + "_res", ResBlock(c + skip, out, temb, cfg.groups));
            if (cfg.attention[i]) s.attn = register_module(name + "_attn", SpatialTransformer(out, cfg.context_dim, cfg.heads, cfg.groups));
            c = out;
            if (b == cfg.res_blocks && i > 0)
                s.resample = register_module(c10::str("up", i, "_sample"), torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 3).padding(1)));
            up_.push_back(s);
        }
    }
    norm_out_ = register_module("norm_out", torch::nn::GroupNorm(torch::nn::GroupNormOptions(cfg.groups, c).eps(1e-6)));
    conv_out_ = register_module("conv_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, cfg.latent_channels, 3).padding(1)));
}

UnetOutput UnetImpl::forward(const torch::Tensor& z, const torch::Tensor& timesteps, const torch::Tensor& context, bool share_kv) {
    const int64_t half = cfg_.unet_channels / 2;
    auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / static_cast<double>(half));
    auto args = timesteps.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
    auto temb = time2_->forward(F::silu(time1_->forward(torch::cat({torch::cos(args), torch::sin(args)}, 1))));

    auto h = conv_in_->forward(z);
    std::vector<torch::Tensor> skips = {h};
    for (auto& s : down_) {
        if (!s.res.is_empty()) {
            h = s.res->forward(h, temb);
            if (!s.attn.is_empty()) h = s.attn->forward(h, context, share_kv);
        } else {
            h = s.resample->forward(h);
        }
        skips.push_back(h);
    }
    h = mid2_->forward(mid_attn_->forward(mid1_->forward(h, temb), context, share_kv), temb);
    for (auto& s : up_) {
        h = torch::cat({h, skips.back()}, 1);
        skips.pop_back();
        h = s.res->forward(h, temb);
        if (!s.attn.is_empty()) h = s.attn->forward(h, context, share_kv);
        if (!s.resample.is_empty()) {
            h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
            h = s.resample->forward(h);
        }
    }
    auto eps = conv_out_->forward(F::silu(norm_out_->forward(h)));
    return {eps, h};
}

LdmModel::LdmModel(const LdmConfig& cfg, int64_t seed) {
    torch::manual_seed(static_cast<uint64_t>(seed));
    vae = register_module("vae", Autoencoder(cfg));
    unet = register_module("unet", Unet(cfg));
    null_context = register_buffer("null_context", torch::randn({1, cfg.context_tokens, cfg.context_dim}));
    for (auto& p : parameters()) p.requires_grad_(false);
    eval();
}

std::vector<std::pair<std::string, LoraLinear>> LdmModel::lora_layers() {
    std::vector<std::pair<std::string, LoraLinear>> out;
    for (const auto& item : named_modules("", false)) {
        if (auto p = std::dynamic_pointer_cast<LoraLinearImpl>(item.value())) out.emplace_back(item.key(), LoraLinear(p));
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Backend

LdmBackend::LdmBackend(const LdmConfig& cfg, int64_t resolution, uint64_t seed, std::string model_id)
    : cfg_(cfg),
      resolution_(resolution),
      model_id_(std::move(model_id)),
      schedule_(50, cfg.train_timesteps, cfg.beta_start, cfg.beta_end) {
    cfg_.validate();
    require(resolution % (cfg_.downscale() * (int64_t{1} << (cfg_.channel_mult.size() - 1))) == 0,
            c10::str("ldm: resolution ", resolution, " incompatible with the UNet depth"));
    model_ = std::make_unique<LdmModel>(cfg_, static_cast<int64_t>(seed));
}

LdmBackend::~LdmBackend() = default;

namespace {
constexpr const char* kCheckpointFormat = "dynadrag-ldm";
constexpr int64_t kCheckpointVersion = 1;
}  // namespace

void LdmBackend::save_checkpoint(const std::filesystem::path& path) const {
    torch::serialize::OutputArchive archive;
    archive.write("format", c10::IValue(std::string(kCheckpointFormat)));
    archive.write("version", c10::IValue(kCheckpointVersion));
    archive.write("config", c10::IValue(format_ldm_config(cfg_)));
    torch::serialize::OutputArchive weights;
    model_->save(weights);
    archive.write("weights", weights);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    archive.save_to(path.string());
}

std::unique_ptr<LdmBackend> LdmBackend::from_checkpoint(const std::filesystem::path& path, int64_t resolution) {
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error&) {
        fail(ErrorKind::Io, "cannot read ldm checkpoint " + path.string());
    }
    c10::IValue format, version, config;
    archive.read("format", format);
    archive.read("version", version);
    require(format.isString() && format.toStringRef() == kCheckpointFormat, "not an ldm checkpoint: " + path.string());
    require(version.toInt() == kCheckpointVersion, c10::str("unsupported ldm checkpoint version ", version.toInt()));
    archive.read("config", config);
    auto backend = std::make_unique<LdmBackend>(parse_ldm_config(config.toStringRef()), resolution, 0, path.string());
    torch::serialize::InputArchive weights;
    archive.read("weights", weights);
    backend->model_->load(weights);
    for (auto& p : backend->model_->parameters()) p.requires_grad_(false);
    backend->model_->eval();
    return backend;
}

void LdmBackend::set_ddim_steps(int steps) {
    if (steps != schedule_.steps()) schedule_ = DdimSchedule(steps, cfg_.train_timesteps, cfg_.beta_start, cfg_.beta_end);
}

namespace {

void check_finite(const torch::Tensor& t, const std::string& what) {
    if (!torch::isfinite(t).all().item<bool>()) fail(ErrorKind::Numerical, what);
}

}  // namespace

torch::Tensor LdmBackend::encode(const RgbImage& image) {
    require(image.height() == resolution_ && image.width() == resolution_,
            c10::str("ldm backend expects ", resolution_, "x", resolution_, " images, got ", image.width(), "x", image.height()));
    torch::NoGradGuard no_grad;
    auto x = image.data.unsqueeze(0).to(torch::kFloat32) * 2.0 - 1.0;
    return model_->vae->encode(x) * cfg_.scaling_factor;
}

RgbImage LdmBackend::decode(const torch::Tensor& z0) {
    torch::NoGradGuard no_grad;
    auto x = model_->vae->decode(z0.detach() / cfg_.scaling_factor);
    return {((x.squeeze(0) + 1.0) * 0.5).clamp(0.0, 1.0).contiguous()};
}

LoraAdapter LdmBackend::finetune_identity_lora(const RgbImage& image, const LoraOptions& options) {
    require(options.rank >= 1, "LoRA rank must be positive");
    require(options.steps >= 0, "LoRA steps must be non-negative");
    const torch::Tensor z0 = encode(image);

    auto layers = model_->lora_layers();
    torch::manual_seed(options.seed);
    std::vector<torch::Tensor> params;
    for (auto& [name, layer] : layers) {
        layer->reset_lora(options.rank);
        params.push_back(layer->down());
        params.push_back(layer->up());
    }

    auto gen = at::make_generator<at::CPUGeneratorImpl>(options.seed + 1);
    constexpr int64_t kProbe = 8;
    const auto probe_t = torch::randint(0, cfg_.train_timesteps, {kProbe}, gen, torch::kLong);
    const auto probe_noise = torch::randn({kProbe, z0.size(1), z0.size(2), z0.size(3)}, gen, torch::kFloat32);
    auto probe_loss = [&]() {
        torch::NoGradGuard no_grad;
        double total = 0.0;
        for (int64_t i = 0; i < kProbe; ++i) {
            const int64_t t = probe_t[i].item<int64_t>();
            auto noisy = schedule_.add_noise(z0, probe_noise[i].unsqueeze(0), t);
            auto out = model_->unet->forward(noisy, torch::full({1}, t, torch::kLong), model_->null_context, false);
            total += torch::mse_loss(out.eps, probe_noise[i].unsqueeze(0)).item<double>();
        }
        return total / static_cast<double>(kProbe);
    };

    LoraAdapter adapter;
    adapter.base_model_id = model_id_;
    adapter.rank = options.rank;
    adapter.loss_curve.push_back(probe_loss());

    torch::optim::AdamW opt(params, torch::optim::AdamWOptions(options.learning_rate).weight_decay(options.weight_decay));
    constexpr int kBatch = 4;
    for (int step = 0; step < options.steps; ++step) {
        const auto t = torch::randint(0, cfg_.train_timesteps, {kBatch}, gen, torch::kLong);
        const auto noise = torch::randn({kBatch, z0.size(1), z0.size(2), z0.size(3)}, gen, torch::kFloat32);
        std::vector<torch::Tensor> noisy;
        for (int64_t i = 0; i < kBatch; ++i) noisy.push_back(schedule_.add_noise(z0, noise[i].unsqueeze(0), t[i].item<int64_t>()));
        auto out = model_->unet->forward(torch::cat(noisy, 0), t, model_->null_context.expand({kBatch, -1, -1}), false);
        auto loss = torch::mse_loss(out.eps, noise);
        if (!std::isfinite(loss.item<double>()))
            fail(ErrorKind::Numerical, c10::str("LoRA fine-tuning: non-finite loss at step ", step));
        opt.zero_grad();
        loss.backward();
        opt.step();
        if ((step + 1) % 20 == 0 || step + 1 == options.steps) adapter.loss_curve.push_back(probe_loss());
    }
    log::info("LoRA fine-tuning: probe loss ", adapter.loss_curve.front(), " -> ", adapter.loss_curve.back(), " after ",
              options.steps, " steps");

    uint64_t h = 1469598103934665603ULL;
    for (auto& [name, layer] : layers) {
        layer->down() = layer->down().detach();
        layer->up() = layer->up().detach();
        adapter.tensors.emplace(name + ".down", layer->down().clone());
        adapter.tensors.emplace(name + ".up", layer->up().clone());
        h = (h ^ static_cast<uint64_t>(layer->up().abs().sum().item<double>() * 1e6)) * 1099511628211ULL;
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "lora-%016llx", static_cast<unsigned long long>(h));
    adapter.id = buf;
    adapter_ = std::make_shared<const LoraAdapter>(adapter);
    return adapter;
}

void LdmBackend::set_adapter(std::shared_ptr<const LoraAdapter> adapter) {
    auto layers = model_->lora_layers();
    if (!adapter || adapter->is_identity()) {
        for (auto& [name, layer] : layers) layer->clear_lora();
        adapter_ = adapter;
        return;
    }
    require(adapter->base_model_id == model_id_,
            "adapter was trained for base model '" + adapter->base_model_id + "', backend is '" + model_id_ + "'", ErrorKind::Conflict);
    for (auto& [name, layer] : layers) {
        auto d = adapter->tensors.find(name + ".down");
        auto u = adapter->tensors.find(name + ".up");
        require(d != adapter->tensors.end() && u != adapter->tensors.end(), "adapter is missing tensors for " + name);
        layer->set_lora(d->second, u->second);
    }
    adapter_ = std::move(adapter);
}

torch::Tensor LdmBackend::predict_noise(const torch::Tensor& z, int t) {
    const int64_t ts = t == 0 ? 0 : schedule_.timestep(t);
    return model_->unet->forward(z, torch::full({z.size(0)}, ts, torch::kLong), model_->null_context.expand({z.size(0), -1, -1}), false).eps;
}

std::vector<LatentState> LdmBackend::ddim_invert(const torch::Tensor& z0, int steps) {
    require(steps >= 1, "ddim_invert: steps must be positive");
    set_ddim_steps(steps);
    torch::NoGradGuard no_grad;
    check_finite(z0, "ddim_invert: non-finite latent at step 0");
    std::vector<LatentState> out;
    out.reserve(static_cast<size_t>(steps));
    torch::Tensor z = z0;
    for (int j = 1; j <= steps; ++j) {
        const int64_t ts = schedule_.timestep(j);
        auto eps = model_->unet->forward(z, torch::full({1}, ts, torch::kLong), model_->null_context, false).eps;
        z = schedule_.invert_step(z, eps, j);
        check_finite(z, c10::str("ddim_invert: non-finite latent at step ", j));
        out.push_back({z, j, LatentOrigin::Inverted});
    }
    return out;
}

LatentState LdmBackend::denoise_step(const LatentState& state, const LatentState* kv_source) {
    require(state.t >= 1, c10::str("denoise_step needs t >= 1, got ", state.t));
    torch::Tensor eps;
    if (kv_source == nullptr) {
        eps = predict_noise(state.z, state.t);
    } else {
        require(kv_source->t == state.t, c10::str("KV source at index ", kv_source->t, " but state at ", state.t));
        const int64_t ts = schedule_.timestep(state.t);
        auto batch = torch::cat({state.z, kv_source->z.detach()}, 0);
        auto out = model_->unet->forward(batch, torch::full({2}, ts, torch::kLong), model_->null_context.expand({2, -1, -1}), true);
        eps = out.eps.slice(0, 0, 1);
    }
    auto z_prev = schedule_.step(state.z, eps, state.t);
    check_finite(z_prev, c10::str("denoise_step: non-finite latent at index ", state.t));
    return {z_prev, state.t - 1, LatentOrigin::Denoised};
}

FeatureMap LdmBackend::extract_features(const LatentState& state) {
    const int64_t ts = state.t == 0 ? 0 : schedule_.timestep(state.t);
    auto out = model_->unet->forward(state.z, torch::full({1}, ts, torch::kLong), model_->null_context, false);
    auto f = out.features;
    if (f.size(2) != state.z.size(2) || f.size(3) != state.z.size(3))
        f = F::interpolate(f, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{state.z.size(2), state.z.size(3)})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
    return {f.squeeze(0)};
}

DenoiseWithFeatures LdmBackend::step_with_features(const LatentState& state) {
    require(state.t >= 1, c10::str("step_with_features needs t >= 1, got ", state.t));
    const int64_t ts = schedule_.timestep(state.t);
    auto out = model_->unet->forward(state.z, torch::full({1}, ts, torch::kLong), model_->null_context, false);
    return {schedule_.step(state.z, out.eps, state.t), {out.features.squeeze(0)}};
}

}  // namespace dynadrag
