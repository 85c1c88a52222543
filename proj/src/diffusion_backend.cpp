#include "dynadrag/diffusion_backend.hpp"

#include "dynadrag/error.hpp"
#include "dynadrag/ldm_backend.hpp"
#include "dynadrag/log.hpp"

#include <sstream>

namespace dynadrag {

std::string to_string(LatentOrigin origin) {
    switch (origin) {
        case LatentOrigin::Encoded: return "encoded";
        case LatentOrigin::Inverted: return "inverted";
        case LatentOrigin::Optimized: return "optimized";
        case LatentOrigin::Denoised: return "denoised";
    }
    return "unknown";
}

torch::Tensor sample_feature(const FeatureMap& fm, Point p_latent) {
    if (!in_bounds(p_latent, fm.width(), fm.height())) {
        log::warn("feature lookup at (", p_latent.x, ", ", p_latent.y, ") outside the ", fm.width(), "x", fm.height(),
                  " feature map; clamping");
        p_latent = clamp_to_bounds(p_latent, fm.width(), fm.height());
    }
    return bilinear_sample(fm.data, p_latent);
}

// ---------------------------------------------------------------------------------------------
// Adapter files

namespace {
constexpr const char* kAdapterFormat = "dynadrag-lora-adapter";
}

void LoraAdapter::save(const std::filesystem::path& path) const {
    torch::serialize::OutputArchive archive;
    archive.write("format", c10::IValue(std::string(kAdapterFormat)));
    archive.write("version", c10::IValue(static_cast<int64_t>(kFormatVersion)));
    archive.write("id", c10::IValue(id));
    archive.write("base_model_id", c10::IValue(base_model_id));
    archive.write("rank", c10::IValue(static_cast<int64_t>(rank)));
    archive.write("loss_curve", torch::tensor(loss_curve, torch::kFloat64));
    // Parameter names contain dots, which the archive treats as nesting; store them as a list.
    std::string names;
    torch::serialize::OutputArchive tensors_archive;
    int64_t i = 0;
    for (const auto& [name, t] : tensors) {
        names += name + "\n";
        tensors_archive.write(c10::str("t", i++), t.detach().contiguous());
    }
    archive.write("names", c10::IValue(names));
    archive.write("tensors", tensors_archive);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    archive.save_to(path.string());
}

LoraAdapter LoraAdapter::load(const std::filesystem::path& path, std::optional<std::pair<std::string, int>> expect) {
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error&) {
        fail(ErrorKind::Io, "cannot read adapter file " + path.string());
    }
    c10::IValue format, version, id, base, rank, names;
    archive.read("format", format);
    archive.read("version", version);
    require(format.isString() && format.toStringRef() == kAdapterFormat, "not an adapter file: " + path.string());
    require(version.toInt() == kFormatVersion, c10::str("unsupported adapter version ", version.toInt()));
    archive.read("id", id);
    archive.read("base_model_id", base);
    archive.read("rank", rank);
    archive.read("names", names);

    LoraAdapter a;
    a.id = id.toStringRef();
    a.base_model_id = base.toStringRef();
    a.rank = static_cast<int>(rank.toInt());
    if (expect) {
        require(a.base_model_id == expect->first && a.rank == expect->second,
                c10::str("adapter ", path.string(), " was trained for (", a.base_model_id, ", rank ", a.rank, "), expected (",
                         expect->first, ", rank ", expect->second, ")"),
                ErrorKind::Conflict);
    }
    torch::Tensor curve;
    archive.read("loss_curve", curve);
    for (int64_t i = 0; i < curve.numel(); ++i) a.loss_curve.push_back(curve[i].item<double>());

    torch::serialize::InputArchive tensors_archive;
    archive.read("tensors", tensors_archive);
    std::istringstream in(names.toStringRef());
    std::string name;
    int64_t i = 0;
    while (std::getline(in, name)) {
        if (name.empty()) continue;
        torch::Tensor t;
        tensors_archive.read(c10::str("t", i++), t);
        a.tensors.emplace(name, t);
    }
    return a;
}

// ---------------------------------------------------------------------------------------------

LatentState DiffusionBackend::denoise_to_clean(const LatentState& state, const LatentState* kv_source) {
    if (kv_source != nullptr)
        require(kv_source->t == state.t, c10::str("KV source at index ", kv_source->t, " but state at ", state.t));
    LatentState cur = state;
    std::optional<LatentState> kv;
    if (kv_source != nullptr) kv = *kv_source;
    while (cur.t > 0) {
        LatentState next = denoise_step(cur, kv ? &*kv : nullptr);
        if (kv) kv = denoise_step(*kv, nullptr);
        cur = std::move(next);
    }
    cur.origin = LatentOrigin::Denoised;
    return cur;
}

// ---------------------------------------------------------------------------------------------
// Toy backend

ToyBackend::ToyBackend(int64_t resolution, int64_t feature_channels, int downscale)
    : resolution_(resolution), feature_channels_(feature_channels), downscale_(downscale) {
    require(downscale >= 1 && resolution % downscale == 0,
            c10::str("toy backend: resolution ", resolution, " is not a multiple of the downscale ", downscale));
    require(feature_channels >= 1, "toy backend: feature_channels must be positive");
}

torch::Tensor ToyBackend::encode(const RgbImage& image) {
    require(image.height() == resolution_ && image.width() == resolution_,
            c10::str("toy backend expects ", resolution_, "x", resolution_, " images, got ", image.width(), "x", image.height()));
    auto rgb = torch::avg_pool2d(image.data.unsqueeze(0).to(torch::kFloat32), downscale_);
    auto luma = 0.299 * rgb.select(1, 0) + 0.587 * rgb.select(1, 1) + 0.114 * rgb.select(1, 2);
    return torch::cat({rgb, luma.unsqueeze(1)}, 1).contiguous();
}

RgbImage ToyBackend::decode(const torch::Tensor& z0) {
    require(z0.dim() == 4 && z0.size(1) == 4, "toy decode expects [1, 4, h, w]");
    torch::NoGradGuard no_grad;
    auto rgb = z0.detach().slice(1, 0, 3);
    auto up = torch::nn::functional::interpolate(
        rgb, torch::nn::functional::InterpolateFuncOptions()
                 .size(std::vector<int64_t>{z0.size(2) * downscale_, z0.size(3) * downscale_})
                 .mode(torch::kNearest));
    return {up.squeeze(0).clamp(0.0, 1.0).contiguous()};
}

LoraAdapter ToyBackend::finetune_identity_lora(const RgbImage&, const LoraOptions& options) {
    log::info("toy backend: identity fine-tuning is a no-op");
    LoraAdapter a;
    a.id = "toy-identity";
    a.base_model_id = model_id();
    a.rank = options.rank;
    return a;
}

std::vector<LatentState> ToyBackend::ddim_invert(const torch::Tensor& z0, int steps) {
    require(steps >= 1, "ddim_invert: steps must be positive");
    require(torch::isfinite(z0).all().item<bool>(), "ddim_invert: non-finite latent at step 0", ErrorKind::Numerical);
    std::vector<LatentState> out;
    out.reserve(static_cast<size_t>(steps));
    for (int i = 1; i <= steps; ++i) out.push_back({z0.clone(), i, LatentOrigin::Inverted});
    return out;
}

LatentState ToyBackend::denoise_step(const LatentState& state, const LatentState* kv_source) {
    require(state.t >= 1, c10::str("denoise_step needs t >= 1, got ", state.t));
    if (kv_source != nullptr)
        require(kv_source->t == state.t, c10::str("KV source at index ", kv_source->t, " but state at ", state.t));
    return {state.z, state.t - 1, LatentOrigin::Denoised};
}

FeatureMap ToyBackend::extract_features(const LatentState& state) {
    auto idx = torch::arange(feature_channels_, torch::kLong).remainder(4);
    return {state.z.squeeze(0).index_select(0, idx)};
}

DenoiseWithFeatures ToyBackend::step_with_features(const LatentState& state) {
    return {denoise_step(state, nullptr).z, extract_features(state)};
}

// ---------------------------------------------------------------------------------------------

std::shared_ptr<DiffusionBackend> make_backend(const BackendSpec& spec) {
    if (spec.kind == "toy") return std::make_shared<ToyBackend>(spec.resolution);
    if (spec.kind == "ldm") {
        if (spec.model_id.empty() || spec.model_id == "mini")
            return std::make_shared<LdmBackend>(LdmConfig::mini(), spec.resolution, spec.seed, "mini");
        require(std::filesystem::exists(spec.model_id), "ldm weights not found: " + spec.model_id, ErrorKind::NotFound);
        return LdmBackend::from_checkpoint(spec.model_id, spec.resolution);
    }
    fail(ErrorKind::InvalidArgument, "unknown backend kind '" + spec.kind + "' (expected toy or ldm)");
}

}  // namespace dynadrag
