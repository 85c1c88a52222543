#include "dynadrag/motion_supervisor.hpp"

#include "dynadrag/error.hpp"
#include "dynadrag/log.hpp"

#include <cmath>

namespace dynadrag {

void SupervisionContext::validate() const {
    require(z_t_current.z.defined() && z_t_original.z.defined() && z_tm1_reference.defined(),
            "supervision context: latents are not set");
    require(z_t_current.z.sizes() == z_t_original.z.sizes() && z_tm1_reference.sizes() == z_t_current.z.sizes(),
            "supervision context: latent shapes differ");
    require(z_t_current.t >= 1, "supervision context: latent index must be >= 1");
    require(!handles.empty(), "supervision context: no valid pairs (the orchestrator must not call motion supervision)");
    require(next_positions.size() == handles.size(),
            c10::str("supervision context: ", handles.size(), " handles but ", next_positions.size(), " predicted positions"));
    require(mask_latent.data.defined() && mask_latent.height() == z_t_current.z.size(2) && mask_latent.width() == z_t_current.z.size(3),
            "supervision context: mask is not at latent resolution");
    require(downscale >= 1, "supervision context: downscale must be positive");
}

MsLoss ms_loss(DiffusionBackend& backend, const SupervisionContext& ctx, const torch::Tensor& z_live) {
    ctx.validate();
    const LatentState live{z_live, ctx.z_t_current.t, LatentOrigin::Optimized};
    const DenoiseWithFeatures pass = backend.step_with_features(live);
    const int r = ctx.config.r1_patch_radius;

    torch::Tensor term1 = torch::zeros({}, z_live.options().requires_grad(false));
    for (size_t i = 0; i < ctx.handles.size(); ++i) {
        const Point from = pixel_to_latent(ctx.handles[i], ctx.downscale);
        const Point to = pixel_to_latent(ctx.next_positions[i], ctx.downscale);
        const auto anchor = sample_patch(pass.features.data, from, r).detach();
        const auto moved = sample_patch(pass.features.data, to, r);
        term1 = term1 + (moved - anchor).abs().sum();
    }

    const auto keep = (1.0 - ctx.mask_latent.data.to(z_live.dtype())).unsqueeze(0).unsqueeze(0);
    const torch::Tensor term2 = ((pass.z_prev - ctx.z_tm1_reference.detach()) * keep).abs().sum();
    return {term1 + ctx.config.lambda_mask * term2, term1, term2};
}

MsOptimizer resolve_ms_optimizer(MsOptimizer requested, const DiffusionBackend& backend) {
    if (requested != MsOptimizer::Auto) return requested;
    return backend.kind() == "ldm" ? MsOptimizer::Adam : MsOptimizer::Sgd;
}

OptimizeResult optimize_latent(DiffusionBackend& backend, const SupervisionContext& ctx) {
    ctx.validate();
    const int steps = ctx.config.ms_steps_per_iteration;
    const double lr = ctx.config.ms_learning_rate;
    torch::Tensor z = ctx.z_t_current.z.detach().clone().requires_grad_(true);

    std::unique_ptr<torch::optim::Optimizer> opt;
    if (resolve_ms_optimizer(ctx.config.ms_optimizer, backend) == MsOptimizer::Adam)
        opt = std::make_unique<torch::optim::Adam>(std::vector<torch::Tensor>{z}, torch::optim::AdamOptions(lr));
    else
        opt = std::make_unique<torch::optim::SGD>(std::vector<torch::Tensor>{z}, torch::optim::SGDOptions(lr));

    OptimizeResult result;
    for (int step = 0; step < steps; ++step) {
        opt->zero_grad();
        MsLoss loss = ms_loss(backend, ctx, z);
        const MsStepRecord rec{loss.total.item<double>(), loss.term1.item<double>(), loss.term2.item<double>()};
        result.steps.push_back(rec);
        if (!std::isfinite(rec.loss))
            fail(ErrorKind::Numerical, c10::str("motion supervision: non-finite loss at step ", step, " (term1 ", rec.term1,
                                                ", term2 ", rec.term2, ")"));
        if (!loss.total.requires_grad()) continue;  // nothing depends on z: zero gradient
        loss.total.backward();
        if (z.grad().defined() && !torch::isfinite(z.grad()).all().item<bool>())
            fail(ErrorKind::Numerical, c10::str("motion supervision: non-finite gradient at step ", step, " (loss ", rec.loss,
                                                ", max |z| ", z.detach().abs().max().item<double>(), ")"));
        opt->step();
    }
    if (!result.steps.empty())
        log::debug("motion supervision: loss ", result.steps.front().loss, " -> ", result.steps.back().loss);
    return {{z.detach(), ctx.z_t_current.t, LatentOrigin::Optimized}, result.steps};
}

}  // namespace dynadrag
