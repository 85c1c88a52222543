#pragma once

#include "dynadrag/config.hpp"
#include "dynadrag/diffusion_backend.hpp"
#include "dynadrag/geometry.hpp"
#include "dynadrag/raster.hpp"

#include <torch/torch.h>

#include <vector>

namespace dynadrag {

/// Operands of the motion-supervision objective for one predict-and-move iteration.
/// Point coordinates are in image pixels; the loss maps them to latent space with `downscale`.
struct SupervisionContext {
    LatentState z_t_current;              // z_t^k, starting point of the descent
    LatentState z_t_original;             // z_t^0, frozen for the whole edit
    torch::Tensor z_tm1_reference;        // z_{t-1}^0, frozen
    MaskImage mask_latent;                // editable region at latent resolution
    std::vector<Point> handles;           // h^k of the valid pairs
    std::vector<Point> next_positions;    // h^{k+1} predicted for the same pairs
    EditConfig config;
    int downscale = 8;

    void validate() const;
};

struct MsLoss {
    torch::Tensor total;
    torch::Tensor term1;  // feature-patch L1, summed
    torch::Tensor term2;  // masked latent L1 against z_{t-1}^0, summed (before lambda)
};

struct MsStepRecord {
    double loss = 0.0;
    double term1 = 0.0;
    double term2 = 0.0;
};

/// term1 + lambda * term2 evaluated at `z_live` (the current optimization variable, [1, C, h, w]).
/// The handle patches are detached; z_{t-1} comes from one plain denoise step of `z_live`.
MsLoss ms_loss(DiffusionBackend& backend, const SupervisionContext& ctx, const torch::Tensor& z_live);
inline MsLoss ms_loss(DiffusionBackend& backend, const SupervisionContext& ctx) {
    return ms_loss(backend, ctx, ctx.z_t_current.z);
}

struct OptimizeResult {
    LatentState latent;                // origin = Optimized
    std::vector<MsStepRecord> steps;   // loss before each update
};

/// ms_steps_per_iteration first-order updates with step size ms_learning_rate.
/// The optimizer is plain gradient descent or Adam (see EditConfig::ms_optimizer; `auto` picks Adam on
/// the ldm backend and plain descent on the toy backend).
OptimizeResult optimize_latent(DiffusionBackend& backend, const SupervisionContext& ctx);

MsOptimizer resolve_ms_optimizer(MsOptimizer requested, const DiffusionBackend& backend);

}  // namespace dynadrag
