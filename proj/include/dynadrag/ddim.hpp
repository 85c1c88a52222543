#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace dynadrag {

/// Deterministic DDIM (eta = 0) over a subsampled timestep grid.
///
/// Latent states are addressed by an index j in [0, steps]: j = 0 is the clean latent, j >= 1 sits at
/// training timestep (j - 1) * (T / steps) + 1 ("leading" spacing with offset 1). Noise level uses the
/// scaled-linear beta schedule of latent diffusion models.
class DdimSchedule {
public:
    DdimSchedule(int inference_steps = 50, int train_steps = 1000, double beta_start = 0.00085,
                 double beta_end = 0.012);

    int steps() const { return steps_; }
    int train_steps() const { return train_steps_; }

    /// Training timestep at index j >= 1.
    int64_t timestep(int index) const;
    /// Cumulative alpha at index j (1.0 at j = 0).
    double alpha_bar(int index) const;
    /// Cumulative alpha at an arbitrary training timestep.
    double alpha_bar_at_timestep(int64_t t) const;

    /// z_{j-1} from z_j and the noise prediction made at index j.
    torch::Tensor step(const torch::Tensor& z, const torch::Tensor& eps, int index) const;
    /// z_j from z_{j-1} and the noise prediction made at index j.
    torch::Tensor invert_step(const torch::Tensor& z_prev, const torch::Tensor& eps, int index) const;

    /// Forward-process sample at a training timestep.
    torch::Tensor add_noise(const torch::Tensor& z0, const torch::Tensor& noise, int64_t t) const;

private:
    int steps_;
    int train_steps_;
    std::vector<double> alphas_cumprod_;
};

}  // namespace dynadrag
