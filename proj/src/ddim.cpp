#include "dynadrag/ddim.hpp"

#include "dynadrag/error.hpp"

#include <c10/util/StringUtil.h>

#include <cmath>

namespace dynadrag {

DdimSchedule::DdimSchedule(int inference_steps, int train_steps, double beta_start, double beta_end)
    : steps_(inference_steps), train_steps_(train_steps) {
    require(inference_steps >= 1 && train_steps >= inference_steps && train_steps % inference_steps == 0,
            c10::str("DDIM: ", train_steps, " training steps cannot be split into ", inference_steps, " inference steps"));
    require(beta_start > 0 && beta_end > beta_start && beta_end < 1, "DDIM: invalid beta range");
    alphas_cumprod_.resize(static_cast<size_t>(train_steps));
    const double a = std::sqrt(beta_start);
    const double b = std::sqrt(beta_end);
    double prod = 1.0;
    for (int i = 0; i < train_steps; ++i) {
        const double s = train_steps == 1 ? a : a + (b - a) * i / (train_steps - 1);
        prod *= 1.0 - s * s;
        alphas_cumprod_[static_cast<size_t>(i)] = prod;
    }
}

int64_t DdimSchedule::timestep(int index) const {
    require(index >= 1 && index <= steps_, c10::str("DDIM index ", index, " outside [1, ", steps_, "]"));
    return static_cast<int64_t>(index - 1) * (train_steps_ / steps_) + 1;
}

double DdimSchedule::alpha_bar(int index) const {
    if (index == 0) return 1.0;
    return alpha_bar_at_timestep(timestep(index));
}

double DdimSchedule::alpha_bar_at_timestep(int64_t t) const {
    require(t >= 0 && t < train_steps_, c10::str("training timestep ", t, " outside [0, ", train_steps_, ")"));
    return alphas_cumprod_[static_cast<size_t>(t)];
}

torch::Tensor DdimSchedule::step(const torch::Tensor& z, const torch::Tensor& eps, int index) const {
    const double a = alpha_bar(index);
    const double a_prev = alpha_bar(index - 1);
    const auto x0 = (z - std::sqrt(1.0 - a) * eps) / std::sqrt(a);
    return std::sqrt(a_prev) * x0 + std::sqrt(1.0 - a_prev) * eps;
}

torch::Tensor DdimSchedule::invert_step(const torch::Tensor& z_prev, const torch::Tensor& eps, int index) const {
    const double a = alpha_bar(index);
    const double a_prev = alpha_bar(index - 1);
    const auto x0 = (z_prev - std::sqrt(1.0 - a_prev) * eps) / std::sqrt(a_prev);
    return std::sqrt(a) * x0 + std::sqrt(1.0 - a) * eps;
}

torch::Tensor DdimSchedule::add_noise(const torch::Tensor& z0, const torch::Tensor& noise, int64_t t) const {
    const double a = alpha_bar_at_timestep(t);
    return std::sqrt(a) * z0 + std::sqrt(1.0 - a) * noise;
}

}  // namespace dynadrag
