#pragma once

#include "dynadrag/geometry.hpp"
#include "dynadrag/raster.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dynadrag {

inline constexpr int64_t kEncodedChannels = 6;
inline constexpr int64_t kFlowChannels = 2;

/// Motion-prediction input: RGB (0-2), delta map (3-4), heatmap (5). float32 [6, H, W].
struct EncodedInput {
    torch::Tensor data;

    int64_t height() const { return data.size(1); }
    int64_t width() const { return data.size(2); }
};

/// Builds the 6-channel input from the current image and the valid pairs.
/// Delta channels hold (handle - target) in raw pixels at each rounded handle; the heatmap is 1 on
/// the Chebyshev neighborhoods of radius `heatmap_radius`. Invalid pairs contribute nothing.
/// `expected_size` (H, W) enforces the session resolution.
EncodedInput encode_input(const RgbImage& image, std::span<const PointPair> pairs, int heatmap_radius,
                          std::optional<std::pair<int64_t, int64_t>> expected_size = std::nullopt);

// ---------------------------------------------------------------------------------------------
// Network: encoder / translator / decoder, spatial-only (no temporal reshaping).

struct PredictorConfig {
    int64_t in_channels = kEncodedChannels;
    int64_t out_channels = kFlowChannels;
    int64_t hid_s = 64;
    int64_t hid_t = 256;
    int64_t n_s = 4;
    int64_t n_t = 8;
    int64_t groups = 4;
    std::vector<int64_t> incep_ker = {3, 5, 7, 11};

    /// Product of the encoder strides; inputs must be divisible by it.
    int64_t total_stride() const;
    void validate() const;

    friend bool operator==(const PredictorConfig&, const PredictorConfig&) = default;
};

PredictorConfig parse_predictor_config(const std::string& text);
PredictorConfig load_predictor_config(const std::filesystem::path& path);
std::string format_predictor_config(const PredictorConfig& cfg);

class BasicConv2dImpl : public torch::nn::Module {
public:
    BasicConv2dImpl(int64_t c_in, int64_t c_out, int64_t stride, bool transpose, bool act_norm);
    torch::Tensor forward(const torch::Tensor& x);

private:
    bool transpose_;
    bool act_norm_;
    torch::nn::Conv2d conv_{nullptr};
    torch::nn::ConvTranspose2d deconv_{nullptr};
    torch::nn::GroupNorm norm_{nullptr};
};
TORCH_MODULE(BasicConv2d);

class GroupConv2dImpl : public torch::nn::Module {
public:
    GroupConv2dImpl(int64_t c_in, int64_t c_out, int64_t kernel, int64_t groups, bool act_norm);
    torch::Tensor forward(const torch::Tensor& x);

private:
    bool act_norm_;
    torch::nn::Conv2d conv_{nullptr};
    torch::nn::GroupNorm norm_{nullptr};
};
TORCH_MODULE(GroupConv2d);

class InceptionImpl : public torch::nn::Module {
public:
    InceptionImpl(int64_t c_in, int64_t c_hid, int64_t c_out, const std::vector<int64_t>& kernels, int64_t groups);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv1_{nullptr};
    torch::nn::ModuleList branches_;
};
TORCH_MODULE(Inception);

class FlowNetImpl : public torch::nn::Module {
public:
    explicit FlowNetImpl(const PredictorConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x);  // [B, 6, H, W] -> [B, 2, H, W]

    const PredictorConfig& config() const { return cfg_; }

private:
    PredictorConfig cfg_;
    torch::nn::ModuleList enc_;
    torch::nn::ModuleList mid_enc_;
    torch::nn::ModuleList mid_dec_;
    torch::nn::ModuleList dec_;
    torch::nn::Conv2d readout_{nullptr};
};
TORCH_MODULE(FlowNet);

/// Owns the flow network. A default-constructed model is uninitialized.
class PredictorModel {
public:
    PredictorModel() = default;
    explicit PredictorModel(const PredictorConfig& cfg, uint64_t seed = 0);

    bool initialized() const { return !net_.is_empty(); }
    const PredictorConfig& config() const;
    FlowNet& net();
    const FlowNet& net() const;

    void save(const std::filesystem::path& path) const;
    static PredictorModel load(const std::filesystem::path& path);

private:
    FlowNet net_{nullptr};
};

/// Runs the network in evaluation mode without gradient tracking.
FlowField predict_flow(const PredictorModel& model, const EncodedInput& input);

// ---------------------------------------------------------------------------------------------
// Training

struct TrainingBatch {
    torch::Tensor inputs;   // [B, 6, H, W]
    torch::Tensor targets;  // [B, 2, H, W]

    static TrainingBatch stack(std::span<const EncodedInput> inputs, std::span<const FlowField> targets);
    int64_t size() const { return inputs.size(0); }
};

enum class TrainOptimizer { Adam, Sgd };

struct TrainerOptions {
    TrainOptimizer optimizer = TrainOptimizer::Adam;
    double learning_rate = 1e-3;
};

class PredictorTrainer {
public:
    PredictorTrainer(PredictorModel& model, TrainerOptions options = {});

    /// One optimizer update on the MSE between prediction and ground-truth flow; returns the loss.
    double train_step(const TrainingBatch& batch);

    /// MSE without updating.
    double evaluate(const TrainingBatch& batch) const;

private:
    PredictorModel& model_;
    TrainerOptions options_;
    std::unique_ptr<torch::optim::Optimizer> optimizer_;
};

// ---------------------------------------------------------------------------------------------
// Flow predictors used by the edit loop

class FlowPredictor {
public:
    virtual ~FlowPredictor() = default;
    virtual FlowField predict(const EncodedInput& input) const = 0;
    virtual std::string describe() const = 0;
};

class NetworkPredictor final : public FlowPredictor {
public:
    explicit NetworkPredictor(PredictorModel model) : model_(std::move(model)) {}
    FlowField predict(const EncodedInput& input) const override { return predict_flow(model_, input); }
    std::string describe() const override { return "network"; }
    const PredictorModel& model() const { return model_; }

private:
    PredictorModel model_;
};

/// Same displacement everywhere, regardless of input.
class ConstantFlowPredictor final : public FlowPredictor {
public:
    explicit ConstantFlowPredictor(Point step) : step_(step) {}
    FlowField predict(const EncodedInput& input) const override;
    std::string describe() const override;

private:
    Point step_;
};

/// Reads the delta map and moves every marked handle straight towards its target by at most `step` px.
class StraightLinePredictor final : public FlowPredictor {
public:
    explicit StraightLinePredictor(double step) : step_(step) {}
    FlowField predict(const EncodedInput& input) const override;
    std::string describe() const override;

private:
    double step_;
};

/// `constant:dx,dy`, `straight:step`, or a checkpoint path.
std::shared_ptr<const FlowPredictor> make_predictor(const std::string& spec);

/// h <- clamp(h + flow(h)) for valid pairs. Invalid pairs keep their position, which is still
/// appended to the history so every history has one entry per executed iteration.
std::vector<PointPair> advance_handles(std::span<const PointPair> pairs, const FlowField& flow);

}  // namespace dynadrag
