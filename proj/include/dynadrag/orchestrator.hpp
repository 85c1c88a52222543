#pragma once

#include "dynadrag/config.hpp"
#include "dynadrag/diffusion_backend.hpp"
#include "dynadrag/error.hpp"
#include "dynadrag/motion_predictor.hpp"
#include "dynadrag/motion_supervisor.hpp"

#include <json.hpp>

#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dynadrag {

struct IterationRecord {
    int iteration = 0;
    std::vector<int> valid_pair_indices;
    std::vector<bool> valid;
    std::vector<double> similarities;
    std::vector<Point> predicted_next_positions;
    std::vector<MsStepRecord> ms_loss_curve;
    std::string intermediate_image;
    std::vector<Point> handle_positions;
};

struct EditTrace {
    std::vector<IterationRecord> records;
    std::string selection_mode;
    uint64_t seed = 0;
    bool converged = false;
    std::string lora_adapter;
    std::vector<double> lora_loss_curve;
};

nlohmann::json to_json(const IterationRecord& record);
nlohmann::json to_json(const EditTrace& trace);
IterationRecord iteration_record_from_json(const nlohmann::json& j);
EditTrace trace_from_json(const nlohmann::json& j);

/// `[{"handle": [x, y], "target": [x, y]}, ...]`
std::vector<PointPair> parse_points_json(const nlohmann::json& j);
nlohmann::json points_to_json(std::span<const PointPair> pairs);

// ---------------------------------------------------------------------------------------------

double cosine_similarity(const torch::Tensor& a, const torch::Tensor& b);

/// Cosine similarity between handle and target features of F(z_t) for every pair.
std::vector<double> compute_similarities(DiffusionBackend& backend, const LatentState& state,
                                         std::span<const PointPair> pairs);

/// Threshold rule: keep pairs below `threshold`; if none qualify keep the single least similar pair.
std::vector<bool> threshold_selection(std::span<const double> similarities, double threshold);

/// Sets the valid flags for iteration `iteration` according to `mode`. Pairs are never removed.
std::vector<PointPair> select_valid_points(std::vector<PointPair> pairs, std::span<const double> similarities,
                                           SelectionMode mode, double threshold, int iteration,
                                           std::mt19937_64& rng);

bool is_converged(std::span<const PointPair> pairs, double stop_distance);

// ---------------------------------------------------------------------------------------------

struct EditSession {
    RgbImage image;
    std::vector<PointPair> pairs;
    MaskImage mask;
    EditConfig config;
    std::shared_ptr<DiffusionBackend> backend;
    std::shared_ptr<const FlowPredictor> predictor;

    void validate() const;
};

struct EditHooks {
    /// Stores I_{k+1}; returns the reference recorded in the trace.
    std::function<std::string(int iteration, const RgbImage& image)> store_intermediate;
    std::function<void(const IterationRecord& record)> on_iteration;
    /// Called after LoRA fine-tuning, before inversion.
    std::function<void(const LoraAdapter& adapter)> on_adapter;
    /// Reuse a previously trained adapter instead of fine-tuning.
    std::shared_ptr<const LoraAdapter> adapter;
};

struct EditResult {
    RgbImage image;
    EditTrace trace;
    std::vector<PointPair> pairs;
};

/// Failure inside the loop; carries the trace up to the failing iteration.
class EditFailed : public Error {
public:
    EditFailed(int iteration, EditTrace partial, const std::string& what)
        : Error(ErrorKind::Numerical, what), iteration_(iteration), partial_(std::move(partial)) {}
    int iteration() const { return iteration_; }
    const EditTrace& partial_trace() const { return partial_; }

private:
    int iteration_;
    EditTrace partial_;
};

/// LoRA fine-tune, invert, then alternate selection / prediction / supervision / guided denoising
/// until the valid handles are within stop_distance of their targets or max_iterations is reached.
EditResult run_edit(const EditSession& session, const EditHooks& hooks = {});

}  // namespace dynadrag
