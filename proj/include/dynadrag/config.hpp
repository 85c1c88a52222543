#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace dynadrag {

enum class SelectionMode { ADS, FDS, RS, OFF };

std::string to_string(SelectionMode mode);
SelectionMode parse_selection_mode(const std::string& text);

enum class MsOptimizer { Auto, Sgd, Adam };

std::string to_string(MsOptimizer opt);
MsOptimizer parse_ms_optimizer(const std::string& text);

/// Edit hyperparameters. Defaults reproduce the published setup.
struct EditConfig {
    int max_iterations = 25;
    int ms_steps_per_iteration = 5;
    double ms_learning_rate = 0.01;
    double lambda_mask = 0.1;
    int r1_patch_radius = 1;
    int heatmap_radius = 4;
    int ddim_steps = 50;
    int lora_rank = 16;
    int lora_steps = 200;
    double lora_learning_rate = 2e-4;
    double similarity_threshold = 0.6;
    double stop_distance = 2.0;
    SelectionMode selection_mode = SelectionMode::ADS;

    // Not part of the core hyperparameter set; stored under dotted keys.
    std::string backend_kind = "toy";     // backend.kind
    std::string backend_model_id;         // backend.model_id
    MsOptimizer ms_optimizer = MsOptimizer::Auto;  // ms.optimizer
    bool carry_latent = false;            // loop.carry_latent
    uint64_t seed = 0;                    // seed

    /// Throws Error(InvalidArgument) naming the first offending field.
    void validate() const;

    friend bool operator==(const EditConfig&, const EditConfig&) = default;
};

/// Flat `key = value` format: one entry per line, `#` comments, optional quotes around strings.
/// Unknown keys are rejected.
EditConfig parse_config(const std::string& text, EditConfig base = {});
EditConfig load_config(const std::filesystem::path& path, EditConfig base = {});
std::string format_config(const EditConfig& cfg);
void save_config(const EditConfig& cfg, const std::filesystem::path& path);

/// Applies a single key/value override (same keys as the file format).
void apply_config_entry(EditConfig& cfg, const std::string& key, const std::string& value);

/// Generic flat key/value reader shared by the model config files.
std::map<std::string, std::string> parse_key_values(const std::string& text);

}  // namespace dynadrag
