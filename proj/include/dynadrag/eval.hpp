#pragma once

#include "dynadrag/raster.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace dynadrag {

struct Moments {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

/// Sample mean and unbiased covariance of an N x D embedding matrix (N >= 2).
Moments compute_moments(const Eigen::MatrixXd& vectors);

/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), eigenvalues clipped at 0.
/// Slightly asymmetric covariances (< 1e-8) are symmetrized with a warning; larger asymmetry throws.
double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& cov1, const Eigen::VectorXd& mu2,
                        const Eigen::MatrixXd& cov2);

/// Mean squared difference over all pixels and channels.
double mse(const RgbImage& a, const RgbImage& b);

struct PluginInfo {
    std::string name;
    std::string version;
    int64_t dim = 0;

    nlohmann::json to_json() const { return {{"name", name}, {"version", version}, {"dim", dim}}; }
};

class EmbedderPlugin {
public:
    virtual ~EmbedderPlugin() = default;
    virtual PluginInfo info() const = 0;
    virtual Eigen::MatrixXd embed(const std::vector<std::filesystem::path>& images) const = 0;
};

class PerceptualPlugin {
public:
    virtual ~PerceptualPlugin() = default;
    virtual PluginInfo info() const = 0;
    virtual std::vector<double> distance(const std::vector<std::filesystem::path>& edited,
                                         const std::vector<std::filesystem::path>& target) const = 0;
};

/// Built-in embedder: 8x8 area-pooled RGB thumbnail (192-d). A stand-in when no backbone is installed.
class ThumbnailEmbedder final : public EmbedderPlugin {
public:
    PluginInfo info() const override { return {"builtin:thumbnail", "1", 192}; }
    Eigen::MatrixXd embed(const std::vector<std::filesystem::path>& images) const override;
};

/// Executable plugin: image paths on stdin, one JSON array per line on stdout.
/// `<command> --info` prints {"name", "version", "dim"}.
class SubprocessEmbedder final : public EmbedderPlugin {
public:
    explicit SubprocessEmbedder(std::string command);
    PluginInfo info() const override { return info_; }
    Eigen::MatrixXd embed(const std::vector<std::filesystem::path>& images) const override;

private:
    std::string command_;
    PluginInfo info_;
};

/// Executable plugin: `edited<TAB>target` lines on stdin, one JSON number per line on stdout.
class SubprocessPerceptual final : public PerceptualPlugin {
public:
    explicit SubprocessPerceptual(std::string command);
    PluginInfo info() const override { return info_; }
    std::vector<double> distance(const std::vector<std::filesystem::path>& edited,
                                 const std::vector<std::filesystem::path>& target) const override;

private:
    std::string command_;
    PluginInfo info_;
};

/// `builtin:thumbnail` or an executable command.
std::unique_ptr<EmbedderPlugin> make_embedder(const std::string& spec);
std::unique_ptr<PerceptualPlugin> make_perceptual(const std::string& spec);

struct MetricReport {
    std::optional<double> fid;
    double mse = 0.0;
    double mse_x1e3 = 0.0;
    std::optional<double> lpips;
    std::optional<double> clip_sim;
    int64_t edited_count = 0;
    int64_t target_count = 0;
    nlohmann::json plugins = nlohmann::json::object();
    std::string config_hash;

    nlohmann::json to_json() const;
    /// Columns in the order FID, MSE (x10^3), LPIPS, CLIP SIM.
    std::string to_table() const;
};

struct EvalPlugins {
    const EmbedderPlugin* embedder = nullptr;    // FID
    const PerceptualPlugin* perceptual = nullptr;  // LPIPS
    const EmbedderPlugin* similarity = nullptr;  // CLIP similarity (cosine of paired embeddings)
};

/// Aligns the two directories by file name (*.png). Throws listing names missing on either side.
MetricReport evaluate(const std::filesystem::path& edited_dir, const std::filesystem::path& target_dir,
                      const EvalPlugins& plugins);

}  // namespace dynadrag
