#include "dynadrag/eval.hpp"

#include "dynadrag/dataset.hpp"
#include "dynadrag/error.hpp"
#include "dynadrag/image_io.hpp"
#include "dynadrag/log.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <unistd.h>
#include <iomanip>
#include <set>
#include <sstream>

namespace dynadrag {
namespace fs = std::filesystem;

Moments compute_moments(const Eigen::MatrixXd& vectors) {
    require(vectors.rows() >= 2, c10::str("need at least two embeddings for a covariance, got ", vectors.rows()));
    Moments m;
    m.mean = vectors.colwise().mean().transpose();
    const Eigen::MatrixXd centered = vectors.rowwise() - m.mean.transpose();
    m.cov = centered.transpose() * centered / static_cast<double>(vectors.rows() - 1);
    return m;
}

namespace {

Eigen::MatrixXd symmetrized(const Eigen::MatrixXd& s, const char* name) {
    const double asym = (s - s.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-8) fail(ErrorKind::Numerical, c10::str(name, " is not symmetric (max asymmetry ", asym, ")"));
    if (asym > 0) log::warn(name, " symmetrized (max asymmetry ", asym, ")");
    return 0.5 * (s + s.transpose());
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& s) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
    const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& cov1, const Eigen::VectorXd& mu2,
                        const Eigen::MatrixXd& cov2) {
    const auto d = mu1.size();
    require(mu2.size() == d && cov1.rows() == d && cov1.cols() == d && cov2.rows() == d && cov2.cols() == d,
            "frechet_distance: dimension mismatch");
    const Eigen::MatrixXd s1 = symmetrized(cov1, "first covariance");
    const Eigen::MatrixXd s2 = symmetrized(cov2, "second covariance");
    const Eigen::MatrixXd r1 = psd_sqrt(s1);
    const Eigen::MatrixXd inner = r1 * s2 * r1;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double value = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, value);
}

double mse(const RgbImage& a, const RgbImage& b) {
    require(a.data.sizes() == b.data.sizes(), "mse: image sizes differ");
    return (a.data.to(torch::kFloat64) - b.data.to(torch::kFloat64)).pow(2).mean().item<double>();
}

// ---------------------------------------------------------------------------------------------
// Plugins

Eigen::MatrixXd ThumbnailEmbedder::embed(const std::vector<fs::path>& images) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), 192);
    for (size_t i = 0; i < images.size(); ++i) {
        const RgbImage img = read_png(images[i]);
        auto thumb = torch::adaptive_avg_pool2d(img.data.unsqueeze(0), {8, 8}).flatten().to(torch::kFloat64).contiguous();
        const double* p = thumb.data_ptr<double>();
        for (Eigen::Index j = 0; j < 192; ++j) out(static_cast<Eigen::Index>(i), j) = p[j];
    }
    return out;
}

namespace {

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return out + "'";
}

/// Runs `command`, feeding `input` through a temporary file, and returns stdout.
std::string run_capture(const std::string& command, const std::string& input) {
    std::string cmd = command;
    fs::path tmp;
    if (!input.empty()) {
        std::string templ = (fs::temp_directory_path() / "dynadrag-eval-XXXXXX").string();
        const int fd = mkstemp(templ.data());
        if (fd < 0) fail(ErrorKind::Io, "cannot create temporary file");
        close(fd);
        tmp = templ;
        write_text(tmp, input);
        cmd += " < " + shell_quote(tmp.string());
    }
    FILE* pipe = popen(cmd.c_str(), "r");
    if (pipe == nullptr) fail(ErrorKind::Unavailable, "cannot start plugin: " + command);
    std::string out;
    char buf[4096];
    size_t n;
    while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) out.append(buf, n);
    const int rc = pclose(pipe);
    if (!tmp.empty()) fs::remove(tmp);
    if (rc != 0) fail(ErrorKind::Unavailable, c10::str("plugin exited with status ", rc, ": ", command));
    return out;
}

PluginInfo query_info(const std::string& command) {
    const std::string text = run_capture(command + " --info", "");
    try {
        const auto j = nlohmann::json::parse(text);
        return {j.at("name").get<std::string>(), j.at("version").get<std::string>(), j.value("dim", int64_t{0})};
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Encoding, "plugin --info output is not valid JSON: " + std::string(e.what()));
    }
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(line);
    return out;
}

}  // namespace

SubprocessEmbedder::SubprocessEmbedder(std::string command) : command_(std::move(command)), info_(query_info(command_)) {}

Eigen::MatrixXd SubprocessEmbedder::embed(const std::vector<fs::path>& images) const {
    std::string input;
    for (const auto& p : images) input += fs::absolute(p).string() + "\n";
    const auto lines = lines_of(run_capture(command_, input));
    require(lines.size() == images.size(), c10::str("embedder returned ", lines.size(), " vectors for ", images.size(), " images"),
            ErrorKind::Encoding);
    Eigen::MatrixXd out;
    for (size_t i = 0; i < lines.size(); ++i) {
        const auto v = nlohmann::json::parse(lines[i]).get<std::vector<double>>();
        if (i == 0) out.resize(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(v.size()));
        require(static_cast<Eigen::Index>(v.size()) == out.cols(), "embedder returned vectors of different lengths", ErrorKind::Encoding);
        for (size_t j = 0; j < v.size(); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[j];
    }
    return out;
}

SubprocessPerceptual::SubprocessPerceptual(std::string command) : command_(std::move(command)), info_(query_info(command_)) {}

std::vector<double> SubprocessPerceptual::distance(const std::vector<fs::path>& edited, const std::vector<fs::path>& target) const {
    require(edited.size() == target.size(), "perceptual: image lists differ in length");
    std::string input;
    for (size_t i = 0; i < edited.size(); ++i) input += fs::absolute(edited[i]).string() + "\t" + fs::absolute(target[i]).string() + "\n";
    const auto lines = lines_of(run_capture(command_, input));
    require(lines.size() == edited.size(), c10::str("perceptual plugin returned ", lines.size(), " values for ", edited.size(), " pairs"),
            ErrorKind::Encoding);
    std::vector<double> out;
    for (const auto& l : lines) out.push_back(nlohmann::json::parse(l).get<double>());
    return out;
}

std::unique_ptr<EmbedderPlugin> make_embedder(const std::string& spec) {
    if (spec == "builtin:thumbnail") return std::make_unique<ThumbnailEmbedder>();
    if (spec.rfind("builtin:", 0) == 0) fail(ErrorKind::InvalidArgument, "unknown built-in embedder '" + spec + "'");
    return std::make_unique<SubprocessEmbedder>(spec);
}

std::unique_ptr<PerceptualPlugin> make_perceptual(const std::string& spec) {
    if (spec.rfind("builtin:", 0) == 0) fail(ErrorKind::InvalidArgument, "no built-in perceptual metric '" + spec + "'");
    return std::make_unique<SubprocessPerceptual>(spec);
}

// ---------------------------------------------------------------------------------------------

nlohmann::json MetricReport::to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {
        {"fid", opt(fid)},
        {"mse", mse},
        {"mse_x1e3", mse_x1e3},
        {"lpips", opt(lpips)},
        {"clip_sim", opt(clip_sim)},
        {"edited_count", edited_count},
        {"target_count", target_count},
        {"plugins", plugins},
        {"config_hash", config_hash},
    };
}

std::string MetricReport::to_table() const {
    auto cell = [](const std::optional<double>& v, int precision) {
        if (!v) return std::string("-");
        std::ostringstream os;
        os << std::fixed << std::setprecision(precision) << *v;
        return os.str();
    };
    std::ostringstream os;
    os << std::left << std::setw(12) << "FID" << std::setw(16) << "MSE (x10^3)" << std::setw(10) << "LPIPS" << "CLIP SIM\n";
    os << std::setw(12) << cell(fid, 2) << std::setw(16) << cell(mse_x1e3, 3) << std::setw(10) << cell(lpips, 4) << cell(clip_sim, 4)
       << "\n";
    return os.str();
}

namespace {

std::set<std::string> png_names(const fs::path& dir) {
    require(fs::is_directory(dir), "not a directory: " + dir.string(), ErrorKind::NotFound);
    std::set<std::string> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") out.insert(e.path().filename().string());
    return out;
}

std::string joined(const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
    return s;
}

}  // namespace

MetricReport evaluate(const fs::path& edited_dir, const fs::path& target_dir, const EvalPlugins& plugins) {
    const auto edited = png_names(edited_dir);
    const auto target = png_names(target_dir);
    std::vector<std::string> only_edited, only_target;
    std::set_difference(edited.begin(), edited.end(), target.begin(), target.end(), std::back_inserter(only_edited));
    std::set_difference(target.begin(), target.end(), edited.begin(), edited.end(), std::back_inserter(only_target));
    if (!only_edited.empty() || !only_target.empty()) {
        std::string msg = "edited and target sets do not align";
        if (!only_target.empty()) msg += "; missing from edited: " + joined(only_target);
        if (!only_edited.empty()) msg += "; missing from target: " + joined(only_edited);
        fail(ErrorKind::InvalidArgument, msg);
    }
    require(!edited.empty(), "no PNG images to evaluate in " + edited_dir.string());

    std::vector<fs::path> e_paths, t_paths;
    for (const auto& name : edited) {
        e_paths.push_back(edited_dir / name);
        t_paths.push_back(target_dir / name);
    }

    MetricReport report;
    report.edited_count = static_cast<int64_t>(e_paths.size());
    report.target_count = static_cast<int64_t>(t_paths.size());
    double total = 0.0;
    for (size_t i = 0; i < e_paths.size(); ++i) {
        const RgbImage a = read_png(e_paths[i]);
        const RgbImage b = read_png(t_paths[i]);
        require(a.data.sizes() == b.data.sizes(), "image sizes differ for " + e_paths[i].filename().string());
        total += mse(a, b);
    }
    report.mse = total / static_cast<double>(e_paths.size());
    report.mse_x1e3 = report.mse * 1e3;

    if (plugins.embedder != nullptr) {
        report.plugins["embedder"] = plugins.embedder->info().to_json();
        if (e_paths.size() >= 2) {
            const Moments me = compute_moments(plugins.embedder->embed(e_paths));
            const Moments mt = compute_moments(plugins.embedder->embed(t_paths));
            report.fid = frechet_distance(me.mean, me.cov, mt.mean, mt.cov);
        } else {
            log::warn("Frechet distance needs at least two images per side; skipped");
        }
    }
    if (plugins.perceptual != nullptr) {
        report.plugins["perceptual"] = plugins.perceptual->info().to_json();
        const auto d = plugins.perceptual->distance(e_paths, t_paths);
        report.lpips = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
    }
    if (plugins.similarity != nullptr) {
        report.plugins["similarity"] = plugins.similarity->info().to_json();
        const Eigen::MatrixXd a = plugins.similarity->embed(e_paths);
        const Eigen::MatrixXd b = plugins.similarity->embed(t_paths);
        double sum = 0.0;
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            const double na = a.row(i).norm();
            const double nb = b.row(i).norm();
            sum += (na > 0 && nb > 0) ? a.row(i).dot(b.row(i)) / (na * nb) : 1.0;
        }
        report.clip_sim = sum / static_cast<double>(a.rows());
    }
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(report.plugins.dump())));
    report.config_hash = buf;
    return report;
}

}  // namespace dynadrag
