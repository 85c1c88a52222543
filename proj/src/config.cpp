#include "dynadrag/config.hpp"

#include "dynadrag/error.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace dynadrag {
namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\'')))
        return s.substr(1, s.size() - 2);
    return s;
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* first = value.data();
    const char* last = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || ptr != last) fail(ErrorKind::InvalidArgument, "config key '" + key + "': not a number: '" + value + "'");
    return out;
}

double parse_real(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        fail(ErrorKind::InvalidArgument, "config key '" + key + "': not a real number: '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    fail(ErrorKind::InvalidArgument, "config key '" + key + "': expected true/false, got '" + value + "'");
}

std::string format_real(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

std::string to_string(SelectionMode mode) {
    switch (mode) {
        case SelectionMode::ADS: return "ADS";
        case SelectionMode::FDS: return "FDS";
        case SelectionMode::RS: return "RS";
        case SelectionMode::OFF: return "OFF";
    }
    return "ADS";
}

SelectionMode parse_selection_mode(const std::string& text) {
    std::string t = text;
    std::transform(t.begin(), t.end(), t.begin(), ::toupper);
    if (t == "ADS") return SelectionMode::ADS;
    if (t == "FDS") return SelectionMode::FDS;
    if (t == "RS") return SelectionMode::RS;
    if (t == "OFF") return SelectionMode::OFF;
    fail(ErrorKind::InvalidArgument, "unknown selection mode '" + text + "' (expected ADS, FDS, RS or OFF)");
}

std::string to_string(MsOptimizer opt) {
    switch (opt) {
        case MsOptimizer::Auto: return "auto";
        case MsOptimizer::Sgd: return "sgd";
        case MsOptimizer::Adam: return "adam";
    }
    return "auto";
}

MsOptimizer parse_ms_optimizer(const std::string& text) {
    if (text == "auto") return MsOptimizer::Auto;
    if (text == "sgd") return MsOptimizer::Sgd;
    if (text == "adam") return MsOptimizer::Adam;
    fail(ErrorKind::InvalidArgument, "unknown ms.optimizer '" + text + "' (expected auto, sgd or adam)");
}

void EditConfig::validate() const {
    auto positive = [](int v, const char* name) {
        require(v > 0, std::string(name) + " must be positive");
    };
    positive(max_iterations, "max_iterations");
    positive(ms_steps_per_iteration, "ms_steps_per_iteration");
    positive(ddim_steps, "ddim_steps");
    positive(lora_rank, "lora_rank");
    require(lora_steps >= 0, "lora_steps must be non-negative");
    require(ms_learning_rate > 0, "ms_learning_rate must be positive");
    require(lora_learning_rate > 0, "lora_learning_rate must be positive");
    require(lambda_mask >= 0, "lambda_mask must be non-negative");
    require(r1_patch_radius >= 0, "r1_patch_radius must be non-negative");
    require(heatmap_radius >= 0, "heatmap_radius must be non-negative");
    require(similarity_threshold > -1.0 && similarity_threshold <= 1.0, "similarity_threshold must lie in (-1, 1]");
    require(stop_distance >= 0, "stop_distance must be non-negative");
    require(backend_kind == "toy" || backend_kind == "ldm", "backend.kind must be toy or ldm");
}

void apply_config_entry(EditConfig& cfg, const std::string& key, const std::string& raw) {
    const std::string value = unquote(trim(raw));
    if (key == "max_iterations") cfg.max_iterations = parse_number<int>(key, value);
    else if (key == "ms_steps_per_iteration") cfg.ms_steps_per_iteration = parse_number<int>(key, value);
    else if (key == "ms_learning_rate") cfg.ms_learning_rate = parse_real(key, value);
    else if (key == "lambda_mask") cfg.lambda_mask = parse_real(key, value);
    else if (key == "r1_patch_radius") cfg.r1_patch_radius = parse_number<int>(key, value);
    else if (key == "heatmap_radius") cfg.heatmap_radius = parse_number<int>(key, value);
    else if (key == "ddim_steps") cfg.ddim_steps = parse_number<int>(key, value);
    else if (key == "lora_rank") cfg.lora_rank = parse_number<int>(key, value);
    else if (key == "lora_steps") cfg.lora_steps = parse_number<int>(key, value);
    else if (key == "lora_learning_rate") cfg.lora_learning_rate = parse_real(key, value);
    else if (key == "similarity_threshold") cfg.similarity_threshold = parse_real(key, value);
    else if (key == "stop_distance") cfg.stop_distance = parse_real(key, value);
    else if (key == "selection_mode") cfg.selection_mode = parse_selection_mode(value);
    else if (key == "backend.kind") cfg.backend_kind = value;
    else if (key == "backend.model_id") cfg.backend_model_id = value;
    else if (key == "ms.optimizer") cfg.ms_optimizer = parse_ms_optimizer(value);
    else if (key == "loop.carry_latent") cfg.carry_latent = parse_bool(key, value);
    else if (key == "seed") cfg.seed = parse_number<uint64_t>(key, value);
    else fail(ErrorKind::InvalidArgument, "unknown config key '" + key + "'");
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) {
            // keep '#' inside quotes
            const auto q = line.find('"');
            if (q == std::string::npos || hash < q) line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty() || line.front() == '[') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail(ErrorKind::InvalidArgument, "config line " + std::to_string(lineno) + ": expected key = value");
        out[trim(line.substr(0, eq))] = unquote(trim(line.substr(eq + 1)));
    }
    return out;
}

EditConfig parse_config(const std::string& text, EditConfig base) {
    for (const auto& [k, v] : parse_key_values(text)) apply_config_entry(base, k, v);
    base.validate();
    return base;
}

EditConfig load_config(const std::filesystem::path& path, EditConfig base) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

std::string format_config(const EditConfig& c) {
    std::ostringstream os;
    os << "max_iterations = " << c.max_iterations << '\n'
       << "ms_steps_per_iteration = " << c.ms_steps_per_iteration << '\n'
       << "ms_learning_rate = " << format_real(c.ms_learning_rate) << '\n'
       << "lambda_mask = " << format_real(c.lambda_mask) << '\n'
       << "r1_patch_radius = " << c.r1_patch_radius << '\n'
       << "heatmap_radius = " << c.heatmap_radius << '\n'
       << "ddim_steps = " << c.ddim_steps << '\n'
       << "lora_rank = " << c.lora_rank << '\n'
       << "lora_steps = " << c.lora_steps << '\n'
       << "lora_learning_rate = " << format_real(c.lora_learning_rate) << '\n'
       << "similarity_threshold = " << format_real(c.similarity_threshold) << '\n'
       << "stop_distance = " << format_real(c.stop_distance) << '\n'
       << "selection_mode = \"" << to_string(c.selection_mode) << "\"\n"
       << "backend.kind = \"" << c.backend_kind << "\"\n"
       << "backend.model_id = \"" << c.backend_model_id << "\"\n"
       << "ms.optimizer = \"" << to_string(c.ms_optimizer) << "\"\n"
       << "loop.carry_latent = " << (c.carry_latent ? "true" : "false") << '\n'
       << "seed = " << c.seed << '\n';
    return os.str();
}

void save_config(const EditConfig& cfg, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::Io, "cannot write config file " + path.string());
    out << format_config(cfg);
}

}  // namespace dynadrag
