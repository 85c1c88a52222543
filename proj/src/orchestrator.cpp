#include "dynadrag/orchestrator.hpp"

#include "dynadrag/log.hpp"

#include <algorithm>
#include <numeric>

namespace dynadrag {

// ---------------------------------------------------------------------------------------------
// JSON

namespace {

nlohmann::json point_json(Point p) { return nlohmann::json::array({p.x, p.y}); }

Point point_from(const nlohmann::json& j, const char* what) {
    if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
        fail(ErrorKind::InvalidArgument, std::string(what) + " must be an [x, y] pair of numbers");
    return {j[0].get<double>(), j[1].get<double>()};
}

nlohmann::json points_json(const std::vector<Point>& pts) {
    auto a = nlohmann::json::array();
    for (Point p : pts) a.push_back(point_json(p));
    return a;
}

std::vector<Point> points_from(const nlohmann::json& j, const char* what) {
    std::vector<Point> out;
    for (const auto& p : j) out.push_back(point_from(p, what));
    return out;
}

}  // namespace

nlohmann::json to_json(const IterationRecord& r) {
    auto curve = nlohmann::json::array();
    for (const auto& s : r.ms_loss_curve) curve.push_back({{"loss", s.loss}, {"term1", s.term1}, {"term2", s.term2}});
    return {
        {"iteration", r.iteration},
        {"valid_pair_indices", r.valid_pair_indices},
        {"valid", r.valid},
        {"similarities", r.similarities},
        {"predicted_next_positions", points_json(r.predicted_next_positions)},
        {"ms_loss_curve", curve},
        {"intermediate_image", r.intermediate_image},
        {"handle_positions", points_json(r.handle_positions)},
    };
}

nlohmann::json to_json(const EditTrace& t) {
    auto records = nlohmann::json::array();
    for (const auto& r : t.records) records.push_back(to_json(r));
    return {
        {"selection_mode", t.selection_mode},
        {"seed", t.seed},
        {"converged", t.converged},
        {"lora_adapter", t.lora_adapter},
        {"lora_loss_curve", t.lora_loss_curve},
        {"iterations", records},
    };
}

IterationRecord iteration_record_from_json(const nlohmann::json& j) {
    IterationRecord r;
    r.iteration = j.at("iteration").get<int>();
    r.valid_pair_indices = j.at("valid_pair_indices").get<std::vector<int>>();
    r.valid = j.at("valid").get<std::vector<bool>>();
    r.similarities = j.at("similarities").get<std::vector<double>>();
    r.predicted_next_positions = points_from(j.at("predicted_next_positions"), "predicted_next_positions entry");
    for (const auto& s : j.at("ms_loss_curve"))
        r.ms_loss_curve.push_back({s.at("loss").get<double>(), s.at("term1").get<double>(), s.at("term2").get<double>()});
    r.intermediate_image = j.at("intermediate_image").get<std::string>();
    r.handle_positions = points_from(j.at("handle_positions"), "handle_positions entry");
    return r;
}

EditTrace trace_from_json(const nlohmann::json& j) {
    EditTrace t;
    t.selection_mode = j.at("selection_mode").get<std::string>();
    t.seed = j.at("seed").get<uint64_t>();
    t.converged = j.at("converged").get<bool>();
    t.lora_adapter = j.at("lora_adapter").get<std::string>();
    t.lora_loss_curve = j.at("lora_loss_curve").get<std::vector<double>>();
    for (const auto& r : j.at("iterations")) t.records.push_back(iteration_record_from_json(r));
    return t;
}

std::vector<PointPair> parse_points_json(const nlohmann::json& j) {
    if (!j.is_array()) fail(ErrorKind::InvalidArgument, "points must be a JSON array of {handle, target} objects");
    if (j.empty()) fail(ErrorKind::InvalidArgument, "points: at least one handle/target pair is required");
    std::vector<PointPair> out;
    for (const auto& item : j) {
        if (!item.is_object() || !item.contains("handle") || !item.contains("target"))
            fail(ErrorKind::InvalidArgument, "points: every entry needs \"handle\" and \"target\"");
        out.push_back(PointPair::from_user(point_from(item["handle"], "handle"), point_from(item["target"], "target")));
    }
    return out;
}

nlohmann::json points_to_json(std::span<const PointPair> pairs) {
    auto a = nlohmann::json::array();
    for (const auto& p : pairs) a.push_back({{"handle", point_json(p.handle)}, {"target", point_json(p.target)}});
    return a;
}

// ---------------------------------------------------------------------------------------------
// Selection

double cosine_similarity(const torch::Tensor& a, const torch::Tensor& b) {
    const auto x = a.detach().to(torch::kFloat64).flatten();
    const auto y = b.detach().to(torch::kFloat64).flatten();
    const double na = x.norm().item<double>();
    const double nb = y.norm().item<double>();
    if (na < 1e-12 || nb < 1e-12) {
        log::warn("cosine similarity of a zero-norm feature vector; treating the pair as similar (1.0)");
        return 1.0;
    }
    return std::clamp(x.dot(y).item<double>() / (na * nb), -1.0, 1.0);
}

std::vector<double> compute_similarities(DiffusionBackend& backend, const LatentState& state, std::span<const PointPair> pairs) {
    torch::NoGradGuard no_grad;
    const FeatureMap fm = backend.extract_features(state);
    const int ds = backend.downscale();
    std::vector<double> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs)
        out.push_back(dynadrag::cosine_similarity(sample_feature(fm, pixel_to_latent(p.handle, ds)), sample_feature(fm, pixel_to_latent(p.target, ds))));
    return out;
}

std::vector<bool> threshold_selection(std::span<const double> similarities, double threshold) {
    std::vector<bool> valid(similarities.size(), false);
    bool any = false;
    for (size_t i = 0; i < similarities.size(); ++i) {
        valid[i] = similarities[i] < threshold;
        any = any || valid[i];
    }
    if (!any && !similarities.empty()) {
        const auto it = std::min_element(similarities.begin(), similarities.end());
        valid[static_cast<size_t>(std::distance(similarities.begin(), it))] = true;
    }
    return valid;
}

std::vector<PointPair> select_valid_points(std::vector<PointPair> pairs, std::span<const double> similarities,
                                           SelectionMode mode, double threshold, int iteration, std::mt19937_64& rng) {
    require(similarities.size() == pairs.size(),
            c10::str("select_valid_points: ", pairs.size(), " pairs but ", similarities.size(), " similarities"));
    std::vector<bool> valid;
    switch (mode) {
        case SelectionMode::OFF: valid.assign(pairs.size(), true); break;
        case SelectionMode::ADS: valid = threshold_selection(similarities, threshold); break;
        case SelectionMode::FDS:
            if (iteration == 0) {
                valid = threshold_selection(similarities, threshold);
            } else {
                for (const auto& p : pairs) valid.push_back(p.valid);
            }
            break;
        case SelectionMode::RS: {
            const auto reference = threshold_selection(similarities, threshold);
            const auto count = static_cast<size_t>(std::count(reference.begin(), reference.end(), true));
            std::vector<size_t> order(pairs.size());
            std::iota(order.begin(), order.end(), size_t{0});
            std::shuffle(order.begin(), order.end(), rng);
            valid.assign(pairs.size(), false);
            for (size_t i = 0; i < count; ++i) valid[order[i]] = true;
            break;
        }
    }
    for (size_t i = 0; i < pairs.size(); ++i) pairs[i].valid = valid[i];
    return pairs;
}

bool is_converged(std::span<const PointPair> pairs, double stop_distance) {
    return std::all_of(pairs.begin(), pairs.end(),
                       [&](const PointPair& p) { return !p.valid || p.remaining_distance() <= stop_distance; });
}

// ---------------------------------------------------------------------------------------------
// Loop

void EditSession::validate() const {
    require(image.data.defined(), "edit session: no image");
    require(!pairs.empty(), "edit session: at least one handle/target pair is required");
    require(mask.data.defined() && mask.height() == image.height() && mask.width() == image.width(),
            "edit session: mask size does not match the image");
    require(backend != nullptr, "edit session: no diffusion backend");
    require(predictor != nullptr, "edit session: no flow predictor");
    require(image.height() == backend->resolution() && image.width() == backend->resolution(),
            c10::str("edit session: image is ", image.width(), "x", image.height(), ", backend works at ", backend->resolution(), "x",
                     backend->resolution()));
    config.validate();
}

namespace {

std::vector<Point> valid_handles(const std::vector<PointPair>& pairs) {
    std::vector<Point> out;
    for (const auto& p : pairs)
        if (p.valid) out.push_back(p.handle);
    return out;
}

}  // namespace

EditResult run_edit(const EditSession& session, const EditHooks& hooks) {
    session.validate();
    const EditConfig& cfg = session.config;
    DiffusionBackend& backend = *session.backend;
    const int64_t H = session.image.height();
    const int64_t W = session.image.width();

    EditTrace trace;
    trace.selection_mode = to_string(cfg.selection_mode);
    trace.seed = cfg.seed;

    if (hooks.adapter) {
        backend.set_adapter(hooks.adapter);
        trace.lora_adapter = hooks.adapter->id;
        trace.lora_loss_curve = hooks.adapter->loss_curve;
    } else {
        const LoraOptions opts{cfg.lora_rank, cfg.lora_steps, cfg.lora_learning_rate, 1e-2, cfg.seed};
        auto adapter = std::make_shared<const LoraAdapter>(backend.finetune_identity_lora(session.image, opts));
        backend.set_adapter(adapter);
        trace.lora_adapter = adapter->id;
        trace.lora_loss_curve = adapter->loss_curve;
        if (hooks.on_adapter) hooks.on_adapter(*adapter);
    }

    LatentState z_t0;
    torch::Tensor z_tm1_ref;
    {
        torch::NoGradGuard no_grad;
        z_t0 = backend.ddim_invert(backend.encode(session.image), cfg.ddim_steps).back();
        z_tm1_ref = backend.denoise_step(z_t0, nullptr).z.detach();
    }
    const MaskImage mask_latent = session.mask.downsample_majority(backend.downscale());
    std::vector<PointPair> pairs = session.pairs;

    if (is_converged(pairs, cfg.stop_distance)) {
        torch::NoGradGuard no_grad;
        trace.converged = true;
        return {backend.decode(backend.denoise_to_clean(z_t0, nullptr).z), trace, pairs};
    }

    std::mt19937_64 rng(cfg.seed);
    RgbImage current = session.image;
    LatentState z_tk = z_t0;
    for (int k = 0; k < cfg.max_iterations; ++k) {
        try {
            IterationRecord rec;
            rec.iteration = k;
            rec.similarities = compute_similarities(backend, z_tk, pairs);
            pairs = select_valid_points(std::move(pairs), rec.similarities, cfg.selection_mode, cfg.similarity_threshold, k, rng);
            for (size_t i = 0; i < pairs.size(); ++i) {
                rec.valid.push_back(pairs[i].valid);
                if (pairs[i].valid) rec.valid_pair_indices.push_back(static_cast<int>(i));
            }

            const EncodedInput input = encode_input(current, pairs, cfg.heatmap_radius, std::make_pair(H, W));
            const FlowField flow = session.predictor->predict(input);
            for (const auto& p : pairs) rec.predicted_next_positions.push_back(clamp_to_bounds(p.handle + flow.at(p.handle), W, H));

            const std::vector<Point> before = valid_handles(pairs);
            pairs = advance_handles(pairs, flow);
            const std::vector<Point> after = valid_handles(pairs);
            for (const auto& p : pairs) rec.handle_positions.push_back(p.handle);

            SupervisionContext ctx{z_tk, z_t0, z_tm1_ref, mask_latent, before, after, cfg, backend.downscale()};
            OptimizeResult opt = optimize_latent(backend, ctx);
            rec.ms_loss_curve = opt.steps;

            {
                torch::NoGradGuard no_grad;
                current = backend.decode(backend.denoise_to_clean(opt.latent, &z_t0).z);
            }
            if (hooks.store_intermediate) rec.intermediate_image = hooks.store_intermediate(k, current);
            trace.records.push_back(rec);
            if (hooks.on_iteration) hooks.on_iteration(trace.records.back());
            log::info("iteration ", k, ": ", rec.valid_pair_indices.size(), "/", pairs.size(), " valid, loss ",
                      rec.ms_loss_curve.empty() ? 0.0 : rec.ms_loss_curve.back().loss);

            if (is_converged(pairs, cfg.stop_distance)) {
                trace.converged = true;
                break;
            }
            if (k + 1 == cfg.max_iterations) break;

            torch::NoGradGuard no_grad;
            if (cfg.carry_latent) z_tk = opt.latent;
            else z_tk = backend.ddim_invert(backend.encode(current), cfg.ddim_steps).back();
        } catch (const EditFailed&) {
            throw;
        } catch (const std::exception& e) {
            throw EditFailed(k, trace, c10::str("edit failed at iteration ", k, ": ", e.what()));
        }
    }
    return {current, trace, pairs};
}

}  // namespace dynadrag
