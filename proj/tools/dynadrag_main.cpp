#include "dynadrag/config.hpp"
#include "dynadrag/dataset.hpp"
#include "dynadrag/diffusion_backend.hpp"
#include "dynadrag/error.hpp"
#include "dynadrag/eval.hpp"
#include "dynadrag/image_io.hpp"
#include "dynadrag/log.hpp"
#include "dynadrag/motion_predictor.hpp"
#include "dynadrag/orchestrator.hpp"
#include "dynadrag/service.hpp"

#include <CLI11.hpp>
#include <httplib.h>

#include <csignal>
#include <cstdio>
#include <iostream>
#include <random>

namespace fs = std::filesystem;
using namespace dynadrag;

namespace {

struct EditArgs {
    fs::path image, points, mask, config, out, trace, intermediates;
    std::string backend, model_id, predictor = "straight:4", mode;
};

int cmd_edit(const EditArgs& a) {
    EditConfig cfg = a.config.empty() ? EditConfig{} : load_config(a.config);
    if (!a.backend.empty()) cfg.backend_kind = a.backend;
    if (!a.model_id.empty()) cfg.backend_model_id = a.model_id;
    if (!a.mode.empty()) cfg.selection_mode = parse_selection_mode(a.mode);
    cfg.validate();

    EditSession session;
    session.image = read_png(a.image);
    require(session.image.height() == session.image.width(),
            c10::str("image must be square, got ", session.image.width(), "x", session.image.height()));
    session.pairs = parse_points_json(nlohmann::json::parse(read_text(a.points)));
    session.mask = a.mask.empty() ? MaskImage::full(session.image.height(), session.image.width()) : read_mask_png(a.mask);
    session.config = cfg;
    session.backend = make_backend({cfg.backend_kind, cfg.backend_model_id, session.image.width(), cfg.seed});
    session.predictor = make_predictor(a.predictor);

    EditHooks hooks;
    if (!a.intermediates.empty()) {
        hooks.store_intermediate = [&](int k, const RgbImage& img) {
            char name[32];
            std::snprintf(name, sizeof(name), "iter_%05d.png", k);
            write_png(img, a.intermediates / name);
            return (a.intermediates / name).string();
        };
    }
    try {
        const EditResult result = run_edit(session, hooks);
        write_png(result.image, a.out);
        if (!a.trace.empty()) write_text(a.trace, to_json(result.trace).dump(2) + "\n");
        std::cout << "iterations: " << result.trace.records.size() << ", converged: " << (result.trace.converged ? "yes" : "no") << "\n";
        for (size_t i = 0; i < result.pairs.size(); ++i)
            std::cout << "pair " << i << ": handle (" << result.pairs[i].handle.x << ", " << result.pairs[i].handle.y << "), "
                      << result.pairs[i].remaining_distance() << " px from target\n";
    } catch (const EditFailed& e) {
        if (!a.trace.empty()) write_text(a.trace, to_json(e.partial_trace()).dump(2) + "\n");
        throw;
    }
    return 0;
}

struct EvalArgs {
    fs::path edited, target, json_out;
    std::string embedder = "builtin:thumbnail", perceptual, similarity;
};

int cmd_eval(const EvalArgs& a) {
    std::unique_ptr<EmbedderPlugin> embedder = a.embedder.empty() ? nullptr : make_embedder(a.embedder);
    std::unique_ptr<PerceptualPlugin> perceptual = a.perceptual.empty() ? nullptr : make_perceptual(a.perceptual);
    std::unique_ptr<EmbedderPlugin> similarity = a.similarity.empty() ? nullptr : make_embedder(a.similarity);
    const MetricReport report = evaluate(a.edited, a.target, {embedder.get(), perceptual.get(), similarity.get()});
    std::cout << report.to_table();
    if (!a.json_out.empty()) write_text(a.json_out, report.to_json().dump(2) + "\n");
    return 0;
}

struct TrainArgs {
    fs::path data, out, config;
    int steps = 200;
    int batch = 8;
    double lr = 1e-3;
    uint64_t seed = 0;
    int heatmap_radius = 4;
    bool sgd = false;
};

TrainingBatch load_batch(const std::vector<fs::path>& dirs, int heatmap_radius) {
    std::vector<EncodedInput> inputs;
    std::vector<FlowField> targets;
    for (const auto& d : dirs) {
        const TrainingSample s = read_sample(d);
        inputs.push_back(encode_input(s.start_frame, s.pairs, heatmap_radius));
        targets.push_back(s.gt_flow);
    }
    return TrainingBatch::stack(inputs, targets);
}

int cmd_mp_train(const TrainArgs& a) {
    const auto train = list_samples(a.data / "train");
    const auto test = list_samples(a.data / "test");
    require(!train.empty(), "no training records under " + (a.data / "train").string());
    const PredictorConfig cfg = a.config.empty() ? PredictorConfig{} : load_predictor_config(a.config);
    PredictorModel model(cfg, a.seed);
    PredictorTrainer trainer(model, {a.sgd ? TrainOptimizer::Sgd : TrainOptimizer::Adam, a.lr});
    std::mt19937_64 rng(a.seed);
    std::uniform_int_distribution<size_t> pick(0, train.size() - 1);
    for (int step = 0; step < a.steps; ++step) {
        std::vector<fs::path> dirs;
        for (int i = 0; i < a.batch; ++i) dirs.push_back(train[pick(rng)]);
        const double loss = trainer.train_step(load_batch(dirs, a.heatmap_radius));
        if (step % 10 == 0 || step + 1 == a.steps) std::cout << "step " << step << " loss " << loss << "\n";
    }
    if (!test.empty()) std::cout << "held-out mse " << trainer.evaluate(load_batch(test, a.heatmap_radius)) << "\n";
    model.save(a.out);
    return 0;
}

int cmd_mp_predict(const fs::path& checkpoint, const fs::path& sample, const fs::path& image, const fs::path& points, const fs::path& out,
                   int heatmap_radius) {
    const auto predictor = make_predictor(checkpoint.string());
    RgbImage img;
    std::vector<PointPair> pairs;
    if (!sample.empty()) {
        TrainingSample s = read_sample(sample);
        img = s.start_frame;
        pairs = s.pairs;
    } else {
        require(!image.empty() && !points.empty(), "mp-predict needs --sample or both --image and --points");
        img = read_png(image);
        pairs = parse_points_json(nlohmann::json::parse(read_text(points)));
    }
    const FlowField flow = predictor->predict(encode_input(img, pairs, heatmap_radius));
    write_flow(flow, out);
    for (size_t i = 0; i < pairs.size(); ++i) {
        const Point d = flow.at(pairs[i].handle);
        std::cout << "pair " << i << ": predicted step (" << d.x << ", " << d.y << ")\n";
    }
    return 0;
}

int cmd_synth_videos(const fs::path& out, int count, int64_t size, const std::string& kind, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int i = 0; i < count; ++i) {
        SyntheticMotion m;
        m.height = size;
        m.width = size;
        m.texture_seed = rng();
        if (kind == "rotate") {
            m.kind = SyntheticMotion::Kind::Rotation;
            m.center = {size / 2.0, size / 2.0};
            m.angle_per_frame = (unit(rng) < 0.5 ? -1 : 1) * (0.005 + 0.015 * unit(rng));
        } else if (kind == "translate") {
            m.side = std::max<int64_t>(8, size / 5);
            const double angle = 2.0 * M_PI * unit(rng);
            const double speed = 0.5 * static_cast<double>(size - m.side) / static_cast<double>(m.frames);
            m.velocity = {speed * std::cos(angle), speed * std::sin(angle)};
            const double tx = m.velocity.x * (m.frames - 1);
            const double ty = m.velocity.y * (m.frames - 1);
            const double span = static_cast<double>(size - m.side);
            m.origin = {std::max(0.0, -tx) + unit(rng) * (span - std::abs(tx)), std::max(0.0, -ty) + unit(rng) * (span - std::abs(ty))};
        } else {
            fail(ErrorKind::InvalidArgument, "unknown motion kind '" + kind + "' (translate or rotate)");
        }
        const std::string id = c10::str(kind, "-", i);
        write_clip(render_clip(m, id), out / id);
        write_text(out / id / "motion.json", m.to_json().dump(2) + "\n");
    }
    std::cout << "wrote " << count << " clips to " << out.string() << "\n";
    return 0;
}

httplib::Server* g_server = nullptr;

void on_signal(int) {
    if (g_server != nullptr) g_server->stop();
}

int cmd_serve(ServiceOptions options, int port, const std::string& host) {
    options = service_options_from_env(options, &port);
    EditService service(options);
    httplib::Server server;
    register_routes(server, service);
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    log::info("serving on ", host, ":", port, " (backend ", options.backend.kind, ", data ", options.data_dir.string(), ")");
    if (!server.listen(host, port)) fail(ErrorKind::Unavailable, c10::str("cannot listen on ", host, ":", port));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Drag-based image editing with motion prediction"};
    app.require_subcommand(1);
    std::string log_level;
    app.add_option("--log-level", log_level, "debug | info | warn | error | off");

    EditArgs edit;
    auto* e = app.add_subcommand("edit", "Run a drag edit on one image");
    e->add_option("--image", edit.image, "Input PNG")->required()->check(CLI::ExistingFile);
    e->add_option("--points", edit.points, "points.json")->required()->check(CLI::ExistingFile);
    e->add_option("--mask", edit.mask, "Editable-region mask PNG (default: everything)")->check(CLI::ExistingFile);
    e->add_option("--config", edit.config, "Config file (key = value)")->check(CLI::ExistingFile);
    e->add_option("--out", edit.out, "Output PNG")->required();
    e->add_option("--trace", edit.trace, "Write the edit trace as JSON");
    e->add_option("--save-intermediates", edit.intermediates, "Directory for per-iteration images");
    e->add_option("--backend", edit.backend, "toy | ldm (overrides backend.kind)");
    e->add_option("--model-id", edit.model_id, "ldm: 'mini' or a checkpoint path");
    e->add_option("--predictor", edit.predictor, "Predictor checkpoint, 'straight:<px>' or 'constant:<dx>,<dy>'");
    e->add_option("--mode", edit.mode, "Point selection: ADS | FDS | RS | OFF");

    EvalArgs ev;
    auto* v = app.add_subcommand("eval", "Compare edited images against targets");
    v->add_option("--edited", ev.edited, "Directory of edited PNGs")->required();
    v->add_option("--target", ev.target, "Directory of target PNGs (same file names)")->required();
    v->add_option("--embedder", ev.embedder, "Embedding plugin for the Frechet distance ('' disables)");
    v->add_option("--perceptual", ev.perceptual, "Perceptual distance plugin command");
    v->add_option("--similarity", ev.similarity, "Embedding plugin for paired cosine similarity");
    v->add_option("--report,--json", ev.json_out, "Write the report as JSON");

    TrainArgs tr;
    auto* t = app.add_subcommand("mp-train", "Train the motion predictor on dataset records");
    t->add_option("--data", tr.data, "Dataset root (train/ and test/)")->required();
    t->add_option("--out", tr.out, "Checkpoint path")->required();
    t->add_option("--config", tr.config, "Predictor config file");
    t->add_option("--steps", tr.steps, "Optimizer steps");
    t->add_option("--batch", tr.batch, "Batch size");
    t->add_option("--lr", tr.lr, "Learning rate");
    t->add_option("--seed", tr.seed, "Seed");
    t->add_option("--heatmap-radius", tr.heatmap_radius, "Heatmap radius in pixels");
    t->add_flag("--sgd", tr.sgd, "Plain gradient descent instead of Adam");

    fs::path p_ckpt, p_sample, p_image, p_points, p_out;
    int p_radius = 4;
    auto* p = app.add_subcommand("mp-predict", "Predict a flow field for a dataset record or an image with points");
    p->add_option("--ckpt,--checkpoint", p_ckpt, "Predictor checkpoint")->required();
    p->add_option("--sample", p_sample, "Dataset record directory")->check(CLI::ExistingDirectory);
    p->add_option("--image", p_image, "Input PNG")->check(CLI::ExistingFile);
    p->add_option("--points", p_points, "points.json")->check(CLI::ExistingFile);
    p->add_option("--out", p_out, "Output flow.f32")->required();
    p->add_option("--heatmap-radius", p_radius, "Heatmap radius in pixels");

    fs::path b_videos, b_out;
    BuildOptions build;
    auto* b = app.add_subcommand("build-dataset", "Build training records from video clips");
    b->add_option("--videos", b_videos, "Directory of clip directories")->required();
    b->add_option("--out", b_out, "Output root")->required();
    b->add_option("--extractor", build.extractor, "face | person | synthetic");
    b->add_option("--estimator", build.estimator, "external | synthetic");
    b->add_option("--extractor-cmd", build.extractor_command, "Region plugin command");
    b->add_option("--estimator-cmd", build.estimator_command, "Flow plugin command");
    b->add_option("--seed", build.seed, "Global seed");
    b->add_option("--samples-per-clip", build.samples_per_clip, "Samples drawn per clip");

    fs::path s_out;
    int s_count = 20;
    int64_t s_size = 64;
    std::string s_kind = "translate";
    uint64_t s_seed = 0;
    auto* sv = app.add_subcommand("synth-videos", "Render synthetic clips with known motion");
    sv->add_option("--out", s_out, "Output directory")->required();
    sv->add_option("--count", s_count, "Number of clips");
    sv->add_option("--size", s_size, "Frame size (square)");
    sv->add_option("--kind", s_kind, "translate | rotate");
    sv->add_option("--seed", s_seed, "Seed");

    ServiceOptions serve;
    int port = 8080;
    std::string host = "127.0.0.1";
    auto* srv = app.add_subcommand("serve", "Run the HTTP edit service");
    srv->add_option("--port", port, "Port (DYNADRAG_PORT overrides)");
    srv->add_option("--host", host, "Bind address");
    srv->add_option("--data-dir", serve.data_dir, "Session storage (DYNADRAG_DATA_DIR overrides)");
    srv->add_option("--backend", serve.backend.kind, "toy | ldm (DYNADRAG_BACKEND overrides)");
    srv->add_option("--model-id", serve.backend.model_id, "ldm: 'mini' or a checkpoint path");
    srv->add_option("--resolution", serve.backend.resolution, "Working resolution");
    srv->add_option("--predictor", serve.predictor, "Predictor spec (DYNADRAG_PREDICTOR overrides)");

    CLI11_PARSE(app, argc, argv);

    if (!log_level.empty()) {
        static const std::map<std::string, log::Level> levels = {
            {"debug", log::Level::Debug}, {"info", log::Level::Info}, {"warn", log::Level::Warn}, {"error", log::Level::Error}, {"off", log::Level::Off}};
        auto it = levels.find(log_level);
        if (it == levels.end()) {
            std::cerr << "unknown log level '" << log_level << "'\n";
            return 2;
        }
        log::set_level(it->second);
    }

    try {
        if (*e) return cmd_edit(edit);
        if (*v) return cmd_eval(ev);
        if (*t) return cmd_mp_train(tr);
        if (*p) return cmd_mp_predict(p_ckpt, p_sample, p_image, p_points, p_out, p_radius);
        if (*b) {
            const BuildReport r = build_dataset(b_videos, b_out, build);
            std::cout << "written " << r.written << ", rejected " << r.rejected << "\n";
            return 0;
        }
        if (*sv) return cmd_synth_videos(s_out, s_count, s_size, s_kind, s_seed);
        if (*srv) return cmd_serve(serve, port, host);
    } catch (const EditFailed& ex) {
        std::cerr << "error: " << ex.what() << " (partial trace has " << ex.partial_trace().records.size() << " iterations)\n";
        return 1;
    } catch (const Error& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 0;
}
