#include "dynadrag/service.hpp"

#include "dynadrag/error.hpp"
#include "dynadrag/image_io.hpp"
#include "dynadrag/log.hpp"

#include <httplib.h>

#include <cstdio>
#include <cstdlib>
#include <random>

namespace dynadrag {
namespace fs = std::filesystem;

std::string to_string(SessionStatus status) {
    switch (status) {
        case SessionStatus::Created: return "created";
        case SessionStatus::Finetuning: return "finetuning";
        case SessionStatus::Ready: return "ready";
        case SessionStatus::Editing: return "editing";
        case SessionStatus::Done: return "done";
        case SessionStatus::Failed: return "failed";
    }
    return "unknown";
}

SessionStatus parse_session_status(const std::string& text) {
    for (auto s : {SessionStatus::Created, SessionStatus::Finetuning, SessionStatus::Ready, SessionStatus::Editing,
                   SessionStatus::Done, SessionStatus::Failed})
        if (to_string(s) == text) return s;
    fail(ErrorKind::InvalidArgument, "unknown session status '" + text + "'");
}

bool is_allowed_transition(SessionStatus from, SessionStatus to) {
    using S = SessionStatus;
    switch (from) {
        case S::Created: return to == S::Finetuning;
        case S::Finetuning: return to == S::Ready || to == S::Failed;
        case S::Ready: return to == S::Editing;
        case S::Editing: return to == S::Done || to == S::Failed || to == S::Ready;
        case S::Done: return to == S::Editing;
        case S::Failed: return false;
    }
    return false;
}

nlohmann::json SessionRecord::to_json() const {
    nlohmann::json cfg = nlohmann::json::object();
    for (const auto& [k, v] : parse_key_values(format_config(config))) cfg[k] = v;
    return {
        {"session_id", session_id},
        {"status", dynadrag::to_string(status)},
        {"width", width},
        {"height", height},
        {"scale", scale},
        {"scale_y", scale_y},
        {"config", cfg},
        {"trace_cursor", trace_cursor},
        {"last_edit_id", last_edit_id},
        {"error", error},
    };
}

SessionRecord SessionRecord::from_json(const nlohmann::json& j) {
    SessionRecord r;
    r.session_id = j.at("session_id").get<std::string>();
    r.status = parse_session_status(j.at("status").get<std::string>());
    r.width = j.at("width").get<int64_t>();
    r.height = j.at("height").get<int64_t>();
    r.scale = j.at("scale").get<double>();
    r.scale_y = j.value("scale_y", r.scale);
    for (const auto& [k, v] : j.at("config").items()) apply_config_entry(r.config, k, v.get<std::string>());
    r.trace_cursor = j.value("trace_cursor", -1);
    r.last_edit_id = j.value("last_edit_id", "");
    r.error = j.value("error", "");
    return r;
}

// ---------------------------------------------------------------------------------------------

struct EditService::EditState {
    std::string edit_id;
    std::vector<PointPair> points;  // upload space
    std::vector<IterationRecord> records;  // upload space
    std::string status = "editing";
    std::string error;
    bool converged = false;
};

struct EditService::Session {
    mutable std::mutex mu;
    std::condition_variable cv;
    SessionRecord record;
    fs::path dir;
    RgbImage image;  // working resolution
    std::shared_ptr<DiffusionBackend> backend;
    std::shared_ptr<const LoraAdapter> adapter;
    std::map<std::string, std::shared_ptr<EditState>> edits;
    int edit_counter = 0;
    bool busy = false;
    std::thread worker;
};

namespace {

std::string random_id(char prefix) {
    static std::mutex mu;
    static std::mt19937_64 rng{std::random_device{}()};
    std::lock_guard lock(mu);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%c%016llx", prefix, static_cast<unsigned long long>(rng()));
    return buf;
}

Point to_working(Point p, const SessionRecord& r) { return {p.x * r.scale, p.y * r.scale_y}; }
Point to_upload(Point p, const SessionRecord& r) { return {p.x / r.scale, p.y / r.scale_y}; }

IterationRecord record_to_upload(IterationRecord rec, const SessionRecord& r) {
    for (auto& p : rec.handle_positions) p = to_upload(p, r);
    for (auto& p : rec.predicted_next_positions) p = to_upload(p, r);
    return rec;
}

std::string image_url(const std::string& sid, const std::string& eid, int k) {
    return c10::str("/sessions/", sid, "/edits/", eid, "/iterations/", k, "/image");
}

fs::path iteration_path(const fs::path& edit_dir, int k) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "iter_%05d.png", k);
    return edit_dir / buf;
}

}  // namespace

EditService::EditService(ServiceOptions options) : options_(std::move(options)) {
    predictor_ = make_predictor(options_.predictor);
    fs::create_directories(options_.data_dir / "sessions");
    load_existing();
}

EditService::~EditService() {
    std::vector<std::shared_ptr<Session>> all;
    {
        std::lock_guard lock(mu_);
        for (auto& [id, s] : sessions_) all.push_back(s);
    }
    for (auto& s : all)
        if (s->worker.joinable()) s->worker.join();
}

std::shared_ptr<EditService::Session> EditService::find(const std::string& session_id) const {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) fail(ErrorKind::NotFound, "unknown session '" + session_id + "'");
    return it->second;
}

void EditService::persist(const Session& s) const { write_text(s.dir / "session.json", s.record.to_json().dump(2) + "\n"); }

void EditService::set_status(Session& s, SessionStatus to) {
    if (!is_allowed_transition(s.record.status, to))
        fail(ErrorKind::Conflict, "session " + s.record.session_id + " cannot go from " + to_string(s.record.status) + " to " + to_string(to));
    s.record.status = to;
    persist(s);
    s.cv.notify_all();
}

void EditService::launch(std::shared_ptr<Session> s, std::function<void()> job) {
    if (!options_.async) {
        job();
        return;
    }
    if (s->worker.joinable()) s->worker.join();
    s->worker = std::thread(std::move(job));
}

namespace {

std::shared_ptr<DiffusionBackend> open_backend(const BackendSpec& spec) {
    try {
        return make_backend(spec);
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::InvalidArgument) throw;
        fail(ErrorKind::Unavailable, std::string("diffusion backend unavailable: ") + e.what());
    } catch (const std::exception& e) {
        fail(ErrorKind::Unavailable, std::string("diffusion backend unavailable: ") + e.what());
    }
}

void write_edit_state(const fs::path& dir, const std::string& status, const std::string& error, bool converged) {
    write_text(dir / "state.json", nlohmann::json{{"status", status}, {"error", error}, {"converged", converged}}.dump() + "\n");
}

void write_edit_trace(const fs::path& dir, const std::vector<IterationRecord>& records) {
    auto a = nlohmann::json::array();
    for (const auto& r : records) a.push_back(to_json(r));
    write_text(dir / "trace.json", a.dump(2) + "\n");
}

}  // namespace

void EditService::load_existing() {
    const fs::path root = options_.data_dir / "sessions";
    for (const auto& entry : fs::directory_iterator(root)) {
        if (!entry.is_directory() || !fs::exists(entry.path() / "session.json")) continue;
        try {
            auto s = std::make_shared<Session>();
            s->dir = entry.path();
            s->record = SessionRecord::from_json(nlohmann::json::parse(read_text(s->dir / "session.json")));
            s->image = read_png(s->dir / "image.png");
            if (s->record.status == SessionStatus::Finetuning || s->record.status == SessionStatus::Editing ||
                s->record.status == SessionStatus::Created) {
                s->record.status = SessionStatus::Failed;
                s->record.error = "interrupted by a service restart";
                persist(*s);
            }
            if (s->record.status != SessionStatus::Failed) {
                s->backend = open_backend(options_.backend);
                if (fs::exists(s->dir / "adapter.pt")) {
                    s->adapter = std::make_shared<const LoraAdapter>(LoraAdapter::load(s->dir / "adapter.pt"));
                    s->backend->set_adapter(s->adapter);
                }
            }
            if (fs::exists(s->dir / "edits")) {
                for (const auto& e : fs::directory_iterator(s->dir / "edits")) {
                    auto st = std::make_shared<EditState>();
                    st->edit_id = e.path().filename().string();
                    if (fs::exists(e.path() / "points.json")) st->points = parse_points_json(nlohmann::json::parse(read_text(e.path() / "points.json")));
                    if (fs::exists(e.path() / "trace.json"))
                        for (const auto& r : nlohmann::json::parse(read_text(e.path() / "trace.json"))) st->records.push_back(iteration_record_from_json(r));
                    if (fs::exists(e.path() / "state.json")) {
                        const auto j = nlohmann::json::parse(read_text(e.path() / "state.json"));
                        st->status = j.value("status", "failed");
                        st->error = j.value("error", "");
                        st->converged = j.value("converged", false);
                    }
                    if (st->status == "editing") {
                        st->status = "failed";
                        st->error = "interrupted by a service restart";
                    }
                    s->edits[st->edit_id] = st;
                    s->edit_counter++;
                }
            }
            std::lock_guard lock(mu_);
            sessions_[s->record.session_id] = s;
        } catch (const std::exception& e) {
            log::warn("skipping unreadable session directory ", entry.path().string(), ": ", e.what());
        }
    }
}

std::string EditService::create_session(const std::vector<uint8_t>& image_bytes, const std::map<std::string, std::string>& overrides) {
    const RgbImage upload = decode_png(image_bytes);
    EditConfig cfg;
    cfg.backend_kind = options_.backend.kind;
    cfg.backend_model_id = options_.backend.model_id;
    for (const auto& [k, v] : overrides) apply_config_entry(cfg, k, v);
    cfg.validate();

    auto s = std::make_shared<Session>();
    s->backend = open_backend(options_.backend);
    const int64_t res = s->backend->resolution();
    s->record.session_id = random_id('s');
    s->record.width = upload.width();
    s->record.height = upload.height();
    s->record.scale = static_cast<double>(res) / static_cast<double>(upload.width());
    s->record.scale_y = static_cast<double>(res) / static_cast<double>(upload.height());
    s->record.config = cfg;
    s->image = (upload.width() == res && upload.height() == res) ? upload : resize(upload, res, res);
    if (s->record.scale != 1.0 || s->record.scale_y != 1.0)
        log::info("session ", s->record.session_id, ": resized ", upload.width(), "x", upload.height(), " upload to ", res, "x", res);

    s->dir = options_.data_dir / "sessions" / s->record.session_id;
    fs::create_directories(s->dir);
    write_file(s->dir / "upload.png", image_bytes);
    write_png(s->image, s->dir / "image.png");
    save_config(cfg, s->dir / "config.toml");
    {
        std::lock_guard lock(s->mu);
        persist(*s);
        set_status(*s, SessionStatus::Finetuning);
        s->busy = true;
    }
    {
        std::lock_guard lock(mu_);
        sessions_[s->record.session_id] = s;
    }
    launch(s, [this, s] { run_finetune(s); });
    return s->record.session_id;
}

void EditService::run_finetune(std::shared_ptr<Session> s) {
    try {
        const EditConfig& cfg = s->record.config;
        const LoraOptions opts{cfg.lora_rank, cfg.lora_steps, cfg.lora_learning_rate, 1e-2, cfg.seed};
        auto adapter = std::make_shared<const LoraAdapter>(s->backend->finetune_identity_lora(s->image, opts));
        s->backend->set_adapter(adapter);
        adapter->save(s->dir / "adapter.pt");
        std::lock_guard lock(s->mu);
        s->adapter = adapter;
        set_status(*s, SessionStatus::Ready);
        s->busy = false;
        s->cv.notify_all();
    } catch (const std::exception& e) {
        log::error("session ", s->record.session_id, ": fine-tuning failed: ", e.what());
        std::lock_guard lock(s->mu);
        s->record.error = e.what();
        set_status(*s, SessionStatus::Failed);
        s->busy = false;
        s->cv.notify_all();
    }
}

SessionRecord EditService::get_session(const std::string& session_id) const {
    auto s = find(session_id);
    std::lock_guard lock(s->mu);
    return s->record;
}

std::string EditService::start_edit(const std::string& session_id, const nlohmann::json& points, const std::vector<uint8_t>& mask_png,
                                    const std::string& mode) {
    auto s = find(session_id);
    std::vector<PointPair> upload_pairs = parse_points_json(points);
    const int64_t W = s->record.width;
    const int64_t H = s->record.height;
    for (size_t i = 0; i < upload_pairs.size(); ++i) {
        for (const auto& [name, p] : {std::pair{"handle", upload_pairs[i].handle}, std::pair{"target", upload_pairs[i].target}}) {
            if (!in_bounds(p, W, H))
                fail(ErrorKind::InvalidArgument, c10::str("point ", i, ": ", name, " (", p.x, ", ", p.y, ") lies outside the ", W, "x", H, " image"));
        }
    }

    MaskImage mask;
    const int64_t res = s->image.height();
    if (mask_png.empty()) {
        mask = MaskImage::full(res, res);
    } else {
        const MaskImage m = decode_mask_png(mask_png);
        require(m.width() == W && m.height() == H, c10::str("mask is ", m.width(), "x", m.height(), ", image is ", W, "x", H));
        mask = (m.width() == res && m.height() == res) ? m : resize_mask(m, res, res);
    }

    EditSession session;
    std::shared_ptr<EditState> e;
    {
        std::lock_guard lock(s->mu);
        if (s->busy || (s->record.status != SessionStatus::Ready && s->record.status != SessionStatus::Done))
            fail(ErrorKind::Conflict, "session " + session_id + " is busy (" + to_string(s->record.status) + ")");
        session.config = s->record.config;
        if (!mode.empty()) session.config.selection_mode = parse_selection_mode(mode);
        for (const auto& p : upload_pairs) session.pairs.push_back(PointPair::from_user(to_working(p.handle, s->record), to_working(p.target, s->record)));
        session.image = s->image;
        session.mask = mask;
        session.backend = s->backend;
        session.predictor = predictor_;
        session.validate();

        e = std::make_shared<EditState>();
        e->edit_id = c10::str("e", ++s->edit_counter);
        e->points = upload_pairs;
        s->edits[e->edit_id] = e;
        s->record.last_edit_id = e->edit_id;
        s->record.trace_cursor = -1;
        s->record.error.clear();
        set_status(*s, SessionStatus::Editing);
        s->busy = true;
    }
    const fs::path dir = s->dir / "edits" / e->edit_id;
    fs::create_directories(dir);
    write_text(dir / "points.json", points_to_json(upload_pairs).dump(2) + "\n");
    write_mask_png(mask, dir / "mask.png");
    write_edit_state(dir, "editing", "", false);
    launch(s, [this, s, e, session] { run_edit_job(s, e, session); });
    return e->edit_id;
}

void EditService::run_edit_job(std::shared_ptr<Session> s, std::shared_ptr<EditState> e, EditSession session) {
    const fs::path dir = s->dir / "edits" / e->edit_id;
    const std::string sid = s->record.session_id;
    EditHooks hooks;
    hooks.adapter = s->adapter;
    hooks.store_intermediate = [&](int k, const RgbImage& img) {
        write_png(img, iteration_path(dir, k));
        return image_url(sid, e->edit_id, k);
    };
    hooks.on_iteration = [&](const IterationRecord& rec) {
        std::lock_guard lock(s->mu);
        e->records.push_back(record_to_upload(rec, s->record));
        s->record.trace_cursor = rec.iteration;
        write_edit_trace(dir, e->records);
        persist(*s);
        s->cv.notify_all();
    };
    try {
        EditResult result = run_edit(session, hooks);
        RgbImage final_image = result.image;
        if (s->record.width != final_image.width() || s->record.height != final_image.height())
            final_image = resize(final_image, s->record.height, s->record.width);
        write_png(final_image, dir / "final.png");
        std::lock_guard lock(s->mu);
        e->status = "done";
        e->converged = result.trace.converged;
        write_edit_state(dir, e->status, "", e->converged);
        set_status(*s, SessionStatus::Done);
        s->busy = false;
        s->cv.notify_all();
    } catch (const std::exception& ex) {
        log::error("session ", sid, " edit ", e->edit_id, " failed: ", ex.what());
        std::lock_guard lock(s->mu);
        e->status = "failed";
        e->error = ex.what();
        write_edit_state(dir, e->status, e->error, false);
        s->record.error = ex.what();
        set_status(*s, SessionStatus::Failed);
        s->busy = false;
        s->cv.notify_all();
    }
}

ProgressReply EditService::get_progress(const std::string& session_id, const std::string& edit_id, int since_iteration,
                                        std::optional<std::chrono::milliseconds> timeout) {
    auto s = find(session_id);
    std::unique_lock lock(s->mu);
    auto it = s->edits.find(edit_id);
    if (it == s->edits.end()) fail(ErrorKind::NotFound, "unknown edit '" + edit_id + "' in session " + session_id);
    const auto e = it->second;
    auto has_news = [&] {
        return e->status != "editing" || (!e->records.empty() && e->records.back().iteration > since_iteration);
    };
    s->cv.wait_for(lock, timeout.value_or(options_.long_poll_timeout), has_news);
    ProgressReply reply;
    for (const auto& r : e->records)
        if (r.iteration > since_iteration) reply.records.push_back(r);
    reply.points = e->points;
    reply.status = e->status;
    reply.error = e->error;
    return reply;
}

std::vector<uint8_t> EditService::iteration_image(const std::string& session_id, const std::string& edit_id, int iteration) const {
    auto s = find(session_id);
    {
        std::lock_guard lock(s->mu);
        if (!s->edits.contains(edit_id)) fail(ErrorKind::NotFound, "unknown edit '" + edit_id + "' in session " + session_id);
    }
    const fs::path dir = s->dir / "edits" / edit_id;
    const fs::path path = iteration < 0 ? dir / "final.png" : iteration_path(dir, iteration);
    if (!fs::exists(path))
        fail(ErrorKind::NotFound, iteration < 0 ? std::string("final image not available yet") : c10::str("no image for iteration ", iteration));
    return read_file(path);
}

void EditService::wait_idle(const std::string& session_id) {
    auto s = find(session_id);
    {
        std::unique_lock lock(s->mu);
        s->cv.wait(lock, [&] { return !s->busy; });
    }
    if (s->worker.joinable()) s->worker.join();
}

// ---------------------------------------------------------------------------------------------
// HTTP

namespace {

int http_status(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidArgument:
        case ErrorKind::Encoding: return 400;
        case ErrorKind::NotFound: return 404;
        case ErrorKind::Conflict: return 409;
        case ErrorKind::Unavailable: return 503;
        case ErrorKind::Numerical:
        case ErrorKind::Io: return 500;
    }
    return 500;
}

void reply_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
    try {
        f();
    } catch (const Error& e) {
        reply_json(res, http_status(e.kind()), {{"error", e.what()}});
    } catch (const nlohmann::json::exception& e) {
        reply_json(res, 400, {{"error", std::string("malformed JSON: ") + e.what()}});
    } catch (const std::exception& e) {
        reply_json(res, 500, {{"error", e.what()}});
    }
}

std::vector<uint8_t> base64_decode(const std::string& in) {
    static const std::string chars = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string data = in;
    if (auto comma = data.find(','); data.rfind("data:", 0) == 0 && comma != std::string::npos) data = data.substr(comma + 1);
    std::vector<uint8_t> out;
    uint32_t buf = 0;
    int bits = 0;
    for (char c : data) {
        if (c == '=' || c == '\n' || c == '\r' || c == ' ') continue;
        const auto pos = chars.find(c);
        if (pos == std::string::npos) fail(ErrorKind::Encoding, "mask is not valid base64");
        buf = (buf << 6) | static_cast<uint32_t>(pos);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<uint8_t>((buf >> bits) & 0xFF));
        }
    }
    return out;
}

int parse_int(const std::string& s, const char* what) {
    try {
        size_t used = 0;
        const int v = std::stoi(s, &used);
        if (used == s.size()) return v;
    } catch (const std::logic_error&) {
    }
    fail(ErrorKind::InvalidArgument, std::string(what) + " must be an integer, got '" + s + "'");
}

}  // namespace

void register_routes(httplib::Server& server, EditService& service) {
    server.Post("/sessions", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            require(req.has_file("image"), "multipart field 'image' is required");
            const auto& file = req.get_file_value("image");
            std::map<std::string, std::string> overrides;
            if (req.has_file("config")) overrides = parse_key_values(req.get_file_value("config").content);
            const std::string id = service.create_session(std::vector<uint8_t>(file.content.begin(), file.content.end()), overrides);
            reply_json(res, 201, {{"session_id", id}});
        });
    });

    server.Get("/sessions/:id", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { reply_json(res, 200, service.get_session(req.path_params.at("id")).to_json()); });
    });

    server.Post("/sessions/:id/edits", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto body = nlohmann::json::parse(req.body);
            require(body.is_object() && body.contains("points"), "request body needs \"points\"");
            std::vector<uint8_t> mask;
            if (body.contains("mask") && body["mask"].is_string()) mask = base64_decode(body["mask"].get<std::string>());
            const std::string mode = body.value("mode", "");
            const std::string eid = service.start_edit(req.path_params.at("id"), body["points"], mask, mode);
            reply_json(res, 202, {{"edit_id", eid}});
        });
    });

    server.Get("/sessions/:id/edits/:eid/progress", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const int since = req.has_param("since") ? parse_int(req.get_param_value("since"), "since") : -1;
            const auto reply = service.get_progress(req.path_params.at("id"), req.path_params.at("eid"), since);
            auto records = nlohmann::json::array();
            for (const auto& r : reply.records) records.push_back(to_json(r));
            nlohmann::json body = {{"records", records}, {"status", reply.status}, {"points", points_to_json(reply.points)}};
            if (!reply.error.empty()) body["error"] = reply.error;
            reply_json(res, 200, body);
        });
    });

    server.Get("/sessions/:id/edits/:eid/iterations/:k/image", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const std::string k = req.path_params.at("k");
            const int iteration = k == "final" ? -1 : parse_int(k, "iteration");
            require(k == "final" || iteration >= 0, "iteration must be >= 0 or 'final'");
            const auto bytes = service.iteration_image(req.path_params.at("id"), req.path_params.at("eid"), iteration);
            res.status = 200;
            res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
        });
    });
}

ServiceOptions service_options_from_env(ServiceOptions base, int* port) {
    if (const char* v = std::getenv("DYNADRAG_BACKEND"); v != nullptr && *v != '\0') {
        const std::string spec = v;
        const auto colon = spec.find(':');
        base.backend.kind = spec.substr(0, colon);
        if (colon != std::string::npos) base.backend.model_id = spec.substr(colon + 1);
    }
    if (const char* v = std::getenv("DYNADRAG_DATA_DIR"); v != nullptr && *v != '\0') base.data_dir = v;
    if (const char* v = std::getenv("DYNADRAG_PREDICTOR"); v != nullptr && *v != '\0') base.predictor = v;
    if (const char* v = std::getenv("DYNADRAG_PORT"); v != nullptr && *v != '\0' && port != nullptr) *port = parse_int(v, "DYNADRAG_PORT");
    return base;
}

}  // namespace dynadrag
