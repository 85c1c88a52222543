#pragma once

#include "dynadrag/config.hpp"
#include "dynadrag/diffusion_backend.hpp"
#include "dynadrag/motion_predictor.hpp"
#include "dynadrag/orchestrator.hpp"

#include <json.hpp>

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace httplib {
class Server;
}

namespace dynadrag {

enum class SessionStatus { Created, Finetuning, Ready, Editing, Done, Failed };

std::string to_string(SessionStatus status);
SessionStatus parse_session_status(const std::string& text);

/// True for created->finetuning->ready->editing->{done|failed}, editing->ready, finetuning->failed, and
/// done->editing (a new drag on a finished session).
bool is_allowed_transition(SessionStatus from, SessionStatus to);

struct SessionRecord {
    std::string session_id;
    SessionStatus status = SessionStatus::Created;
    int64_t width = 0;   // as uploaded
    int64_t height = 0;
    double scale = 1.0;    // working width / upload width
    double scale_y = 1.0;  // working height / upload height
    EditConfig config;
    int trace_cursor = -1;
    std::string last_edit_id;
    std::string error;

    nlohmann::json to_json() const;
    static SessionRecord from_json(const nlohmann::json& j);
};

struct ProgressReply {
    std::vector<IterationRecord> records;
    std::vector<PointPair> points;  // as submitted
    std::string status;  // editing | done | failed
    std::string error;
};

struct ServiceOptions {
    std::filesystem::path data_dir = "dynadrag-data";
    BackendSpec backend;
    std::string predictor = "straight:4";
    std::chrono::milliseconds long_poll_timeout{10000};
    /// Fine-tuning and edits run on worker threads when true; inline otherwise (tests).
    bool async = true;
};

/// Session store and edit runner. Every session lives in <data_dir>/sessions/<id>/; coordinates crossing
/// this interface are in upload pixel space.
class EditService {
public:
    explicit EditService(ServiceOptions options);
    ~EditService();

    EditService(const EditService&) = delete;
    EditService& operator=(const EditService&) = delete;

    std::string create_session(const std::vector<uint8_t>& image_bytes, const std::map<std::string, std::string>& overrides);
    SessionRecord get_session(const std::string& session_id) const;

    /// `mask_png` empty means all-editable.
    std::string start_edit(const std::string& session_id, const nlohmann::json& points,
                           const std::vector<uint8_t>& mask_png, const std::string& mode);

    ProgressReply get_progress(const std::string& session_id, const std::string& edit_id, int since_iteration,
                               std::optional<std::chrono::milliseconds> timeout = std::nullopt);

    /// PNG of I_{k+1} for iteration k; a negative k returns the final image.
    std::vector<uint8_t> iteration_image(const std::string& session_id, const std::string& edit_id, int iteration) const;

    /// Blocks until background work of a session is finished (tests, shutdown).
    void wait_idle(const std::string& session_id);

    const ServiceOptions& options() const { return options_; }

private:
    struct Session;
    struct EditState;

    std::shared_ptr<Session> find(const std::string& session_id) const;
    void load_existing();
    void persist(const Session& s) const;
    void set_status(Session& s, SessionStatus to);
    void run_finetune(std::shared_ptr<Session> s);
    void run_edit_job(std::shared_ptr<Session> s, std::shared_ptr<EditState> e, EditSession session);
    void launch(std::shared_ptr<Session> s, std::function<void()> job);

    ServiceOptions options_;
    std::shared_ptr<const FlowPredictor> predictor_;
    mutable std::mutex mu_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    uint64_t counter_ = 0;
};

/// Binds the HTTP routes onto `server`.
void register_routes(httplib::Server& server, EditService& service);

/// Reads DYNADRAG_BACKEND, DYNADRAG_DATA_DIR, DYNADRAG_PORT (and DYNADRAG_PREDICTOR) over the defaults.
ServiceOptions service_options_from_env(ServiceOptions base, int* port);

}  // namespace dynadrag
