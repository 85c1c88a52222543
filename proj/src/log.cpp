#include "dynadrag/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>

namespace dynadrag::log {
namespace {

Level initial_level() {
    const char* env = std::getenv("DYNADRAG_LOG");
    if (env == nullptr) return Level::Info;
    std::string v(env);
    if (v == "debug") return Level::Debug;
    if (v == "warn") return Level::Warn;
    if (v == "error") return Level::Error;
    if (v == "off") return Level::Off;
    return Level::Info;
}

std::atomic<Level> g_level{initial_level()};
std::mutex g_mu;

const char* tag(Level l) {
    switch (l) {
        case Level::Debug: return "debug";
        case Level::Info: return "info";
        case Level::Warn: return "warn";
        case Level::Error: return "error";
        default: return "";
    }
}

}  // namespace

void set_level(Level level) { g_level = level; }
Level level() { return g_level; }

void write(Level l, const std::string& msg) {
    std::lock_guard lock(g_mu);
    std::cerr << "[dynadrag:" << tag(l) << "] " << msg << '\n';
}

}  // namespace dynadrag::log
