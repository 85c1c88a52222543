#pragma once

#include <c10/util/StringUtil.h>

#include <string>

namespace dynadrag::log {

enum class Level { Debug = 0, Info = 1, Warn = 2, Error = 3, Off = 4 };

void set_level(Level level);
Level level();

void write(Level level, const std::string& msg);

template <typename... Args>
void debug(const Args&... args) {
    if (level() <= Level::Debug) write(Level::Debug, c10::str(args...));
}

template <typename... Args>
void info(const Args&... args) {
    if (level() <= Level::Info) write(Level::Info, c10::str(args...));
}

template <typename... Args>
void warn(const Args&... args) {
    if (level() <= Level::Warn) write(Level::Warn, c10::str(args...));
}

template <typename... Args>
void error(const Args&... args) {
    if (level() <= Level::Error) write(Level::Error, c10::str(args...));
}

}  // namespace dynadrag::log
