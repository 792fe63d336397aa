#pragma once

#include <functional>
#include <string>

namespace upcycle {

enum class LogLevel { debug, info, warning, error };

using LogSink = std::function<void(LogLevel, const std::string&)>;

// Replaces the process-wide sink; returns the previous one. The default sink
// writes warnings and errors to stderr and drops the rest.
LogSink set_log_sink(LogSink sink);
void log_message(LogLevel level, const std::string& message);

inline void log_info(const std::string& m) { log_message(LogLevel::info, m); }
inline void log_warning(const std::string& m) { log_message(LogLevel::warning, m); }

}  // namespace upcycle
