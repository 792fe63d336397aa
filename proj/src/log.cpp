#include "upcycle/log.hpp"

#include <cstdio>
#include <mutex>

namespace upcycle {

namespace {

void default_sink(LogLevel level, const std::string& message) {
  if (level == LogLevel::warning) {
    std::fprintf(stderr, "warning: %s\n", message.c_str());
  } else if (level == LogLevel::error) {
    std::fprintf(stderr, "error: %s\n", message.c_str());
  }
}

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

LogSink& sink() {
  static LogSink s = default_sink;
  return s;
}

}  // namespace

LogSink set_log_sink(LogSink next) {
  std::lock_guard lock(sink_mutex());
  LogSink prev = std::move(sink());
  sink() = next ? std::move(next) : LogSink(default_sink);
  return prev;
}

void log_message(LogLevel level, const std::string& message) {
  std::lock_guard lock(sink_mutex());
  sink()(level, message);
}

}  // namespace upcycle
