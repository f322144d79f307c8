#pragma once

#include <functional>
#include <iostream>
#include <string>

namespace dclr::log {

using Sink = std::function<void(const std::string&)>;

inline Sink& warning_sink() {
  static Sink sink = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}

inline void warn(const std::string& msg) {
  if (warning_sink()) warning_sink()(msg);
}

/// Redirects warnings for the lifetime of the scope.
class ScopedSink {
 public:
  explicit ScopedSink(Sink s) : prev_(std::move(warning_sink())) { warning_sink() = std::move(s); }
  ~ScopedSink() { warning_sink() = std::move(prev_); }
  ScopedSink(const ScopedSink&) = delete;
  ScopedSink& operator=(const ScopedSink&) = delete;

 private:
  Sink prev_;
};

}  // namespace dclr::log
