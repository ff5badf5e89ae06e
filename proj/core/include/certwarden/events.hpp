#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace certwarden {

using FieldValue = std::variant<std::string, std::int64_t, double, bool>;
using Fields = std::vector<std::pair<std::string, FieldValue>>;

/// One line of the flow event stream:
/// {"id":N,"flow_id":F,"ts":<unix ms>,"event":"<name>", ...fields}
struct Event {
  std::uint64_t id = 0;
  std::uint64_t flow_id = 0;
  std::int64_t ts_ms = 0;
  std::string event;
  Fields fields;

  std::string to_json() const;
  const FieldValue* field(std::string_view name) const;
};

/// Ordered, replayable event stream. Ids are dense and start at 1; the last
/// `capacity` events are retained for reconnecting consumers.
class EventBus {
 public:
  using Sink = std::function<void(const Event&)>;

  explicit EventBus(std::size_t capacity = 10000) : capacity_(capacity) {}

  std::uint64_t publish(std::uint64_t flow_id, std::string event, Fields fields = {});
  /// Events with id > after, oldest first.
  std::vector<Event> since(std::uint64_t after, std::size_t max = SIZE_MAX) const;
  /// Blocks until an event with id > after exists or the timeout passes.
  bool wait_after(std::uint64_t after, std::chrono::milliseconds timeout) const;
  std::uint64_t last_id() const;
  void add_sink(Sink sink);

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::deque<Event> ring_;
  std::uint64_t next_id_ = 1;
  std::vector<Sink> sinks_;
};

/// Appends each event as one JSON line.
class JsonLinesFile {
 public:
  explicit JsonLinesFile(const std::filesystem::path& path);
  void write(const std::string& line);
  EventBus::Sink sink();

 private:
  std::mutex mu_;
  std::ofstream out_;
};

std::int64_t unix_millis(std::chrono::system_clock::time_point t = std::chrono::system_clock::now());

}  // namespace certwarden
