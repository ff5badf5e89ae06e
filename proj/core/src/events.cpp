#include "certwarden/events.hpp"

#include <stdexcept>

#include "json.hpp"

namespace certwarden {

std::int64_t unix_millis(std::chrono::system_clock::time_point t) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(t.time_since_epoch()).count();
}

std::string Event::to_json() const {
  nlohmann::ordered_json j;
  j["id"] = id;
  j["flow_id"] = flow_id;
  j["ts"] = ts_ms;
  j["event"] = event;
  for (const auto& [k, v] : fields) {
    std::visit([&, &key = k](const auto& value) { j[key] = value; }, v);
  }
  return j.dump();
}

const FieldValue* Event::field(std::string_view name) const {
  for (const auto& [k, v] : fields) {
    if (k == name) return &v;
  }
  return nullptr;
}

std::uint64_t EventBus::publish(std::uint64_t flow_id, std::string event, Fields fields) {
  Event e;
  std::vector<Sink> sinks;
  {
    std::lock_guard lock(mu_);
    e.id = next_id_++;
    e.flow_id = flow_id;
    e.ts_ms = unix_millis();
    e.event = std::move(event);
    e.fields = std::move(fields);
    ring_.push_back(e);
    while (ring_.size() > capacity_) ring_.pop_front();
    sinks = sinks_;
  }
  cv_.notify_all();
  for (const auto& s : sinks) s(e);
  return e.id;
}

std::vector<Event> EventBus::since(std::uint64_t after, std::size_t max) const {
  std::lock_guard lock(mu_);
  std::vector<Event> out;
  for (const auto& e : ring_) {
    if (e.id <= after) continue;
    if (out.size() >= max) break;
    out.push_back(e);
  }
  return out;
}

bool EventBus::wait_after(std::uint64_t after, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mu_);
  return cv_.wait_for(lock, timeout, [&] { return next_id_ - 1 > after; });
}

std::uint64_t EventBus::last_id() const {
  std::lock_guard lock(mu_);
  return next_id_ - 1;
}

void EventBus::add_sink(Sink sink) {
  std::lock_guard lock(mu_);
  sinks_.push_back(std::move(sink));
}

JsonLinesFile::JsonLinesFile(const std::filesystem::path& path) : out_(path, std::ios::app) {
  if (!out_) throw std::runtime_error("cannot open " + path.string());
}

void JsonLinesFile::write(const std::string& line) {
  std::lock_guard lock(mu_);
  out_ << line << '\n';
  out_.flush();
}

EventBus::Sink JsonLinesFile::sink() {
  return [this](const Event& e) { write(e.to_json()); };
}

}  // namespace certwarden
