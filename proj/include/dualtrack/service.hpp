#pragma once

#include <atomic>
#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualtrack/config.hpp"
#include "dualtrack/engine.hpp"

namespace httplib {
class Server;
}

namespace dualtrack {

using json = nlohmann::json;

struct ApiResponse {
  int status = 200;
  json body;
};

/// Server-sent event frame: optional id line, event name, one data line.
std::string sse_frame(const std::string& event, const json& data, std::optional<std::int64_t> id = std::nullopt);

/// Where a stream reader is: next transcript seq and next bus event index.
struct StreamCursor {
  std::int64_t next_seq = 0;
  std::size_t next_event = 0;
};

/// Session API over one engine whose virtual clock follows wall time
/// (scaled by time_scale). All methods are thread-safe.
class Service {
 public:
  explicit Service(Settings settings, EngineParts parts = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  ApiResponse open_session(const json& body);
  ApiResponse post_turn(const std::string& session_id, const json& body);
  ApiResponse transcript(const std::string& session_id, const std::string& from_seq = "");
  ApiResponse plan(const std::string& session_id);
  ApiResponse memory(const std::string& session_id);
  ApiResponse close_session(const std::string& session_id);
  ApiResponse health();

  /// Validates the session and from_seq (empty means 0). Throws not_found or
  /// invalid_argument. Returns the cursor plus the frames owed right away
  /// (current plan view, then replayed entries).
  std::pair<StreamCursor, std::vector<std::string>> open_stream(const std::string& session_id,
                                                                const std::string& from_seq);
  /// Frames that became available since the cursor.
  std::vector<std::string> poll_stream(const std::string& session_id, StreamCursor& cursor);
  /// Blocks until something changed or the timeout passed.
  void wait_for_news(std::chrono::milliseconds timeout);

  /// Advances the engine to the current scaled wall time.
  void tick();
  Millis virtual_now() const;

  /// Starts the HTTP front door and the clock driver. Port 0 picks a free
  /// port. Returns the bound port; throws io when binding fails.
  int start();
  void stop();
  /// Blocks until stop() is called.
  void wait();
  bool running() const { return running_; }

  Engine& engine() { return *engine_; }
  std::mutex& mutex() { return mu_; }

 private:
  ApiResponse error(const std::exception& e) const;
  void check_open(const std::string& session_id) const;
  void routes();

  Settings settings_;
  std::unique_ptr<Engine> engine_;
  mutable std::mutex mu_;
  std::chrono::steady_clock::time_point wall_start_;
  Millis virtual_start_ = 0;
  std::map<std::string, std::map<std::string, json>> replies_;  // session -> client_turn_id -> body

  std::unique_ptr<httplib::Server> http_;
  std::thread http_thread_;
  std::thread driver_;
  std::atomic<bool> running_{false};
};

}  // namespace dualtrack
