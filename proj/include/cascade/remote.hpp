#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>

// engine.hpp (via Eigen) must be parsed before httplib.h: httplib pulls in
// <resolv.h>, whose `_res` compat macro mangles Eigen's declarations.
#include "cascade/engine.hpp"
#include "cascade/trace.hpp"

#include <httplib.h>
#include <json.hpp>

namespace cascade {

inline constexpr const char* kPredictPath = "/v1/remote/predict";
inline constexpr const char* kHealthPath = "/healthz";

struct ClientConfig {
  std::string endpoint;       // e.g. "http://127.0.0.1:8080"
  double timeout_s = 30.0;
  FallbackPolicy fallback = FallbackPolicy::Error;
};

/// Blocking client for the remote prediction protocol. One instance per
/// cascade worker; instances are independent and cheap.
class HttpRemoteClient {
 public:
  explicit HttpRemoteClient(ClientConfig config)
      : config_(std::move(config)), http_(config_.endpoint) {
    if (!(config_.timeout_s > 0.0)) throw RemoteError(RemoteErrorKind::Other, "timeout must be > 0");
    const auto usec = static_cast<time_t>(config_.timeout_s * 1e6);
    http_.set_connection_timeout(0, usec);
    http_.set_read_timeout(0, usec);
    http_.set_write_timeout(0, usec);
  }

  const ClientConfig& config() const { return config_; }

  /// POSTs {id, payload} and returns the remote observation. The measured
  /// wall-clock round trip replaces any latency the service reported.
  ModelObservation predict(const std::string& id, const json& payload) {
    json request{{"id", id}, {"payload", payload}};
    const auto start = std::chrono::steady_clock::now();
    httplib::Result result = http_.Post(kPredictPath, request.dump(), "application/json");
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;

    if (!result) {
      switch (result.error()) {
        case httplib::Error::ConnectionTimeout:
        case httplib::Error::Read:
        case httplib::Error::Write:
          throw RemoteError(RemoteErrorKind::Timeout,
                            "remote timeout for \"" + id + "\": " + httplib::to_string(result.error()));
        case httplib::Error::Connection:
        case httplib::Error::BindIPAddress:
        case httplib::Error::ProxyConnection:
          throw RemoteError(RemoteErrorKind::ConnectionFailed,
                            "cannot reach " + config_.endpoint + ": " +
                                httplib::to_string(result.error()));
        default:
          throw RemoteError(RemoteErrorKind::Other,
                            "remote request failed: " + httplib::to_string(result.error()));
      }
    }
    if (result->status == 404) {
      throw RemoteError(RemoteErrorKind::UnknownInput, error_message(*result, id));
    }
    if (result->status != 200) {
      throw RemoteError(RemoteErrorKind::HttpStatus,
                        "remote returned status " + std::to_string(result->status) + " for \"" +
                            id + "\"");
    }
    ModelObservation obs;
    try {
      obs = parse_observation(json::parse(result->body), "remote");
    } catch (const std::exception& e) {
      throw RemoteError(RemoteErrorKind::MalformedResponse,
                        "malformed remote response for \"" + id + "\": " + e.what());
    }
    obs.latency_s = elapsed.count();
    return obs;
  }

 private:
  static std::string error_message(const httplib::Response& response, const std::string& id) {
    try {
      json j = json::parse(response.body);
      if (j.contains("error") && j["error"].is_string()) return j["error"].get<std::string>();
    } catch (...) {
    }
    return "unknown input \"" + id + "\"";
  }

  ClientConfig config_;
  httplib::Client http_;
};

inline ModelObservation remote_predict(const ClientConfig& config, const std::string& id,
                                       const json& payload) {
  HttpRemoteClient client(config);
  return client.predict(id, payload);
}

/// Remote supplier backed by the HTTP client, for run_cascade. The trace
/// carries no raw model inputs, so the payload is an empty object.
inline RemoteSupplier http_remote_supplier(HttpRemoteClient& client) {
  return [&client](const TraceRecord& record) {
    return client.predict(record.id, json::object());
  };
}

struct StubConfig {
  std::string host = "127.0.0.1";
  int port = 0;  // 0 = pick a free port
  std::string trace_path;
  double latency_s = 0.0;
  std::uint64_t seed = 0;  // reserved for simulated jitter
};

/// Serves a trace's remote observations over the prediction protocol.
/// Responses are a pure function of (config, id): the same id always yields
/// the same body, plus the configured artificial latency.
class StubServer {
 public:
  explicit StubServer(StubConfig config) : config_(std::move(config)) {
    if (config_.latency_s < 0.0) {
      throw RemoteError(RemoteErrorKind::Other, "stub latency must be >= 0");
    }
    const TraceDataset dataset = load_trace(config_.trace_path);
    for (const auto& record : dataset.records) {
      responses_.emplace(record.id, record.remote
                                        ? std::optional<std::string>(
                                              observation_to_json(*record.remote).dump())
                                        : std::nullopt);
    }
    install_routes();
  }

  /// Binds and serves on a background thread; returns once ready.
  void start() {
    bind();
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  /// Binds and serves on the calling thread until stop() is called.
  void run() {
    bind();
    server_.listen_after_bind();
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  const StubConfig& config() const { return config_; }

  ~StubServer() { stop(); }

 private:
  void bind() {
    // SO_REUSEADDR only: allow quick restarts, but a port already served by
    // another process must fail instead of silently sharing via SO_REUSEPORT.
    server_.set_socket_options([](socket_t sock) {
      int yes = 1;
      ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes),
                   sizeof(yes));
    });
    if (config_.port == 0) {
      port_ = server_.bind_to_any_port(config_.host);
      if (port_ < 0) {
        throw RemoteError(RemoteErrorKind::Other, "cannot bind to any port on " + config_.host);
      }
    } else {
      if (!server_.bind_to_port(config_.host, config_.port)) {
        throw RemoteError(RemoteErrorKind::Other,
                          "cannot bind " + config_.host + ":" + std::to_string(config_.port));
      }
      port_ = config_.port;
    }
  }

  void install_routes() {
    server_.Post(kPredictPath, [this](const httplib::Request& request, httplib::Response& response) {
      std::string id;
      try {
        json j = json::parse(request.body);
        if (!j.contains("id") || !j["id"].is_string()) {
          throw std::runtime_error("missing \"id\"");
        }
        id = j["id"].get<std::string>();
      } catch (const std::exception& e) {
        response.status = 400;
        response.set_content(json{{"error", std::string("malformed request: ") + e.what()}}.dump(),
                             "application/json");
        return;
      }
      if (config_.latency_s > 0.0) {
        std::this_thread::sleep_for(std::chrono::duration<double>(config_.latency_s));
      }
      auto it = responses_.find(id);
      if (it == responses_.end()) {
        response.status = 404;
        response.set_content(json{{"error", "unknown input \"" + id + "\""}}.dump(),
                             "application/json");
        return;
      }
      if (!it->second) {
        response.status = 404;
        response.set_content(
            json{{"error", "no remote observation for input \"" + id + "\""}}.dump(),
            "application/json");
        return;
      }
      response.set_content(*it->second, "application/json");
    });
    server_.Get(kHealthPath, [](const httplib::Request&, httplib::Response& response) {
      response.set_content(json{{"status", "ok"}}.dump(), "application/json");
    });
  }

  StubConfig config_;
  std::unordered_map<std::string, std::optional<std::string>> responses_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace cascade
