#pragma once

// HTTP scoring and best-of-N selection service.
//
//   POST /score  {context, response}                 -> {score}
//   POST /select {context, candidates[]} | {context, n, seed?}
//                -> {chosen_index, chosen_text, scores[], latency_ms, model_version}
//   GET  /healthz                                    -> {status, model_version}
//
// Errors are {"error": {"code", "message"}} with a 4xx/5xx status.

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

#include "engage/reward.hpp"
#include "engage/selector.hpp"
#include "json.hpp"

namespace engage::gateway {

struct ServiceConfig {
  std::string listen_address = "127.0.0.1:8080";
  std::string model_path;
  std::optional<std::string> generator_backend;
  int default_n = 4;
  int request_timeout_ms = 10000;
  std::size_t max_body_bytes = 1u << 20;
  int threads = 8;
  bool hot_reload = false;  // SIGHUP re-reads model_path

  // Throws Error(kConfig).
  void check() const;
};

nlohmann::json to_json(const ServiceConfig& config);

// Field name -> textual value, e.g. {"default_n", "8"}.
using ConfigLayer = std::map<std::string, std::string>;

// Later layers win: defaults < file < env < flags. Unknown keys and bad
// values throw Error(kConfig).
ServiceConfig resolve_service_config(const ConfigLayer& file, const ConfigLayer& env,
                                     const ConfigLayer& flags);

// ENGAGE_LISTEN_ADDRESS, ENGAGE_MODEL_PATH, ... for every ServiceConfig field.
ConfigLayer env_layer(const std::function<const char*(const char*)>& getenv);

struct HostPort {
  std::string host;
  int port = 0;
};

// "host:port"; port 0 asks the OS for a free port.
HostPort parse_listen_address(std::string_view address);

struct Reply {
  int status = 200;
  nlohmann::json body;
};

inline constexpr int kMaxSelectN = 64;

class Service {
 public:
  Service(ServiceConfig config, std::shared_ptr<const reward::TrainedScorer> model,
          std::shared_ptr<const selector::Generator> generator = nullptr);
  ~Service();

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Loads the model and connects the generator backend named by the config.
  static std::unique_ptr<Service> from_config(const ServiceConfig& config);

  // Request handlers, usable without a socket.
  Reply score(std::string_view body) const;
  Reply select(std::string_view body) const;
  Reply healthz() const;

  // Binds the listen address and returns the bound port. Throws Error(kIo).
  int bind();
  // Serves until stop(); in-flight requests complete before it returns.
  void run();
  void stop();

  // Re-reads config.model_path and swaps the model atomically: each request
  // sees exactly one model version.
  void reload();
  void swap_model(std::shared_ptr<const reward::TrainedScorer> model);
  std::string model_version() const;

  const ServiceConfig& config() const { return config_; }

 private:
  struct Loaded;
  struct Server;

  std::shared_ptr<const Loaded> current() const;

  ServiceConfig config_;
  std::shared_ptr<const selector::Generator> generator_;
  mutable std::mutex mutex_;
  std::shared_ptr<const Loaded> loaded_;
  std::unique_ptr<Server> server_;
};

}  // namespace engage::gateway
