#include "engage/gateway.hpp"

#include <array>
#include <cctype>
#include <charconv>

#include "engage/error.hpp"
#include "engage/remote.hpp"
#include "httplib.h"

namespace engage::gateway {

using nlohmann::json;

namespace {

Reply error_reply(int status, std::string_view code, std::string_view message) {
  return Reply{status, json{{"error", {{"code", code}, {"message", message}}}}};
}

Reply bad_request(std::string_view message) { return error_reply(400, "invalid_request", message); }

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kEmptyCandidates:
    case ErrorCode::kValidation:
      return 400;
    case ErrorCode::kTimeout:
      return 504;
    case ErrorCode::kConnectionRefused:
    case ErrorCode::kBadStatus:
    case ErrorCode::kMalformedResponse:
    case ErrorCode::kGeneratorFailed:
      return 502;
    default:
      return 500;
  }
}

Reply from_error(const Error& e) { return error_reply(status_for(e.code()), to_string(e.code()), e.what()); }

// Parses a JSON object body; nullopt with `reply` filled on failure.
std::optional<json> parse_body(std::string_view body, Reply& reply) {
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded()) {
    reply = bad_request("body is not valid JSON");
    return std::nullopt;
  }
  if (!j.is_object()) {
    reply = bad_request("body must be a JSON object");
    return std::nullopt;
  }
  return j;
}

std::optional<std::string> string_field(const json& j, const char* key, Reply& reply) {
  const auto it = j.find(key);
  if (it == j.end()) {
    reply = bad_request(std::string("missing field '") + key + "'");
    return std::nullopt;
  }
  if (!it->is_string()) {
    reply = bad_request(std::string("field '") + key + "' must be a string");
    return std::nullopt;
  }
  return it->get<std::string>();
}

}  // namespace

void ServiceConfig::check() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::kConfig, m); };
  try {
    parse_listen_address(listen_address);
  } catch (const Error& e) {
    fail(e.what());
  }
  if (model_path.empty()) {
    fail("model_path is required");
  }
  if (default_n < 1 || default_n > kMaxSelectN) {
    fail("default_n must be in 1.." + std::to_string(kMaxSelectN));
  }
  if (request_timeout_ms <= 0) {
    fail("request_timeout_ms must be > 0");
  }
  if (max_body_bytes == 0) {
    fail("max_body_bytes must be > 0");
  }
  if (threads < 1) {
    fail("threads must be >= 1");
  }
  if (generator_backend) {
    try {
      http::parse_url(*generator_backend);
    } catch (const Error& e) {
      fail(std::string("generator_backend: ") + e.what());
    }
  }
}

json to_json(const ServiceConfig& c) {
  return json{{"listen_address", c.listen_address},
              {"model_path", c.model_path},
              {"generator_backend", c.generator_backend ? json(*c.generator_backend) : json(nullptr)},
              {"default_n", c.default_n},
              {"request_timeout_ms", c.request_timeout_ms},
              {"max_body_bytes", c.max_body_bytes},
              {"threads", c.threads},
              {"hot_reload", c.hot_reload}};
}

namespace {

constexpr std::array<std::string_view, 8> kConfigFields{"listen_address", "model_path", "generator_backend",
                                                        "default_n",      "request_timeout_ms", "max_body_bytes",
                                                        "threads",        "hot_reload"};

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw Error(ErrorCode::kConfig, key + ": expected an integer, got '" + text + "'");
  }
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") {
    return true;
  }
  if (text == "false" || text == "0" || text == "no" || text == "off") {
    return false;
  }
  throw Error(ErrorCode::kConfig, key + ": expected a boolean, got '" + text + "'");
}

void apply(ServiceConfig& c, const ConfigLayer& layer) {
  for (const auto& [key, value] : layer) {
    if (key == "listen_address") {
      c.listen_address = value;
    } else if (key == "model_path") {
      c.model_path = value;
    } else if (key == "generator_backend") {
      c.generator_backend = value.empty() ? std::nullopt : std::optional<std::string>(value);
    } else if (key == "default_n") {
      c.default_n = parse_number<int>(key, value);
    } else if (key == "request_timeout_ms") {
      c.request_timeout_ms = parse_number<int>(key, value);
    } else if (key == "max_body_bytes") {
      c.max_body_bytes = parse_number<std::size_t>(key, value);
    } else if (key == "threads") {
      c.threads = parse_number<int>(key, value);
    } else if (key == "hot_reload") {
      c.hot_reload = parse_bool(key, value);
    } else {
      throw Error(ErrorCode::kConfig, "unknown service setting '" + key + "'");
    }
  }
}

}  // namespace

ServiceConfig resolve_service_config(const ConfigLayer& file, const ConfigLayer& env, const ConfigLayer& flags) {
  ServiceConfig c;
  apply(c, file);
  apply(c, env);
  apply(c, flags);
  c.check();
  return c;
}

ConfigLayer env_layer(const std::function<const char*(const char*)>& getenv) {
  ConfigLayer layer;
  for (const auto field : kConfigFields) {
    std::string name = "ENGAGE_";
    for (const char ch : field) {
      name.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
    }
    if (const char* value = getenv(name.c_str())) {
      layer.emplace(std::string(field), value);
    }
  }
  return layer;
}

HostPort parse_listen_address(std::string_view address) {
  const std::size_t colon = address.rfind(':');
  if (colon == std::string_view::npos || colon == 0) {
    throw Error(ErrorCode::kInvalidArgument, "listen address must be host:port, got '" + std::string(address) + "'");
  }
  HostPort hp;
  hp.host = std::string(address.substr(0, colon));
  const std::string_view port = address.substr(colon + 1);
  const auto [ptr, ec] = std::from_chars(port.data(), port.data() + port.size(), hp.port);
  if (ec != std::errc() || ptr != port.data() + port.size() || hp.port < 0 || hp.port > 65535) {
    throw Error(ErrorCode::kInvalidArgument, "bad port in listen address '" + std::string(address) + "'");
  }
  return hp;
}

struct Service::Loaded {
  std::shared_ptr<const reward::TrainedScorer> model;
  std::unique_ptr<reward::ModelScorer> scorer;
  std::string version;
};

struct Service::Server {
  httplib::Server http;
  HostPort address;
  std::mutex mutex;
  bool started = false;
  bool stop_requested = false;
};

Service::Service(ServiceConfig config, std::shared_ptr<const reward::TrainedScorer> model,
                 std::shared_ptr<const selector::Generator> generator)
    : config_(std::move(config)), generator_(std::move(generator)) {
  swap_model(std::move(model));
}

Service::~Service() = default;

std::unique_ptr<Service> Service::from_config(const ServiceConfig& config) {
  config.check();
  auto model = std::make_shared<const reward::TrainedScorer>(reward::load_model(config.model_path));
  std::shared_ptr<const selector::Generator> generator;
  if (config.generator_backend) {
    generator = std::make_shared<remote::RemoteGenerator>(*config.generator_backend, config.request_timeout_ms);
  }
  return std::make_unique<Service>(config, std::move(model), std::move(generator));
}

void Service::swap_model(std::shared_ptr<const reward::TrainedScorer> model) {
  if (!model) {
    throw Error(ErrorCode::kInvalidArgument, "service needs a model");
  }
  auto next = std::make_shared<Loaded>();
  next->version = reward::model_version(*model);
  next->scorer = std::make_unique<reward::ModelScorer>(model);
  next->model = std::move(model);
  std::lock_guard lock(mutex_);
  loaded_ = std::move(next);
}

void Service::reload() {
  swap_model(std::make_shared<const reward::TrainedScorer>(reward::load_model(config_.model_path)));
}

std::shared_ptr<const Service::Loaded> Service::current() const {
  std::lock_guard lock(mutex_);
  return loaded_;
}

std::string Service::model_version() const { return current()->version; }

Reply Service::healthz() const { return Reply{200, json{{"status", "ok"}, {"model_version", model_version()}}}; }

Reply Service::score(std::string_view body) const {
  Reply reply;
  const auto j = parse_body(body, reply);
  if (!j) {
    return reply;
  }
  const auto context = string_field(*j, "context", reply);
  if (!context) {
    return reply;
  }
  const auto response = string_field(*j, "response", reply);
  if (!response) {
    return reply;
  }
  const auto loaded = current();
  try {
    return Reply{200, json{{"score", loaded->scorer->score(*context, *response)}}};
  } catch (const Error& e) {
    return from_error(e);
  }
}

Reply Service::select(std::string_view body) const {
  Reply reply;
  const auto j = parse_body(body, reply);
  if (!j) {
    return reply;
  }
  const auto context = string_field(*j, "context", reply);
  if (!context) {
    return reply;
  }
  const bool has_candidates = j->contains("candidates");
  const bool has_n = j->contains("n");
  if (has_candidates && has_n) {
    return bad_request("give either 'candidates' or 'n', not both");
  }
  const auto loaded = current();
  try {
    selector::SelectionResult result;
    if (has_candidates) {
      const json& c = (*j)["candidates"];
      if (!c.is_array()) {
        return bad_request("field 'candidates' must be an array of strings");
      }
      std::vector<std::string> candidates;
      for (const auto& item : c) {
        if (!item.is_string()) {
          return bad_request("field 'candidates' must be an array of strings");
        }
        candidates.push_back(item.get<std::string>());
      }
      result = selector::best_of_n(candidates, *context, *loaded->scorer);
    } else {
      int n = config_.default_n;
      if (has_n) {
        const json& jn = (*j)["n"];
        if (!jn.is_number_integer() || jn.get<long long>() < 1 || jn.get<long long>() > kMaxSelectN) {
          return bad_request("field 'n' must be an integer in 1.." + std::to_string(kMaxSelectN));
        }
        n = jn.get<int>();
      }
      std::uint64_t seed = 0;
      if (j->contains("seed")) {
        const json& js = (*j)["seed"];
        if (!js.is_number_unsigned()) {
          return bad_request("field 'seed' must be a non-negative integer");
        }
        seed = js.get<std::uint64_t>();
      }
      if (!generator_) {
        return error_reply(503, "no_generator_backend", "no generator backend is configured; send 'candidates'");
      }
      result = selector::generate_and_select(*generator_, *context, n, *loaded->scorer, seed,
                                             selector::SelectOptions{false, n});
    }
    return Reply{200, json{{"chosen_index", result.chosen_index},
                           {"chosen_text", result.chosen_text},
                           {"scores", result.scores},
                           {"latency_ms", result.latency_ms},
                           {"model_version", loaded->version}}};
  } catch (const Error& e) {
    return from_error(e);
  }
}

int Service::bind() {
  const HostPort hp = parse_listen_address(config_.listen_address);
  server_ = std::make_unique<Server>();
  server_->address = hp;
  auto& svr = server_->http;
  const int threads = config_.threads;
  svr.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
  svr.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  svr.set_payload_max_length(config_.max_body_bytes);
  const auto timeout = std::chrono::milliseconds(config_.request_timeout_ms);
  svr.set_read_timeout(timeout);
  svr.set_write_timeout(timeout);

  auto send = [](httplib::Response& res, const Reply& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  svr.Post("/score", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, score(req.body));
  });
  svr.Post("/select", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, select(req.body));
  });
  svr.Get("/healthz", [this, send](const httplib::Request&, httplib::Response& res) { send(res, healthz()); });
  svr.set_error_handler([send](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) {
      return;
    }
    switch (res.status) {
      case 404: send(res, error_reply(404, "not_found", "no such endpoint")); break;
      case 413: send(res, error_reply(413, "payload_too_large", "request body exceeds max_body_bytes")); break;
      default: send(res, error_reply(res.status, "http_error", httplib::status_message(res.status))); break;
    }
  });
  svr.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string message = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      message = e.what();
    } catch (...) {
    }
    send(res, error_reply(500, "internal_error", message));
  });

  int port = hp.port;
  if (port == 0) {
    port = svr.bind_to_any_port(hp.host);
    if (port < 0) {
      port = 0;
    }
  } else if (!svr.bind_to_port(hp.host, port)) {
    port = 0;
  }
  if (port == 0) {
    server_.reset();
    throw Error(ErrorCode::kIo, "cannot bind " + config_.listen_address);
  }
  server_->address.port = port;
  return port;
}

void Service::run() {
  if (!server_) {
    bind();
  }
  {
    std::lock_guard lock(server_->mutex);
    if (server_->stop_requested) {
      return;
    }
    server_->started = true;
  }
  server_->http.listen_after_bind();
}

void Service::stop() {
  if (!server_) {
    return;
  }
  bool started = false;
  {
    std::lock_guard lock(server_->mutex);
    server_->stop_requested = true;
    started = server_->started;
  }
  if (started) {
    server_->http.wait_until_ready();
    server_->http.stop();
  }
}

}  // namespace engage::gateway
