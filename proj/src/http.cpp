#include "engage/http.hpp"

#include <chrono>

#include "engage/error.hpp"
#include "httplib.h"

namespace engage::http {

Url parse_url(std::string_view url) {
  constexpr std::string_view kScheme = "http://";
  if (url.substr(0, kScheme.size()) != kScheme) {
    throw Error(ErrorCode::kInvalidArgument, "only http:// URLs are supported: " + std::string(url));
  }
  const std::size_t slash = url.find('/', kScheme.size());
  Url out;
  out.origin = std::string(url.substr(0, slash));
  if (out.origin.size() == kScheme.size()) {
    throw Error(ErrorCode::kInvalidArgument, "URL has no host: " + std::string(url));
  }
  if (slash != std::string_view::npos) {
    out.path_prefix = std::string(url.substr(slash));
    while (!out.path_prefix.empty() && out.path_prefix.back() == '/') {
      out.path_prefix.pop_back();
    }
  }
  return out;
}

nlohmann::json post_json(const Url& url, std::string_view path, const nlohmann::json& body,
                         int timeout_ms) {
  if (timeout_ms <= 0) {
    throw Error(ErrorCode::kInvalidArgument, "timeout must be positive");
  }
  httplib::Client client(url.origin);
  const auto timeout = std::chrono::milliseconds(timeout_ms);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  const std::string target = url.path_prefix + std::string(path);

  const auto start = std::chrono::steady_clock::now();
  auto res = client.Post(target, body.dump(), "application/json");
  const auto elapsed = std::chrono::steady_clock::now() - start;
  const std::string where = url.origin + target;

  if (!res) {
    const auto err = res.error();
    if (err == httplib::Error::Connection) {
      throw Error(ErrorCode::kConnectionRefused, "cannot connect to " + where);
    }
    if (err == httplib::Error::ConnectionTimeout ||
        ((err == httplib::Error::Read || err == httplib::Error::Write) && elapsed >= timeout * 9 / 10)) {
      throw Error(ErrorCode::kTimeout,
                  where + " did not respond within " + std::to_string(timeout_ms) + " ms");
    }
    throw Error(ErrorCode::kMalformedResponse, where + ": " + httplib::to_string(err));
  }
  if (res->status < 200 || res->status >= 300) {
    throw Error(ErrorCode::kBadStatus,
                where + " returned HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
  }
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::kMalformedResponse, where + " returned a body that is not JSON");
  }
}

}  // namespace engage::http
