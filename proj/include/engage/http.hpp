#pragma once

// Minimal JSON-over-HTTP client used by the remote scorer and generator.

#include <string>
#include <string_view>

#include "json.hpp"

namespace engage::http {

struct Url {
  std::string origin;       // "http://host:port"
  std::string path_prefix;  // "" or "/prefix" without trailing slash
};

// Accepts "http://host[:port][/prefix]". Throws Error(kInvalidArgument).
Url parse_url(std::string_view url);

// POSTs `body` to origin + path_prefix + path. Transport failures surface as
// timeout, connection_refused, bad_status or malformed_response errors.
nlohmann::json post_json(const Url& url, std::string_view path, const nlohmann::json& body,
                         int timeout_ms);

}  // namespace engage::http
