#include "engage/remote.hpp"

#include <cmath>

#include "engage/error.hpp"

namespace engage::remote {

using nlohmann::json;

RemoteScorer::RemoteScorer(std::string_view url, int timeout_ms)
    : url_(http::parse_url(url)), timeout_ms_(timeout_ms) {
  if (timeout_ms <= 0) {
    throw Error(ErrorCode::kInvalidArgument, "timeout must be positive");
  }
}

double RemoteScorer::score(std::string_view context, std::string_view response) const {
  const json reply = http::post_json(url_, "/score", json{{"context", context}, {"response", response}},
                                     timeout_ms_);
  if (!reply.is_object() || !reply.contains("score") || !reply["score"].is_number()) {
    throw Error(ErrorCode::kMalformedResponse, "scorer reply has no numeric 'score'");
  }
  const double s = reply["score"].get<double>();
  if (!std::isfinite(s) || s < 0.0 || s > 1.0) {
    throw Error(ErrorCode::kScoreOutOfRange, "scorer returned " + reply["score"].dump());
  }
  return s;
}

RemoteGenerator::RemoteGenerator(std::string_view url, int timeout_ms)
    : url_(http::parse_url(url)), timeout_ms_(timeout_ms) {
  if (timeout_ms <= 0) {
    throw Error(ErrorCode::kInvalidArgument, "timeout must be positive");
  }
}

std::string RemoteGenerator::sample(std::string_view context, std::uint64_t seed) const {
  const json reply =
      http::post_json(url_, "/generate", json{{"context", context}, {"seed", seed}}, timeout_ms_);
  if (!reply.is_object() || !reply.contains("text") || !reply["text"].is_string()) {
    throw Error(ErrorCode::kMalformedResponse, "generator reply has no string 'text'");
  }
  return reply["text"].get<std::string>();
}

}  // namespace engage::remote
