#pragma once

// Clients for external scoring and generation services speaking the gateway
// wire protocol.

#include <string>
#include <string_view>

#include "engage/http.hpp"
#include "engage/scorer.hpp"
#include "engage/selector.hpp"

namespace engage::remote {

// POST {url}/score {context, response} -> {score}. Scores outside [0, 1]
// raise score_out_of_range.
class RemoteScorer : public Scorer {
 public:
  RemoteScorer(std::string_view url, int timeout_ms);
  double score(std::string_view context, std::string_view response) const override;

 private:
  http::Url url_;
  int timeout_ms_;
};

// POST {url}/generate {context, seed} -> {text}.
class RemoteGenerator : public selector::Generator {
 public:
  RemoteGenerator(std::string_view url, int timeout_ms);
  std::string sample(std::string_view context, std::uint64_t seed) const override;

 private:
  http::Url url_;
  int timeout_ms_;
};

}  // namespace engage::remote
