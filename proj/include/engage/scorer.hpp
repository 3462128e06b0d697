#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace engage {

// Estimates P(engaging | context, response). Implementations return values
// in [0, 1], are deterministic for a fixed model, and must be safe to call
// concurrently from several threads.
class Scorer {
 public:
  virtual ~Scorer() = default;

  // `context` is speaker-tagged text as produced by labeler::render_context.
  virtual double score(std::string_view context, std::string_view response) const = 0;

  // Element i equals score(context, responses[i]). Override to share
  // per-context work across responses.
  virtual std::vector<double> score_all(std::string_view context, std::span<const std::string> responses) const {
    std::vector<double> out;
    out.reserve(responses.size());
    for (const auto& r : responses) {
      out.push_back(score(context, r));
    }
    return out;
  }
};

}  // namespace engage
