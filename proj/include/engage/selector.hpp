#pragma once

// Best-of-N rejection sampling: draw N candidates from a generator, score
// each, keep the highest-scoring one.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "engage/scorer.hpp"

namespace engage::selector {

// Produces one candidate response per seed. Same seed, same candidate.
// Implementations must be safe to call concurrently.
class Generator {
 public:
  virtual ~Generator() = default;

  virtual std::string sample(std::string_view context, std::uint64_t seed) const = 0;

  // Batch hook for backends that can draw several candidates at once.
  // Returns nullopt when unsupported; otherwise one text per seed.
  virtual std::optional<std::vector<std::string>> sample_batch(std::string_view /*context*/,
                                                               std::span<const std::uint64_t> /*seeds*/) const {
    return std::nullopt;
  }
};

// Canned responses; sample() returns responses[seed % size].
class StubGenerator : public Generator {
 public:
  explicit StubGenerator(std::vector<std::string> responses);
  // One response per non-blank line.
  static StubGenerator from_file(const std::filesystem::path& path);

  std::string sample(std::string_view context, std::uint64_t seed) const override;
  const std::vector<std::string>& responses() const { return responses_; }

 private:
  std::vector<std::string> responses_;
};

struct SelectionResult {
  int chosen_index = 0;
  std::string chosen_text;
  std::vector<double> scores;
  std::vector<std::string> candidates;
  std::int64_t latency_ms = 0;
  int failed_candidates = 0;  // partial mode only
};

// Argmax of the scores; ties go to the lowest index. Scorer failures are
// rethrown with the candidate index in the message.
SelectionResult best_of_n(std::span<const std::string> candidates, std::string_view context,
                          const Scorer& scorer);

// Index of the largest value, lowest index on ties.
std::size_t argmax(std::span<const double> scores);

struct SelectOptions {
  // Select among the candidates that were generated when at least one was.
  bool partial = false;
  // Candidates generated and scored in parallel by up to this many threads.
  int concurrency = 1;
};

// Candidates are drawn with seeds seed+0 .. seed+n-1. latency_ms covers
// generation and scoring.
SelectionResult generate_and_select(const Generator& generator, std::string_view context, int n,
                                    const Scorer& scorer, std::uint64_t seed,
                                    const SelectOptions& options = {});

}  // namespace engage::selector
