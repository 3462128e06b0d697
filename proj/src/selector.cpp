#include "engage/selector.hpp"

#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <thread>

#include "engage/convlog.hpp"
#include "engage/error.hpp"

namespace engage::selector {

namespace {

struct Outcome {
  std::optional<std::string> text;
  double score = 0.0;
  std::optional<Error> generate_error;
  std::optional<Error> score_error;
};

Error annotate(const std::exception_ptr& ep, ErrorCode fallback, std::size_t index) {
  const std::string prefix = "candidate " + std::to_string(index) + ": ";
  try {
    std::rethrow_exception(ep);
  } catch (const Error& e) {
    return Error(e.code(), prefix + e.what());
  } catch (const std::exception& e) {
    return Error(fallback, prefix + e.what());
  } catch (...) {
    return Error(fallback, prefix + "unknown failure");
  }
}

void score_into(Outcome& o, const Scorer& scorer, std::string_view context, std::size_t index) {
  try {
    const double s = scorer.score(context, *o.text);
    if (!std::isfinite(s) || s < 0.0 || s > 1.0) {
      throw Error(ErrorCode::kScoreOutOfRange, "score " + std::to_string(s) + " outside [0, 1]");
    }
    o.score = s;
  } catch (...) {
    o.score_error = annotate(std::current_exception(), ErrorCode::kScorerFailed, index);
  }
}

// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      fn(i);
    }
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        fn(i);
      }
    });
  }
  for (auto& t : pool) {
    t.join();
  }
}

}  // namespace

StubGenerator::StubGenerator(std::vector<std::string> responses) : responses_(std::move(responses)) {
  if (responses_.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "stub generator needs at least one response");
  }
}

StubGenerator StubGenerator::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::kIo, "cannot open " + path.string());
  }
  std::vector<std::string> responses;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (!convlog::trim(line).empty()) {
      responses.push_back(line);
    }
  }
  return StubGenerator(std::move(responses));
}

std::string StubGenerator::sample(std::string_view, std::uint64_t seed) const {
  return responses_[seed % responses_.size()];
}

std::size_t argmax(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) {
      best = i;
    }
  }
  return best;
}

SelectionResult best_of_n(std::span<const std::string> candidates, std::string_view context,
                          const Scorer& scorer) {
  if (candidates.empty()) {
    throw Error(ErrorCode::kEmptyCandidates, "no candidates to select from");
  }
  const auto start = std::chrono::steady_clock::now();
  SelectionResult result;
  try {
    result.scores = scorer.score_all(context, candidates);
    if (result.scores.size() != candidates.size()) {
      throw Error(ErrorCode::kScorerFailed, "scorer returned " + std::to_string(result.scores.size()) +
                                                " scores for " + std::to_string(candidates.size()) + " candidates");
    }
    for (double s : result.scores) {
      if (!std::isfinite(s) || s < 0.0 || s > 1.0) {
        throw Error(ErrorCode::kScoreOutOfRange, "score outside [0, 1]");
      }
    }
  } catch (...) {
    // Rescore one by one to name the failing candidate.
    result.scores.clear();
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      Outcome o;
      o.text = candidates[i];
      score_into(o, scorer, context, i);
      if (o.score_error) {
        throw *o.score_error;
      }
      result.scores.push_back(o.score);
    }
  }
  result.candidates.assign(candidates.begin(), candidates.end());
  result.chosen_index = static_cast<int>(argmax(result.scores));
  result.chosen_text = candidates[static_cast<std::size_t>(result.chosen_index)];
  result.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                          std::chrono::steady_clock::now() - start)
                          .count();
  return result;
}

SelectionResult generate_and_select(const Generator& generator, std::string_view context, int n,
                                    const Scorer& scorer, std::uint64_t seed,
                                    const SelectOptions& options) {
  if (n < 1) {
    throw Error(ErrorCode::kInvalidArgument, "n must be >= 1");
  }
  const auto start = std::chrono::steady_clock::now();
  const auto count = static_cast<std::size_t>(n);
  std::vector<Outcome> outcomes(count);

  std::vector<std::uint64_t> seeds(count);
  for (std::size_t i = 0; i < count; ++i) {
    seeds[i] = seed + i;
  }
  std::optional<std::vector<std::string>> batch;
  try {
    batch = generator.sample_batch(context, seeds);
  } catch (...) {
    throw annotate(std::current_exception(), ErrorCode::kGeneratorFailed, 0);
  }
  if (batch && batch->size() != count) {
    throw Error(ErrorCode::kGeneratorFailed, "batch generator returned " + std::to_string(batch->size()) +
                                                 " candidates, expected " + std::to_string(count));
  }

  parallel_for(count, options.concurrency, [&](std::size_t i) {
    Outcome& o = outcomes[i];
    if (batch) {
      o.text = (*batch)[i];
    } else {
      try {
        o.text = generator.sample(context, seeds[i]);
      } catch (...) {
        o.generate_error = annotate(std::current_exception(), ErrorCode::kGeneratorFailed, i);
        return;
      }
    }
    score_into(o, scorer, context, i);
  });

  std::size_t generated = 0;
  const Error* first_generate_error = nullptr;
  for (const auto& o : outcomes) {
    if (o.text) {
      ++generated;
    } else if (first_generate_error == nullptr) {
      first_generate_error = &*o.generate_error;
    }
  }
  if (first_generate_error != nullptr && (!options.partial || generated == 0)) {
    throw Error(ErrorCode::kGeneratorFailed, std::to_string(generated) + " of " + std::to_string(count) +
                                                 " candidates generated; " + first_generate_error->what());
  }

  SelectionResult result;
  for (const auto& o : outcomes) {
    if (!o.text) {
      ++result.failed_candidates;
      continue;
    }
    if (o.score_error) {
      throw *o.score_error;
    }
    result.candidates.push_back(*o.text);
    result.scores.push_back(o.score);
  }
  result.chosen_index = static_cast<int>(argmax(result.scores));
  result.chosen_text = result.candidates[static_cast<std::size_t>(result.chosen_index)];
  result.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                          std::chrono::steady_clock::now() - start)
                          .count();
  return result;
}

}  // namespace engage::selector
