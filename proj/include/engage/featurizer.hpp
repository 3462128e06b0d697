#pragma once

// Hashed n-gram features over a (context, response) pair.
//
// Token n-grams are taken over whitespace tokens; character n-grams over
// each token padded with boundary markers, so every character feature
// belongs to exactly one token. Context and response features live in
// separate namespaces.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace engage::reward {

struct FeaturizerConfig {
  std::vector<int> token_orders{1, 2, 3};
  std::vector<int> char_orders{3, 4, 5};
  std::uint32_t hash_dimension = 1u << 20;
  std::uint64_t seed = 0;

  // Throws Error(kInvalidArgument).
  void check() const;

  bool operator==(const FeaturizerConfig&) const = default;
};

nlohmann::json to_json(const FeaturizerConfig& config);
FeaturizerConfig featurizer_config_from_json(const nlohmann::json& j);

// Sorted by index, no duplicate indices.
struct SparseVector {
  std::vector<std::uint32_t> index;
  std::vector<double> value;

  std::size_t size() const { return index.size(); }
  bool empty() const { return index.empty(); }
  bool operator==(const SparseVector&) const = default;
};

enum class Field : std::uint8_t { kContext = 'c', kResponse = 'r' };
enum class GramKind : std::uint8_t { kToken = 't', kChar = 'h' };

// Hash bucket for one n-gram. Token n-grams pass their tokens; character
// n-grams pass a single string of `order` code points.
std::uint32_t feature_index(const FeaturizerConfig& config, Field field, GramKind kind, int order,
                            std::span<const std::string_view> parts);

// Raw hashed n-gram counts (before normalization).
SparseVector featurize_counts(std::string_view context, std::string_view response,
                              const FeaturizerConfig& config);

// Counts scaled to unit L2 norm. The bias is implicit and not included.
SparseVector featurize(std::string_view context, std::string_view response,
                       const FeaturizerConfig& config);

// Context n-grams hashed once for scoring many responses against one
// context. featurize(r) equals featurize(context, r, config) exactly.
class ContextFeatures {
 public:
  // Keeps a reference to `config`.
  ContextFeatures(std::string_view context, const FeaturizerConfig& config);

  SparseVector featurize_counts(std::string_view response) const;
  SparseVector featurize(std::string_view response) const;

 private:
  const FeaturizerConfig& config_;
  std::vector<std::uint32_t> sorted_;
};

// Character n-grams of one token with boundary markers, as code-point
// substrings. Exposed for reference implementations.
std::vector<std::string> char_ngrams(std::string_view token, int order);

inline constexpr std::string_view kTokenBoundary = "\x02";
inline constexpr std::string_view kTokenEnd = "\x03";

}  // namespace engage::reward
