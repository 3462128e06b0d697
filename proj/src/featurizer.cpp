#include "engage/featurizer.hpp"

#include <algorithm>
#include <cmath>

#include "engage/error.hpp"
#include "engage/hash.hpp"
#include "engage/labeler.hpp"
#include "engage/random.hpp"

namespace engage::reward {

using nlohmann::json;

namespace {

constexpr unsigned char kSeparator = 0x1f;

std::uint64_t namespace_hash(const FeaturizerConfig& config, Field field, GramKind kind, int order) {
  std::uint64_t h = fnv1a_byte(static_cast<unsigned char>(field), mix64(config.seed) ^ kFnvOffset);
  h = fnv1a_byte(static_cast<unsigned char>(kind), h);
  return fnv1a_byte(static_cast<unsigned char>(order), h);
}

std::uint32_t bucket(std::uint64_t h, std::uint32_t dimension) {
  return static_cast<std::uint32_t>(mix64(h)) & (dimension - 1);
}

// Byte offsets of code-point starts in `s`, plus s.size() at the end.
void code_point_offsets(std::string_view s, std::vector<std::size_t>& out) {
  out.clear();
  for (std::size_t i = 0; i < s.size(); ++i) {
    if ((static_cast<unsigned char>(s[i]) & 0xC0) != 0x80) {
      out.push_back(i);
    }
  }
  out.push_back(s.size());
}

void add_field(std::string_view text, Field field, const FeaturizerConfig& config,
               std::vector<std::uint32_t>& indices) {
  const auto tokens = labeler::tokenize(text);
  for (int order : config.token_orders) {
    const std::uint64_t base = namespace_hash(config, field, GramKind::kToken, order);
    const auto n = static_cast<std::size_t>(order);
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      std::uint64_t h = base;
      for (std::size_t j = 0; j < n; ++j) {
        if (j > 0) {
          h = fnv1a_byte(kSeparator, h);
        }
        h = fnv1a(tokens[i + j], h);
      }
      indices.push_back(bucket(h, config.hash_dimension));
    }
  }
  if (config.char_orders.empty()) {
    return;
  }
  std::string padded;
  std::vector<std::size_t> offsets;
  for (const auto token : tokens) {
    padded.assign(kTokenBoundary);
    padded.append(token);
    padded.append(kTokenEnd);
    code_point_offsets(padded, offsets);
    const std::size_t n_cp = offsets.size() - 1;
    for (int order : config.char_orders) {
      const std::uint64_t base = namespace_hash(config, field, GramKind::kChar, order);
      const auto n = static_cast<std::size_t>(order);
      for (std::size_t i = 0; i + n <= n_cp; ++i) {
        const std::string_view gram(padded.data() + offsets[i], offsets[i + n] - offsets[i]);
        indices.push_back(bucket(fnv1a(gram, base), config.hash_dimension));
      }
    }
  }
}

}  // namespace

void FeaturizerConfig::check() const {
  if (token_orders.empty() && char_orders.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "featurizer needs at least one n-gram order");
  }
  for (int o : token_orders) {
    if (o < 1 || o > 8) {
      throw Error(ErrorCode::kInvalidArgument, "token n-gram orders must be in 1..8");
    }
  }
  for (int o : char_orders) {
    if (o < 1 || o > 12) {
      throw Error(ErrorCode::kInvalidArgument, "character n-gram orders must be in 1..12");
    }
  }
  if (hash_dimension < (1u << 10) || (hash_dimension & (hash_dimension - 1)) != 0) {
    throw Error(ErrorCode::kInvalidArgument, "hash dimension must be a power of two >= 1024");
  }
}

json to_json(const FeaturizerConfig& c) {
  return json{{"token_orders", c.token_orders},
              {"char_orders", c.char_orders},
              {"hash_dimension", c.hash_dimension},
              {"seed", c.seed}};
}

FeaturizerConfig featurizer_config_from_json(const json& j) {
  FeaturizerConfig c;
  c.token_orders = j.at("token_orders").get<std::vector<int>>();
  c.char_orders = j.at("char_orders").get<std::vector<int>>();
  c.hash_dimension = j.at("hash_dimension").get<std::uint32_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.check();
  return c;
}

std::uint32_t feature_index(const FeaturizerConfig& config, Field field, GramKind kind, int order,
                            std::span<const std::string_view> parts) {
  std::uint64_t h = namespace_hash(config, field, kind, order);
  for (std::size_t j = 0; j < parts.size(); ++j) {
    if (j > 0) {
      h = fnv1a_byte(kSeparator, h);
    }
    h = fnv1a(parts[j], h);
  }
  return bucket(h, config.hash_dimension);
}

std::vector<std::string> char_ngrams(std::string_view token, int order) {
  std::string padded(kTokenBoundary);
  padded.append(token);
  padded.append(kTokenEnd);
  std::vector<std::size_t> offsets;
  code_point_offsets(padded, offsets);
  std::vector<std::string> grams;
  const auto n = static_cast<std::size_t>(order);
  for (std::size_t i = 0; i + n < offsets.size(); ++i) {
    grams.emplace_back(padded.substr(offsets[i], offsets[i + n] - offsets[i]));
  }
  return grams;
}

namespace {

SparseVector run_lengths(const std::vector<std::uint32_t>& sorted) {
  SparseVector v;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) {
      ++j;
    }
    v.index.push_back(sorted[i]);
    v.value.push_back(static_cast<double>(j - i));
    i = j;
  }
  return v;
}

SparseVector normalized(SparseVector v) {
  double norm2 = 0.0;
  for (double x : v.value) {
    norm2 += x * x;
  }
  if (norm2 > 0.0) {
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& x : v.value) {
      x *= inv;
    }
  }
  return v;
}

}  // namespace

SparseVector featurize_counts(std::string_view context, std::string_view response,
                              const FeaturizerConfig& config) {
  std::vector<std::uint32_t> indices;
  add_field(context, Field::kContext, config, indices);
  add_field(response, Field::kResponse, config, indices);
  std::sort(indices.begin(), indices.end());
  return run_lengths(indices);
}

SparseVector featurize(std::string_view context, std::string_view response,
                       const FeaturizerConfig& config) {
  return normalized(featurize_counts(context, response, config));
}

ContextFeatures::ContextFeatures(std::string_view context, const FeaturizerConfig& config) : config_(config) {
  add_field(context, Field::kContext, config, sorted_);
  std::sort(sorted_.begin(), sorted_.end());
}

SparseVector ContextFeatures::featurize_counts(std::string_view response) const {
  std::vector<std::uint32_t> own;
  add_field(response, Field::kResponse, config_, own);
  std::sort(own.begin(), own.end());
  std::vector<std::uint32_t> merged(sorted_.size() + own.size());
  std::merge(sorted_.begin(), sorted_.end(), own.begin(), own.end(), merged.begin());
  return run_lengths(merged);
}

SparseVector ContextFeatures::featurize(std::string_view response) const {
  return normalized(featurize_counts(response));
}

}  // namespace engage::reward
