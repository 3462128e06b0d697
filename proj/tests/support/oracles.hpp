#pragma once

// Reference computations the library is checked against. Each one is written
// from the definition, without reusing library internals.

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "engage/convlog.hpp"
#include "engage/labeler.hpp"
#include "engage/metrics.hpp"
#include "engage/reward.hpp"

namespace oracle {

// Tail sum sum_{k>=0} (x + k)^-alpha, by direct summation plus an integral
// remainder.
double zeta_tail(double alpha, double x);

// Inverse-CDF draw from P(X = n) proportional to n^-alpha, n >= x_min.
int sample_zeta(double alpha, int x_min, std::mt19937_64& rng);
std::vector<int> sample_zeta(double alpha, int x_min, std::size_t count, std::uint64_t seed);

// E[max of n standard normals] by quadrature of x * n * phi(x) * Phi(x)^(n-1).
double expected_max_normal(int n);

// P(label = 1) definitions, applied to a whole conversation.
std::vector<int> continuation_labels(const engage::convlog::Conversation& c, int k);
std::vector<int> retry_labels(const engage::convlog::Conversation& c);
// nullopt for unrated responses.
std::vector<std::optional<int>> star_labels(const engage::convlog::Conversation& c, int s);
std::vector<int> intersection_labels(const engage::convlog::Conversation& c, int k);

// Fraction of (positive, negative) pairs ordered correctly, ties count 1/2.
double pairwise_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Monte-Carlo stderr of 100 (t - b) / b with independent normal inputs.
double mc_relative_improvement_stderr(double t, double t_se, double b, double b_se, int draws,
                                      std::uint64_t seed);

// Minimizes sum w (y - b*alt - c*rm)^2 by successively refined grid search.
std::pair<double, double> additive_grid_search(const std::vector<engage::metrics::ImprovementObservation>& obs);

// Unhashed n-gram counts keyed by a readable name, e.g. "r/t2/a b".
std::map<std::string, int> reference_ngrams(const std::string& context, const std::string& response,
                                            const engage::reward::FeaturizerConfig& config);
// Counts from reference_ngrams pushed through the library's bucket function.
std::map<std::uint32_t, double> reference_hashed_counts(const std::string& context, const std::string& response,
                                                        const engage::reward::FeaturizerConfig& config);

// ---------------------------------------------------------------------------
// Synthetic data

// Rows grouped into conversations of `per_conversation` rows. Tokens come
// from a 50-word vocabulary; positive rows carry the sentinel "zzsentinel"
// in the response. With shuffle_labels the labels are coin flips that do
// not depend on the text.
std::vector<engage::labeler::LabeledRow> separable_dataset(std::size_t rows, std::uint64_t seed,
                                                           bool shuffle_labels = false,
                                                           int per_conversation = 8);

// Random valid conversation with `turns` turns.
engage::convlog::Conversation random_conversation(int turns, std::uint64_t seed);

}  // namespace oracle
