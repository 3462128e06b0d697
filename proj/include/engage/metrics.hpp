#pragma once

// Engagement metrics (mean conversation length, retry rate, star rating,
// day-X retention), relative improvement between experiment arms, and the
// regression fits used to summarize experiment series.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "engage/convlog.hpp"

namespace engage::metrics {

struct MetricValue {
  double value = 0.0;
  std::optional<double> std_error;
  std::size_t n = 0;
};

struct BootstrapOptions {
  int resamples = 1000;
  std::uint64_t seed = 0;
};

// Unit that is resampled by the bootstrap. Responses and conversations of a
// single user are correlated, so A/B harnesses resample users.
enum class ClusterBy { kConversation, kUser };

inline constexpr int kDefaultMclCap = 100;

struct MclOptions {
  std::optional<int> cap = kDefaultMclCap;  // nullopt: uncapped
  ClusterBy cluster_by = ClusterBy::kConversation;
  std::optional<BootstrapOptions> bootstrap = BootstrapOptions{};
};

struct RateOptions {
  ClusterBy cluster_by = ClusterBy::kConversation;
  std::optional<BootstrapOptions> bootstrap = BootstrapOptions{};
};

// Everything the metrics need from one conversation. Lets large simulations
// skip materializing transcripts.
struct ConversationSummary {
  std::uint64_t user_key = 0;
  int length = 0;
  int regenerated = 0;
  std::array<int, 4> star_counts{};  // index r-1 counts ratings of r stars
};

ConversationSummary summarize(const convlog::Conversation& conversation);
std::vector<ConversationSummary> summarize(std::span<const convlog::Conversation> dataset);

MetricValue mcl(std::span<const convlog::Conversation> dataset, const MclOptions& options = {});
MetricValue mcl(std::span<const ConversationSummary> dataset, const MclOptions& options = {});

MetricValue retry_rate(std::span<const convlog::Conversation> dataset, const RateOptions& options = {});
MetricValue retry_rate(std::span<const ConversationSummary> dataset, const RateOptions& options = {});

// Fraction of rated responses with at least `s` stars; binomial stderr.
MetricValue star_rating_at_least(std::span<const convlog::Conversation> dataset, int s);
MetricValue star_rating_at_least(std::span<const ConversationSummary> dataset, int s);

// Fraction of users active exactly `day_x` days after their first
// conversation. Only users whose observation window reaches that day are
// counted; throws no_samples when none do.
MetricValue retention(std::span<const convlog::UserActivity> users, int day_x,
                      convlog::Date observed_through);

// Observation end inferred as the latest active date in the cohort.
MetricValue retention(std::span<const convlog::UserActivity> users, int day_x);

// Percentage change of treatment over baseline; delta-method stderr
// assuming independent arms.
MetricValue relative_improvement(const MetricValue& treatment, const MetricValue& baseline);

// ---------------------------------------------------------------------------
// Regression fits

struct FitParameter {
  std::string name;
  double value = 0.0;
  double std_error = 0.0;
};

struct FitResult {
  std::vector<FitParameter> parameters;
  // sqrt of the (weighted) residual sum of squares.
  double residual_norm = 0.0;

  const FitParameter& at(std::string_view name) const;
  double value(std::string_view name) const { return at(name).value; }
  double std_error(std::string_view name) const { return at(name).std_error; }
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// Least squares fit of y = m * log10(x) + c. With weights (1/sigma^2) the
// fit is weighted. Standard errors follow the usual convention of scaling
// the covariance by the reduced chi-square when degrees of freedom remain.
FitResult fit_log_linear(std::span<const Point> points,
                         std::optional<std::span<const double>> weights = std::nullopt);

struct ImprovementObservation {
  bool has_alt_model = false;
  bool has_reward_model = false;
  double y = 0.0;      // percent improvement
  double sigma = 1.0;  // its standard error
};

// Weighted fit of y = b * [alt_model] + c * [reward_model], no intercept.
FitResult fit_additive_improvement(std::span<const ImprovementObservation> observations);

// Discrete power-law MLE over lengths >= x_min. The returned "slope" is the
// negated exponent, e.g. -1.8 for P(n) ~ n^-1.8.
FitResult fit_power_law_tail(std::span<const int> lengths, int x_min);

inline constexpr std::size_t kMinTailSamples = 100;

// Hurwitz zeta sum_{k>=0} (k + q)^-s and its first two derivatives in s.
struct ZetaTerms {
  double value = 0.0;
  double d1 = 0.0;
  double d2 = 0.0;
};
ZetaTerms hurwitz_zeta(double s, double q);

// Bootstrap over per-cluster (numerator, denominator) sums of a ratio
// statistic. Exposed for the A/B harness and tests.
struct ClusterSums {
  double numerator = 0.0;
  double denominator = 0.0;
};
std::optional<double> bootstrap_ratio_stderr(std::span<const ClusterSums> clusters,
                                             const BootstrapOptions& options);

}  // namespace engage::metrics
